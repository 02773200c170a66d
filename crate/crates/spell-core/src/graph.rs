//! Graph construction over face-box tracks.
//!
//! A video's face boxes are time-sorted, split into fixed-size chunks, and
//! each chunk becomes one graph whose nodes are face boxes. Three edge
//! variants are built per chunk:
//!
//! * **undirected** — two distinct boxes are connected if they share a
//!   frame, or belong to the same entity and are at most `tau` seconds
//!   apart (in either direction);
//! * **forward** — same-frame pairs stay bidirectional, while same-entity
//!   pairs are connected only from the earlier box to the later one
//!   (`0 < dt <= tau`);
//! * **backward** — exact reversal of forward.
//!
//! Every variant also carries a self-loop on each node. An edge `(src,
//! dst)` means messages flow from `src` to `dst`; edges are stored sorted
//! by `(dst, src)` so per-destination aggregation walks contiguous runs.

use crate::error::{Result, SpellError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two timestamps within this many seconds are "the same frame". Covers
/// float noise from parsing printed timestamps; real frame spacing is
/// orders of magnitude larger.
pub const SAME_FRAME_TOL: f64 = 1e-6;

/// One face box: a node in the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBox {
    pub video_id: String,
    /// Timestamp in seconds.
    pub time: f64,
    /// Box centre and size, normalised to the frame ([0, 1]).
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Track/person identifier, stable across frames.
    pub entity_id: String,
    /// 1 = speaking, 0 = not; `None` for unlabeled inference data.
    pub label: Option<u8>,
    /// Row in the feature store; assigned when tracks are joined with
    /// features, `usize::MAX` until then.
    pub feature_row: usize,
}

impl FaceBox {
    /// Ordering used everywhere: by time, ties broken by entity id.
    fn sort_key_cmp(&self, other: &FaceBox) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.entity_id.cmp(&other.entity_id))
    }

    /// Whether two boxes are on the same frame (times within
    /// [`SAME_FRAME_TOL`]).
    pub fn same_frame(&self, other: &FaceBox) -> bool {
        (self.time - other.time).abs() <= SAME_FRAME_TOL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeVariant {
    Forward,
    Undirected,
    Backward,
}

impl EdgeVariant {
    pub const ALL: [EdgeVariant; 3] =
        [EdgeVariant::Forward, EdgeVariant::Undirected, EdgeVariant::Backward];

    pub fn name(self) -> &'static str {
        match self {
            EdgeVariant::Forward => "forward",
            EdgeVariant::Undirected => "undirected",
            EdgeVariant::Backward => "backward",
        }
    }
}

/// Directed edge list over `node_count` nodes, sorted by `(dst, src)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSet {
    pub variant: EdgeVariant,
    node_count: u32,
    edges: Vec<(u32, u32)>,
}

impl EdgeSet {
    /// Wraps a raw edge list, sorting it and validating the endpoints.
    pub fn new(variant: EdgeVariant, node_count: u32, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        for &(s, d) in &edges {
            if s >= node_count || d >= node_count {
                return Err(SpellError::validation(format!(
                    "edge ({s}, {d}) out of range for {node_count} nodes"
                )));
            }
        }
        edges.sort_unstable_by_key(|&(s, d)| (d, s));
        edges.dedup();
        Ok(EdgeSet { variant, node_count, edges })
    }

    #[inline]
    pub fn node_count(&self) -> u32 {
        self.node_count
    }

    #[inline]
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges with `src != dst`.
    pub fn non_self_loop_count(&self) -> usize {
        self.edges.iter().filter(|&&(s, d)| s != d).count()
    }

    /// The same connectivity with every edge flipped.
    pub fn reversed(&self) -> EdgeSet {
        let variant = match self.variant {
            EdgeVariant::Forward => EdgeVariant::Backward,
            EdgeVariant::Backward => EdgeVariant::Forward,
            EdgeVariant::Undirected => EdgeVariant::Undirected,
        };
        let mut edges: Vec<(u32, u32)> = self.edges.iter().map(|&(s, d)| (d, s)).collect();
        edges.sort_unstable_by_key(|&(s, d)| (d, s));
        EdgeSet { variant, node_count: self.node_count, edges }
    }
}

/// One graph: a chunk of time-sorted face boxes plus its three edge sets.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub video_id: String,
    pub nodes: Vec<FaceBox>,
    pub forward: EdgeSet,
    pub undirected: EdgeSet,
    pub backward: EdgeSet,
}

impl Chunk {
    /// Builds all three edge variants for an already-sorted node slice.
    pub fn build(nodes: Vec<FaceBox>, tau: f64) -> Result<Chunk> {
        if nodes.is_empty() {
            return Err(SpellError::validation("chunk must contain at least one node"));
        }
        let video_id = nodes[0].video_id.clone();
        if nodes.iter().any(|b| b.video_id != video_id) {
            return Err(SpellError::validation("chunk mixes boxes from different videos"));
        }
        let forward = build_edges(&nodes, tau, EdgeVariant::Forward)?;
        let undirected = build_edges(&nodes, tau, EdgeVariant::Undirected)?;
        let backward = build_edges(&nodes, tau, EdgeVariant::Backward)?;
        Ok(Chunk { video_id, nodes, forward, undirected, backward })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_set(&self, variant: EdgeVariant) -> &EdgeSet {
        match variant {
            EdgeVariant::Forward => &self.forward,
            EdgeVariant::Undirected => &self.undirected,
            EdgeVariant::Backward => &self.backward,
        }
    }
}

/// Sorts one video's boxes by `(time, entity_id)` and splits them into
/// consecutive runs of at most `n` nodes. 5 boxes with `n = 2` yield runs
/// of sizes `[2, 2, 1]`.
pub fn order_and_chunk(mut boxes: Vec<FaceBox>, n: usize) -> Result<Vec<Vec<FaceBox>>> {
    if n == 0 {
        return Err(SpellError::validation("chunk size n must be positive"));
    }
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let video_id = boxes[0].video_id.clone();
    if boxes.iter().any(|b| b.video_id != video_id) {
        return Err(SpellError::validation(
            "order_and_chunk expects boxes from a single video",
        ));
    }
    for b in &boxes {
        if !b.time.is_finite() || b.time < 0.0 {
            return Err(SpellError::validation(format!(
                "box for entity '{}' has invalid time {}",
                b.entity_id, b.time
            )));
        }
    }
    boxes.sort_by(|a, b| a.sort_key_cmp(b));
    let mut chunks = Vec::with_capacity(boxes.len().div_ceil(n));
    let mut rest = boxes;
    while rest.len() > n {
        let tail = rest.split_off(n);
        chunks.push(rest);
        rest = tail;
    }
    chunks.push(rest);
    Ok(chunks)
}

/// Builds one edge variant over a time-sorted chunk.
///
/// Scans a sliding window: for each node only earlier nodes within
/// `max(tau, SAME_FRAME_TOL)` seconds are candidates, so cost is linear in
/// nodes times the temporal neighbourhood size rather than quadratic.
pub fn build_edges(nodes: &[FaceBox], tau: f64, variant: EdgeVariant) -> Result<EdgeSet> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(SpellError::validation(format!("tau must be finite and >= 0, got {tau}")));
    }
    if nodes.is_empty() {
        return Err(SpellError::validation("cannot build edges over zero nodes"));
    }
    if nodes.len() > u32::MAX as usize {
        return Err(SpellError::validation("chunk exceeds u32 node indexing"));
    }
    for w in nodes.windows(2) {
        if w[0].sort_key_cmp(&w[1]) == std::cmp::Ordering::Greater {
            return Err(SpellError::validation(
                "build_edges expects nodes sorted by (time, entity_id)",
            ));
        }
    }

    let n = nodes.len();
    let window = tau.max(SAME_FRAME_TOL);
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(n * 4);

    // Self-loops on every node, in every variant.
    for v in 0..n as u32 {
        edges.push((v, v));
    }

    for j in 1..n {
        let tj = nodes[j].time;
        for i in (0..j).rev() {
            let dt = tj - nodes[i].time;
            if dt > window {
                break;
            }
            let same_frame = dt <= SAME_FRAME_TOL;
            let (i32u, j32u) = (i as u32, j as u32);
            if same_frame {
                // Same-frame pairs are bidirectional in every variant.
                match variant {
                    EdgeVariant::Forward | EdgeVariant::Backward | EdgeVariant::Undirected => {
                        edges.push((i32u, j32u));
                        edges.push((j32u, i32u));
                    }
                }
            } else if nodes[i].entity_id == nodes[j].entity_id && dt <= tau {
                match variant {
                    EdgeVariant::Undirected => {
                        edges.push((i32u, j32u));
                        edges.push((j32u, i32u));
                    }
                    // Earlier-to-later only.
                    EdgeVariant::Forward => edges.push((i32u, j32u)),
                    // Later-to-earlier only.
                    EdgeVariant::Backward => edges.push((j32u, i32u)),
                }
            }
        }
    }

    EdgeSet::new(variant, n as u32, edges)
}

/// Randomly removes non-self-loop edges with probability `p`, seeded for
/// reproducibility. Self-loops always survive so no node loses its own
/// message. `p` must lie in `[0, 1)`.
pub fn edge_dropout(set: &EdgeSet, p: f64, seed: u64) -> Result<EdgeSet> {
    if !(0.0..1.0).contains(&p) {
        return Err(SpellError::validation(format!(
            "edge dropout probability must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(u32, u32)> = set
        .edges
        .iter()
        .filter(|&&(s, d)| s == d || rng.random::<f64>() >= p)
        .copied()
        .collect();
    // Filtering a (dst, src)-sorted list keeps it sorted.
    Ok(EdgeSet { variant: set.variant, node_count: set.node_count, edges })
}

/// Disjoint union of edge sets: block-diagonal merge with node indices
/// offset by the cumulative node counts. Because each block keeps its
/// `(dst, src)` order and destination ranges are disjoint and increasing,
/// plain concatenation stays globally sorted.
pub fn merge_edge_sets(sets: &[&EdgeSet]) -> Result<EdgeSet> {
    if sets.is_empty() {
        return Err(SpellError::validation("cannot merge zero edge sets"));
    }
    let variant = sets[0].variant;
    if sets.iter().any(|s| s.variant != variant) {
        return Err(SpellError::validation("cannot merge edge sets of different variants"));
    }
    let total_nodes: u64 = sets.iter().map(|s| s.node_count as u64).sum();
    if total_nodes > u32::MAX as u64 {
        return Err(SpellError::validation("merged graph exceeds u32 node indexing"));
    }
    let mut edges = Vec::with_capacity(sets.iter().map(|s| s.len()).sum());
    let mut offset = 0u32;
    for set in sets {
        edges.extend(set.edges.iter().map(|&(s, d)| (s + offset, d + offset)));
        offset += set.node_count;
    }
    Ok(EdgeSet { variant, node_count: total_nodes as u32, edges })
}
