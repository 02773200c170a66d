//! Whole-network forward and backward passes.
//!
//! `forward_train` returns per-node probabilities plus a cache holding
//! every intermediate the hand-derived backward needs; `backward` consumes
//! that cache (a second call on the same cache is a state error) and
//! accumulates parameter gradients. `forward_eval` is a pure function of
//! the parameters and inputs: batch norms use running statistics, so
//! results do not depend on how nodes were grouped into chunks.
//!
//! During a training step the weight-shared middle layer runs once per
//! stream, in stream order (forward, undirected, backward), which also
//! fixes the order of its running-statistics updates.

use super::config::ModelConfig;
use super::conv::{
    agg_dst_to_src, agg_src_to_dst, edge_rows_sum_by_dst, edge_rows_sum_by_src, gather_by_dst,
    maxpool_backward, maxpool_in_neighbors,
};
use super::params::{Head, SharedLayer, SpellParams, Stream};
use crate::error::{Result, SpellError};
use crate::graph::{Chunk, EdgeSet, EdgeVariant};
use crate::tensor::{
    linear_grads, relu, relu_backward, sigmoid_slice, BnCache, Matrix, Real,
};

/// Node features for one graph (or a disjoint union of graphs), rows
/// aligned with node indices.
#[derive(Clone, Debug)]
pub struct NodeBatch<T> {
    pub visual: Matrix<T>,
    pub audio: Matrix<T>,
    pub spatial: Matrix<T>,
    /// Per-node 0/1 labels; `None` for inference-only data.
    pub labels: Option<Vec<u8>>,
}

impl<T: Real> NodeBatch<T> {
    pub fn n(&self) -> usize {
        self.visual.rows()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(SpellError::validation("empty node batch"));
        }
        let checks = [
            ("visual", self.visual.shape(), config.visual_dim),
            ("audio", self.audio.shape(), config.audio_dim),
            ("spatial", self.spatial.shape(), config.spatial_dim),
        ];
        for (name, (rows, cols), want) in checks {
            if rows != n || cols != want {
                return Err(SpellError::validation(format!(
                    "{name} features are {rows}x{cols}, expected {n}x{want}"
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(SpellError::validation(format!(
                    "{} labels for {n} nodes",
                    labels.len()
                )));
            }
        }
        Ok(())
    }
}

/// Borrowed view of the three edge variants of one graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphView<'a> {
    pub forward: &'a EdgeSet,
    pub undirected: &'a EdgeSet,
    pub backward: &'a EdgeSet,
}

impl<'a> GraphView<'a> {
    pub fn from_chunk(chunk: &'a Chunk) -> Self {
        GraphView {
            forward: &chunk.forward,
            undirected: &chunk.undirected,
            backward: &chunk.backward,
        }
    }

    pub fn edges(&self, variant: EdgeVariant) -> &'a EdgeSet {
        match variant {
            EdgeVariant::Forward => self.forward,
            EdgeVariant::Undirected => self.undirected,
            EdgeVariant::Backward => self.backward,
        }
    }

    pub fn node_count(&self) -> usize {
        self.forward.node_count() as usize
    }

    fn validate(&self, n: usize) -> Result<()> {
        for v in EdgeVariant::ALL {
            if self.edges(v).node_count() as usize != n {
                return Err(SpellError::validation(format!(
                    "{} edge set covers {} nodes, batch has {n}",
                    v.name(),
                    self.edges(v).node_count()
                )));
            }
        }
        Ok(())
    }
}

/// Per-stream intermediates cached during a training forward.
#[derive(Clone, Debug)]
struct StreamCache<T> {
    /// Edge count at forward time; backward re-checks it against the
    /// graph it is given.
    edge_count: usize,
    /// Edge MLP hidden pre-activation (`E x hidden`).
    m1: Matrix<T>,
    /// Edge MLP hidden post-ReLU.
    m1r: Matrix<T>,
    bn1_cache: BnCache<T>,
    /// Edge-conv batch-norm output, pre-ReLU (`N x f`).
    bn1_out: Matrix<T>,
    /// Aggregated layer-1 output (`N x f`), input to the shared layer.
    n1: Matrix<T>,
    /// Inception only: concatenated branch matrix (input to the
    /// projection) and the maxpool winner per output element.
    incept: Option<(Matrix<T>, Vec<u32>)>,
    bn2_cache: BnCache<T>,
    bn2_out: Matrix<T>,
    /// Aggregated layer-2 output (`N x f`), input to the stream head.
    n2: Matrix<T>,
}

#[derive(Clone, Debug)]
enum HeadCache<T> {
    /// Baseline head reads `fused` directly; nothing extra to keep.
    PerNode,
    Graph(Vec<StreamCache<T>>),
}

/// Everything `backward` needs from a training forward pass.
#[derive(Clone, Debug)]
pub struct SpellCache<T> {
    consumed: bool,
    spatial_in: Option<Matrix<T>>,
    /// Input to the visual branch (embedding, with projected box appended
    /// when spatial features are on).
    visual_cat: Matrix<T>,
    audio_in: Matrix<T>,
    v_bn_cache: BnCache<T>,
    v_bn_out: Matrix<T>,
    a_bn_cache: BnCache<T>,
    a_bn_out: Matrix<T>,
    fused: Matrix<T>,
    head: HeadCache<T>,
    probs: Vec<T>,
}

/// Splits the edge-MLP first layer by its input halves and evaluates
/// `m1[e] = x[dst] @ W_top + x[src] @ W_bot + b` without materialising the
/// per-edge concatenation.
fn edge_mlp_hidden<T: Real>(
    fused: &Matrix<T>,
    edges: &EdgeSet,
    g1_w: &Matrix<T>,
    g1_b: &Matrix<T>,
) -> Result<Matrix<T>> {
    let f = fused.cols();
    let w_top = g1_w.rows_range(0, f);
    let w_bot = g1_w.rows_range(f, 2 * f);
    let p = crate::tensor::matmul(fused, &w_top)?;
    let q = crate::tensor::matmul(fused, &w_bot)?;
    let h = g1_w.cols();
    let mut m1 = Matrix::zeros(edges.len(), h);
    let bias = g1_b.row(0);
    for (e, &(s, d)) in edges.edges().iter().enumerate() {
        let pr = p.row(d as usize);
        let qr = q.row(s as usize);
        let out = m1.row_mut(e);
        for j in 0..h {
            out[j] = pr[j] + qr[j] + bias[j];
        }
    }
    Ok(m1)
}

/// Edge convolution without its batch norm, callable in isolation:
/// `out[v] = Σ over in-edges (u, v) of g([x_v ∘ x_u])` where `g` is the
/// two-layer edge MLP `relu(· @ g1_w + g1_b) @ g2_w + g2_b`. This is the
/// aggregation the stream layer computes before BN+ReLU.
pub fn edge_conv_aggregate<T: Real>(
    x: &Matrix<T>,
    edges: &EdgeSet,
    g1_w: &Matrix<T>,
    g1_b: &Matrix<T>,
    g2_w: &Matrix<T>,
    g2_b: &Matrix<T>,
) -> Result<Matrix<T>> {
    let m1 = edge_mlp_hidden(x, edges, g1_w, g1_b)?;
    let m1r = relu(&m1);
    let m2 = crate::tensor::linear_forward(&m1r, g2_w, g2_b)?;
    edge_rows_sum_by_dst(&m2, edges)
}

/// Neighbour-sum linear map without its batch norm, callable in
/// isolation: `out[v] = (Σ over in-edges (u, v) of x_u) @ w + b`. The
/// node's own feature participates only through its self-loop.
pub fn sage_aggregate<T: Real>(
    x: &Matrix<T>,
    edges: &EdgeSet,
    w: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<Matrix<T>> {
    let summed = agg_src_to_dst(x, edges)?;
    crate::tensor::linear_forward(&summed, w, b)
}

enum BnPass<'c, T> {
    Train(&'c mut Vec<(BnCache<T>, Matrix<T>)>),
    Eval,
}

/// One stream up to its scalar head. In train mode the batch-norm caches
/// and pre-ReLU outputs are pushed onto the scratch vector in call order
/// (conv BN first, shared BN second).
#[allow(clippy::too_many_arguments)]
fn stream_forward<T: Real>(
    stream: &mut Stream<T>,
    shared: &mut SharedLayer<T>,
    fused: &Matrix<T>,
    edges: &EdgeSet,
    pass: &mut BnPass<'_, T>,
) -> Result<(Vec<T>, Option<StreamCachePartial<T>>)> {
    // Edge convolution.
    let m1 = edge_mlp_hidden(fused, edges, &stream.conv.g1.w.value, &stream.conv.g1.b.value)?;
    let m1r = relu(&m1);
    let m2 = crate::tensor::linear_forward(&m1r, &stream.conv.g2.w.value, &stream.conv.g2.b.value)?;
    let agg1 = edge_rows_sum_by_dst(&m2, edges)?;
    let bn1_out = match pass {
        BnPass::Train(scratch) => {
            let (out, cache) = stream.conv.bn.forward_train_ext(&agg1)?;
            scratch.push((cache, out.clone()));
            out
        }
        BnPass::Eval => stream.conv.bn.forward_eval(&agg1)?,
    };
    let h1 = relu(&bn1_out);

    // Weight-shared middle layer.
    let n1 = agg_src_to_dst(&h1, edges)?;
    let (s2, incept) = match shared {
        SharedLayer::Sage { lin, .. } => (lin.forward(&n1)?, None),
        SharedLayer::Inception { branches, proj, .. } => {
            let mut parts: Vec<Matrix<T>> = Vec::with_capacity(branches.len() + 1);
            for b in branches.iter() {
                parts.push(b.forward(&n1)?);
            }
            let (pooled, argmax) = maxpool_in_neighbors(&h1, edges)?;
            parts.push(pooled);
            let refs: Vec<&Matrix<T>> = parts.iter().collect();
            let cat = Matrix::concat_cols(&refs);
            (proj.forward(&cat)?, Some((cat, argmax)))
        }
    };
    let bn2_out = match pass {
        BnPass::Train(scratch) => {
            let (out, cache) = match shared {
                SharedLayer::Sage { bn, .. } | SharedLayer::Inception { bn, .. } => {
                    bn.forward_train_ext(&s2)?
                }
            };
            scratch.push((cache, out.clone()));
            out
        }
        BnPass::Eval => match shared {
            SharedLayer::Sage { bn, .. } | SharedLayer::Inception { bn, .. } => {
                bn.forward_eval(&s2)?
            }
        },
    };
    let h2 = relu(&bn2_out);

    // Aggregate-to-scalar stream head.
    let n2 = agg_src_to_dst(&h2, edges)?;
    let z = stream.head.forward(&n2)?;
    let logits: Vec<T> = (0..z.rows()).map(|r| z[(r, 0)]).collect();

    let partial = match pass {
        BnPass::Train(_) => Some(StreamCachePartial { m1, m1r, n1, incept, n2 }),
        BnPass::Eval => None,
    };
    Ok((logits, partial))
}

/// Stream intermediates other than the BN caches (those arrive via the
/// scratch vector, in call order).
struct StreamCachePartial<T> {
    m1: Matrix<T>,
    m1r: Matrix<T>,
    n1: Matrix<T>,
    incept: Option<(Matrix<T>, Vec<u32>)>,
    n2: Matrix<T>,
}

/// Training-mode forward pass. Returns per-node probabilities and the
/// backward cache. Batch norms use batch statistics and update running
/// statistics; single-node batches are rejected as degenerate.
pub fn forward_train<T: Real>(
    params: &mut SpellParams<T>,
    batch: &NodeBatch<T>,
    graph: &GraphView<'_>,
) -> Result<(Vec<T>, SpellCache<T>)> {
    batch.validate(&params.config)?;
    graph.validate(batch.n())?;
    let n = batch.n();

    // Fusion front-end.
    let (visual_cat, spatial_in) = if params.config.use_spatial {
        let sp = params
            .spatial_proj
            .as_ref()
            .expect("use_spatial set but l04 missing")
            .forward(&batch.spatial)?;
        (Matrix::concat_cols(&[&batch.visual, &sp]), Some(batch.spatial.clone()))
    } else {
        (batch.visual.clone(), None)
    };
    let v_lin = params.visual.forward(&visual_cat)?;
    let (v_bn_out, v_bn_cache) = params.visual_bn.forward_train_ext(&v_lin)?;
    let v_act = relu(&v_bn_out);
    let a_lin = params.audio.forward(&batch.audio)?;
    let (a_bn_out, a_bn_cache) = params.audio_bn.forward_train_ext(&a_lin)?;
    let a_act = relu(&a_bn_out);
    let fused = Matrix::add(&v_act, &a_act)?;

    let mut logits = vec![T::zero(); n];
    let head_cache = match &mut params.head {
        Head::PerNode(lin) => {
            let z = lin.forward(&fused)?;
            for (l, r) in logits.iter_mut().zip(0..n) {
                *l = z[(r, 0)];
            }
            HeadCache::PerNode
        }
        Head::Graph(gh) => {
            let mut caches = Vec::with_capacity(gh.streams.len());
            for i in 0..gh.streams.len() {
                let variant = gh.streams[i].variant;
                let edges = graph.edges(variant);
                let mut scratch: Vec<(BnCache<T>, Matrix<T>)> = Vec::with_capacity(2);
                let (z, partial) = stream_forward(
                    &mut gh.streams[i],
                    &mut gh.shared,
                    &fused,
                    edges,
                    &mut BnPass::Train(&mut scratch),
                )?;
                for (l, zi) in logits.iter_mut().zip(z) {
                    *l = *l + zi;
                }
                let partial = partial.expect("train pass yields a partial cache");
                let (bn2_cache, bn2_out) = scratch.pop().expect("shared BN cache");
                let (bn1_cache, bn1_out) = scratch.pop().expect("conv BN cache");
                caches.push(StreamCache {
                    edge_count: edges.len(),
                    m1: partial.m1,
                    m1r: partial.m1r,
                    bn1_cache,
                    bn1_out,
                    n1: partial.n1,
                    incept: partial.incept,
                    bn2_cache,
                    bn2_out,
                    n2: partial.n2,
                });
            }
            HeadCache::Graph(caches)
        }
    };

    let probs = sigmoid_slice(&logits);
    let cache = SpellCache {
        consumed: false,
        spatial_in,
        visual_cat,
        audio_in: batch.audio.clone(),
        v_bn_cache,
        v_bn_out,
        a_bn_cache,
        a_bn_out,
        fused,
        head: head_cache,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Inference-mode forward pass; pure in the parameters.
pub fn forward_eval<T: Real>(
    params: &SpellParams<T>,
    batch: &NodeBatch<T>,
    graph: &GraphView<'_>,
) -> Result<Vec<T>> {
    Ok(sigmoid_slice(&eval_logits(params, batch, graph)?.0))
}

/// Per-stream logit decomposition (eval mode). The full model's logits
/// are exactly the element-wise sum of the returned per-stream vectors;
/// for the no-graph head the single entry is the baseline logits.
pub fn forward_eval_stream_logits<T: Real>(
    params: &SpellParams<T>,
    batch: &NodeBatch<T>,
    graph: &GraphView<'_>,
) -> Result<Vec<Vec<T>>> {
    Ok(eval_logits(params, batch, graph)?.1)
}

fn eval_logits<T: Real>(
    params: &SpellParams<T>,
    batch: &NodeBatch<T>,
    graph: &GraphView<'_>,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    batch.validate(&params.config)?;
    graph.validate(batch.n())?;
    let n = batch.n();

    let visual_cat = if params.config.use_spatial {
        let sp = params
            .spatial_proj
            .as_ref()
            .expect("use_spatial set but l04 missing")
            .forward(&batch.spatial)?;
        Matrix::concat_cols(&[&batch.visual, &sp])
    } else {
        batch.visual.clone()
    };
    let v_act = relu(&params.visual_bn.forward_eval(&params.visual.forward(&visual_cat)?)?);
    let a_act = relu(&params.audio_bn.forward_eval(&params.audio.forward(&batch.audio)?)?);
    let fused = Matrix::add(&v_act, &a_act)?;

    let mut per_stream: Vec<Vec<T>> = Vec::new();
    match &params.head {
        Head::PerNode(lin) => {
            let z = lin.forward(&fused)?;
            per_stream.push((0..n).map(|r| z[(r, 0)]).collect());
        }
        Head::Graph(gh) => {
            // Eval never mutates, but `stream_forward` is written against
            // mutable layers for the train path; clone the cheap handles.
            for stream in &gh.streams {
                let edges = graph.edges(stream.variant);
                let mut s = stream.clone();
                let mut sh = gh.shared.clone();
                let (z, _) = stream_forward(&mut s, &mut sh, &fused, edges, &mut BnPass::Eval)?;
                per_stream.push(z);
            }
        }
    }
    let mut logits = vec![T::zero(); n];
    for z in &per_stream {
        for (l, &zi) in logits.iter_mut().zip(z) {
            *l = *l + zi;
        }
    }
    Ok((logits, per_stream))
}

/// Backward pass. `grad_prob[i]` is the loss derivative with respect to
/// the i-th output probability; gradients accumulate into the parameter
/// tensors. `graph` must be the same edge sets used in the forward pass
/// (checked via node/edge counts). The cache is marked consumed: a second
/// call is a state error.
pub fn backward<T: Real>(
    params: &mut SpellParams<T>,
    cache: &mut SpellCache<T>,
    graph: &GraphView<'_>,
    grad_prob: &[T],
) -> Result<()> {
    if cache.consumed {
        return Err(SpellError::BackwardConsumed);
    }
    let n = cache.probs.len();
    if grad_prob.len() != n {
        return Err(SpellError::validation(format!(
            "gradient has {} entries for {n} nodes",
            grad_prob.len()
        )));
    }
    graph.validate(n)?;

    // Through the sigmoid: dL/dz = dL/dp * p * (1 - p).
    let mut dlogit = Matrix::zeros(n, 1);
    for i in 0..n {
        let p = cache.probs[i];
        dlogit[(i, 0)] = grad_prob[i] * p * (T::one() - p);
    }

    let f = params.config.filter_dim;
    let mut d_fused = Matrix::zeros(n, f);

    match (&mut params.head, &mut cache.head) {
        (Head::PerNode(lin), HeadCache::PerNode) => {
            let (dx, dw, db) = linear_grads(&dlogit, &cache.fused, &lin.w.value)?;
            lin.w.grad.add_assign(&dw)?;
            lin.b.grad.add_assign(&db)?;
            d_fused.add_assign(&dx)?;
        }
        (Head::Graph(gh), HeadCache::Graph(stream_caches)) => {
            if gh.streams.len() != stream_caches.len() {
                return Err(SpellError::validation(
                    "cache does not match the model's stream layout",
                ));
            }
            for (i, sc) in stream_caches.iter().enumerate() {
                let variant = gh.streams[i].variant;
                let edges = graph.edges(variant);
                if edges.len() != sc.edge_count {
                    return Err(SpellError::validation(format!(
                        "{} edges changed between forward ({}) and backward ({})",
                        variant.name(),
                        sc.edge_count,
                        edges.len()
                    )));
                }

                // Stream head: z = n2 @ W + b.
                let stream = &mut gh.streams[i];
                let (d_n2, dwh, dbh) = linear_grads(&dlogit, &sc.n2, &stream.head.w.value)?;
                stream.head.w.grad.add_assign(&dwh)?;
                stream.head.b.grad.add_assign(&dbh)?;
                let d_h2 = agg_dst_to_src(&d_n2, edges)?;

                // Shared layer: ReLU, BN, then linear/inception.
                let d_bn2 = relu_backward(&d_h2, &sc.bn2_out);
                let (d_n1, d_h1_extra) = match &mut gh.shared {
                    SharedLayer::Sage { lin, bn } => {
                        let d_s2 = bn.backward_ext(&d_bn2, &sc.bn2_cache)?;
                        let (d_n1, dw, db) = linear_grads(&d_s2, &sc.n1, &lin.w.value)?;
                        lin.w.grad.add_assign(&dw)?;
                        lin.b.grad.add_assign(&db)?;
                        (d_n1, None)
                    }
                    SharedLayer::Inception { branches, proj, bn } => {
                        let d_s2 = bn.backward_ext(&d_bn2, &sc.bn2_cache)?;
                        let (cat, argmax) =
                            sc.incept.as_ref().expect("inception cache for inception layer");
                        let (d_cat, dwp, dbp) = linear_grads(&d_s2, cat, &proj.w.value)?;
                        proj.w.grad.add_assign(&dwp)?;
                        proj.b.grad.add_assign(&dbp)?;
                        let mut d_n1 = Matrix::zeros(n, f);
                        let mut at = 0;
                        for b in branches.iter_mut() {
                            let w = b.d_out();
                            let d_part = d_cat.cols_range(at, at + w);
                            let (d_n1_b, dw, db) = linear_grads(&d_part, &sc.n1, &b.w.value)?;
                            b.w.grad.add_assign(&dw)?;
                            b.b.grad.add_assign(&db)?;
                            d_n1.add_assign(&d_n1_b)?;
                            at += w;
                        }
                        let d_pool = d_cat.cols_range(at, at + f);
                        (d_n1, Some(maxpool_backward(&d_pool, argmax)))
                    }
                };
                let mut d_h1 = agg_dst_to_src(&d_n1, edges)?;
                if let Some(extra) = d_h1_extra {
                    d_h1.add_assign(&extra)?;
                }

                // Edge convolution.
                let d_bn1 = relu_backward(&d_h1, &sc.bn1_out);
                let d_agg1 = stream.conv.bn.backward_ext(&d_bn1, &sc.bn1_cache)?;
                let d_m2 = gather_by_dst(&d_agg1, edges)?;
                let (d_m1r, dw2, db2) = linear_grads(&d_m2, &sc.m1r, &stream.conv.g2.w.value)?;
                stream.conv.g2.w.grad.add_assign(&dw2)?;
                stream.conv.g2.b.grad.add_assign(&db2)?;
                let d_m1 = relu_backward(&d_m1r, &sc.m1);

                // First edge-MLP layer, split by destination/source halves.
                let s_dst = edge_rows_sum_by_dst(&d_m1, edges)?;
                let s_src = edge_rows_sum_by_src(&d_m1, edges)?;
                let dw_top = crate::tensor::matmul_at_b(&cache.fused, &s_dst)?;
                let dw_bot = crate::tensor::matmul_at_b(&cache.fused, &s_src)?;
                stream.conv.g1.w.grad.add_into_rows(0, &dw_top);
                stream.conv.g1.w.grad.add_into_rows(f, &dw_bot);
                let mut db1 = Matrix::zeros(1, d_m1.cols());
                for e in 0..d_m1.rows() {
                    for (acc, &g) in db1.row_mut(0).iter_mut().zip(d_m1.row(e)) {
                        *acc = *acc + g;
                    }
                }
                stream.conv.g1.b.grad.add_assign(&db1)?;
                let w_top = stream.conv.g1.w.value.rows_range(0, f);
                let w_bot = stream.conv.g1.w.value.rows_range(f, 2 * f);
                d_fused.add_assign(&crate::tensor::matmul_a_bt(&s_dst, &w_top)?)?;
                d_fused.add_assign(&crate::tensor::matmul_a_bt(&s_src, &w_bot)?)?;
            }
        }
        _ => {
            return Err(SpellError::validation(
                "cache head kind does not match the model head",
            ))
        }
    }

    // Fusion front-end: the addition fans the gradient into both branches.
    let d_v_bn = relu_backward(&d_fused, &cache.v_bn_out);
    let d_v_lin = params.visual_bn.backward_ext(&d_v_bn, &cache.v_bn_cache)?;
    let (d_cat, dw6, db6) = linear_grads(&d_v_lin, &cache.visual_cat, &params.visual.w.value)?;
    params.visual.w.grad.add_assign(&dw6)?;
    params.visual.b.grad.add_assign(&db6)?;
    if params.config.use_spatial {
        let sp_in = cache.spatial_in.as_ref().expect("spatial cache");
        let l04 = params.spatial_proj.as_mut().expect("l04 present");
        let d_sp = d_cat.cols_range(params.config.visual_dim, d_cat.cols());
        let (_, dw4, db4) = linear_grads(&d_sp, sp_in, &l04.w.value)?;
        l04.w.grad.add_assign(&dw4)?;
        l04.b.grad.add_assign(&db4)?;
    }

    let d_a_bn = relu_backward(&d_fused, &cache.a_bn_out);
    let d_a_lin = params.audio_bn.backward_ext(&d_a_bn, &cache.a_bn_cache)?;
    let (_, dw7, db7) = linear_grads(&d_a_lin, &cache.audio_in, &params.audio.w.value)?;
    params.audio.w.grad.add_assign(&dw7)?;
    params.audio.b.grad.add_assign(&db7)?;

    cache.consumed = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FaceBox;
    use crate::tensor::bce_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small config so finite differences over every coordinate stay fast.
    fn small_config() -> ModelConfig {
        ModelConfig {
            visual_dim: 6,
            audio_dim: 5,
            spatial_dim: 4,
            spatial_proj_dim: 3,
            filter_dim: 8,
            edge_mlp_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn boxed(entity: &str, time: f64) -> FaceBox {
        FaceBox {
            video_id: "v".into(),
            time,
            cx: 0.5,
            cy: 0.5,
            w: 0.1,
            h: 0.2,
            entity_id: entity.into(),
            label: Some(0),
            feature_row: usize::MAX,
        }
    }

    fn test_chunk(n: usize) -> Chunk {
        let nodes: Vec<FaceBox> = (0..n)
            .map(|i| boxed(["a", "b"][i % 2], (i / 2) as f64 * 0.3))
            .collect();
        Chunk::build(nodes, 0.7).unwrap()
    }

    fn random_batch(config: &ModelConfig, n: usize, seed: u64) -> NodeBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |cols: usize| {
            Matrix::from_vec(n, cols, (0..n * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let visual = mat(config.visual_dim);
        let audio = mat(config.audio_dim);
        let spatial = mat(config.spatial_dim);
        let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        NodeBatch { visual, audio, spatial, labels: Some(labels) }
    }

    #[test]
    fn fresh_params_on_zero_input_emit_half_probabilities() {
        // Zero biases, zero running means and symmetric weights on a zero
        // input keep every pre-activation at zero, so the sigmoid sits at
        // 0.5 exactly.
        let config = small_config();
        let params: SpellParams<f64> = SpellParams::init(config.clone(), 5).unwrap();
        let chunk = test_chunk(6);
        let batch = NodeBatch {
            visual: Matrix::zeros(6, config.visual_dim),
            audio: Matrix::zeros(6, config.audio_dim),
            spatial: Matrix::zeros(6, config.spatial_dim),
            labels: None,
        };
        let probs = forward_eval(&params, &batch, &GraphView::from_chunk(&chunk)).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-12), "{probs:?}");
    }

    #[test]
    fn probabilities_stay_in_the_open_unit_interval() {
        let config = small_config();
        let params: SpellParams<f64> = SpellParams::init(config.clone(), 6).unwrap();
        let chunk = test_chunk(10);
        let batch = random_batch(&config, 10, 7);
        let probs = forward_eval(&params, &batch, &GraphView::from_chunk(&chunk)).unwrap();
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn logits_decompose_additively_across_streams() {
        let config = small_config();
        let params: SpellParams<f64> = SpellParams::init(config.clone(), 8).unwrap();
        let chunk = test_chunk(9);
        let batch = random_batch(&config, 9, 9);
        let view = GraphView::from_chunk(&chunk);
        let per_stream = forward_eval_stream_logits(&params, &batch, &view).unwrap();
        assert_eq!(per_stream.len(), 3);
        let probs = forward_eval(&params, &batch, &view).unwrap();
        for i in 0..9 {
            let z: f64 = per_stream.iter().map(|s| s[i]).sum();
            assert!((crate::tensor::sigmoid_scalar(z) - probs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_logits_are_isolated_from_other_streams_parameters() {
        let config = small_config();
        let params: SpellParams<f64> = SpellParams::init(config.clone(), 10).unwrap();
        let chunk = test_chunk(8);
        let batch = random_batch(&config, 8, 11);
        let view = GraphView::from_chunk(&chunk);
        let before = forward_eval_stream_logits(&params, &batch, &view).unwrap();

        // Perturb only the backward stream's edge conv.
        let mut poked = params.clone();
        if let Head::Graph(gh) = &mut poked.head {
            let s = gh
                .streams
                .iter_mut()
                .find(|s| s.variant == EdgeVariant::Backward)
                .unwrap();
            s.conv.g2.w.value.data_mut().iter_mut().for_each(|v| *v += 0.05);
        }
        let after = forward_eval_stream_logits(&poked, &batch, &view).unwrap();
        // Forward (index 0) and undirected (index 1) streams unchanged;
        // backward (index 2) moved.
        for i in 0..8 {
            assert_eq!(before[0][i], after[0][i]);
            assert_eq!(before[1][i], after[1][i]);
        }
        assert!(before[2].iter().zip(&after[2]).any(|(a, b)| a != b));
    }

    #[test]
    fn eval_is_permutation_equivariant() {
        let config = small_config();
        let params: SpellParams<f64> = SpellParams::init(config.clone(), 12).unwrap();
        let chunk = test_chunk(11);
        let batch = random_batch(&config, 11, 13);
        let view = GraphView::from_chunk(&chunk);
        let base = forward_eval(&params, &batch, &view).unwrap();

        // Apply a fixed permutation to nodes and remap the edges.
        let n = 11usize;
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let permute_rows = |m: &Matrix<f64>| {
            let mut out = Matrix::zeros(n, m.cols());
            for (i, &pi) in perm.iter().enumerate() {
                out.row_mut(pi).copy_from_slice(m.row(i));
            }
            out
        };
        let permute_edges = |es: &EdgeSet| {
            let edges: Vec<(u32, u32)> = es
                .edges()
                .iter()
                .map(|&(s, d)| (perm[s as usize] as u32, perm[d as usize] as u32))
                .collect();
            EdgeSet::new(es.variant, n as u32, edges).unwrap()
        };
        let pb = NodeBatch {
            visual: permute_rows(&batch.visual),
            audio: permute_rows(&batch.audio),
            spatial: permute_rows(&batch.spatial),
            labels: None,
        };
        let (pf, pu, pbk) =
            (permute_edges(&chunk.forward), permute_edges(&chunk.undirected), permute_edges(&chunk.backward));
        let pview = GraphView { forward: &pf, undirected: &pu, backward: &pbk };
        let permuted = forward_eval(&params, &pb, &pview).unwrap();
        for i in 0..n {
            assert!((permuted[perm[i]] - base[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_node_training_batch_is_degenerate() {
        let config = small_config();
        let mut params: SpellParams<f64> = SpellParams::init(config.clone(), 14).unwrap();
        let chunk = test_chunk(1);
        let batch = random_batch(&config, 1, 15);
        match forward_train(&mut params, &batch, &GraphView::from_chunk(&chunk)) {
            Err(SpellError::DegenerateBatch { rows: 1 }) => {}
            other => panic!("expected DegenerateBatch, got {other:?}"),
        }
    }

    #[test]
    fn second_backward_on_one_cache_is_a_state_error() {
        let config = small_config();
        let mut params: SpellParams<f64> = SpellParams::init(config.clone(), 16).unwrap();
        let chunk = test_chunk(6);
        let batch = random_batch(&config, 6, 17);
        let view = GraphView::from_chunk(&chunk);
        let (probs, mut cache) = forward_train(&mut params, &batch, &view).unwrap();
        let grad = vec![0.1; probs.len()];
        backward(&mut params, &mut cache, &view, &grad).unwrap();
        match backward(&mut params, &mut cache, &view, &grad) {
            Err(SpellError::BackwardConsumed) => {}
            other => panic!("expected BackwardConsumed, got {other:?}"),
        }
    }

    #[test]
    fn zero_upstream_gradient_leaves_all_parameter_gradients_zero() {
        let config = small_config();
        let mut params: SpellParams<f64> = SpellParams::init(config.clone(), 18).unwrap();
        let chunk = test_chunk(7);
        let batch = random_batch(&config, 7, 19);
        let view = GraphView::from_chunk(&chunk);
        let (probs, mut cache) = forward_train(&mut params, &batch, &view).unwrap();
        backward(&mut params, &mut cache, &view, &vec![0.0; probs.len()]).unwrap();
        params.for_each_param(&mut |p| {
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{} non-zero", p.name);
        });
    }

    #[test]
    fn no_spatial_config_ignores_spatial_features() {
        let config = ModelConfig { use_spatial: false, ..small_config() };
        let params: SpellParams<f64> = SpellParams::init(config.clone(), 20).unwrap();
        let chunk = test_chunk(6);
        let a = random_batch(&config, 6, 21);
        let mut b = a.clone();
        b.spatial.data_mut().iter_mut().for_each(|v| *v += 5.0);
        let view = GraphView::from_chunk(&chunk);
        let pa = forward_eval(&params, &a, &view).unwrap();
        let pb = forward_eval(&params, &b, &view).unwrap();
        assert_eq!(pa, pb);
    }

    /// Perturbs the k-th coordinate (in visit order) of the trainable
    /// parameters.
    fn perturb(params: &mut SpellParams<f64>, k: usize, delta: f64) {
        let mut at = 0usize;
        params.for_each_param_mut(&mut |p| {
            let len = p.value.numel();
            if k >= at && k < at + len {
                p.value.data_mut()[k - at] += delta;
            }
            at += len;
        });
    }

    fn gradcheck_config(config: ModelConfig, seed: u64, h: f64, tol: f64) {
        let mut params: SpellParams<f64> = SpellParams::init(config.clone(), seed).unwrap();
        let chunk = test_chunk(10);
        let batch = random_batch(&config, 10, seed + 1);
        let labels = batch.labels.clone().unwrap();
        let view = GraphView::from_chunk(&chunk);

        let (probs, mut cache) = forward_train(&mut params, &batch, &view).unwrap();
        let (_, grad_p) = bce_loss(&probs, &labels).unwrap();
        backward(&mut params, &mut cache, &view, &grad_p).unwrap();
        let mut analytic = Vec::new();
        let mut names = Vec::new();
        params.for_each_param(&mut |p| {
            analytic.extend_from_slice(p.grad.data());
            names.extend(std::iter::repeat_n(p.name.clone(), p.value.numel()));
        });

        let loss_of = |params: &mut SpellParams<f64>| -> f64 {
            let (probs, _) = forward_train(params, &batch, &view).unwrap();
            bce_loss(&probs, &labels).unwrap().0
        };
        let total = analytic.len();
        let mut worst = 0.0f64;
        for k in 0..total {
            perturb(&mut params, k, h);
            let fp = loss_of(&mut params);
            perturb(&mut params, k, -2.0 * h);
            let fm = loss_of(&mut params);
            perturb(&mut params, k, h);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < tol, "{} coord {k}: analytic {a} vs fd {fd} (rel {rel})", names[k]);
            worst = worst.max(rel);
        }
        assert!(worst < tol);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        gradcheck_config(small_config(), 100, 1e-6, 1e-4);
    }

    #[test]
    fn no_graph_baseline_gradients_match_finite_differences() {
        gradcheck_config(ModelConfig { use_graph: false, ..small_config() }, 102, 1e-6, 1e-4);
    }

    #[test]
    fn undirected_only_gradients_match_finite_differences() {
        gradcheck_config(ModelConfig { bidirectional: false, ..small_config() }, 104, 1e-6, 1e-4);
    }

    #[test]
    fn inception_layer_gradients_match_finite_differences() {
        gradcheck_config(ModelConfig { inception_layer2: true, ..small_config() }, 106, 1e-6, 1e-4);
    }

    #[test]
    fn no_spatial_gradients_match_finite_differences() {
        gradcheck_config(ModelConfig { use_spatial: false, ..small_config() }, 108, 1e-6, 1e-4);
    }
}
