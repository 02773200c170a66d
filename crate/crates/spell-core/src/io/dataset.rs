//! Joins a tracks CSV with a feature store into ready-to-run chunks.
//!
//! Boxes and feature rows are matched on `(video_id, time, entity_id)`,
//! with times compared at microsecond resolution (see
//! [`super::time_key`]). Each video's boxes are sorted, split into chunks
//! of at most `chunk_size` nodes, wired into the three edge variants, and
//! gathered into per-chunk feature matrices.

use crate::error::{Result, SpellError};
use crate::graph::{order_and_chunk, Chunk, FaceBox};
use crate::io::features::FeatureStore;
use crate::io::time_key;
use crate::model::{ModelConfig, NodeBatch};
use crate::tensor::Matrix;
use std::collections::HashMap;
use std::path::Path;

/// One chunk's graph plus its node features, ready for the network.
#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub chunk: Chunk,
    pub batch: NodeBatch<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_nodes(&self) -> usize {
        self.items.iter().map(|it| it.chunk.node_count()).sum()
    }

    /// Errors unless every chunk carries labels (training requires them).
    pub fn require_labels(&self) -> Result<()> {
        for it in &self.items {
            if it.batch.labels.is_none() {
                return Err(SpellError::validation(format!(
                    "chunk of video '{}' has unlabeled boxes; training needs labels on every row",
                    it.chunk.video_id
                )));
            }
        }
        Ok(())
    }
}

/// Joins boxes with their feature rows and builds chunked graphs.
///
/// A chunk's `labels` is `Some` only when every box in it is labeled;
/// fully unlabeled chunks get `None`; a mix of labeled and unlabeled boxes
/// in one video is rejected.
pub fn build_dataset(
    boxes: Vec<FaceBox>,
    store: &FeatureStore,
    config: &ModelConfig,
    chunk_size: usize,
    tau: f64,
) -> Result<Dataset> {
    config.validate()?;
    let expected = config.visual_dim + config.audio_dim + config.spatial_dim;
    if store.dim() != expected {
        return Err(SpellError::validation(format!(
            "feature store width {} does not match visual {} + audio {} + spatial {}",
            store.dim(),
            config.visual_dim,
            config.audio_dim,
            config.spatial_dim
        )));
    }

    let mut rows: HashMap<(String, i64, String), usize> = HashMap::with_capacity(store.len());
    for (i, key) in store.keys().iter().enumerate() {
        let k = (key.video_id.clone(), time_key(key.time), key.entity_id.clone());
        if rows.insert(k, i).is_some() {
            return Err(SpellError::validation(format!(
                "feature index lists ({}, {:.6}, {}) twice",
                key.video_id, key.time, key.entity_id
            )));
        }
    }

    // Group boxes per video, preserving first-appearance order of videos so
    // output ordering is a pure function of the input file. Each box picks
    // up its feature row here; duplicates and missing rows fail the join.
    let mut video_order: Vec<String> = Vec::new();
    let mut by_video: HashMap<String, Vec<FaceBox>> = HashMap::new();
    let mut seen: HashMap<(String, i64, String), ()> = HashMap::with_capacity(boxes.len());
    for mut b in boxes {
        let k = (b.video_id.clone(), time_key(b.time), b.entity_id.clone());
        b.feature_row = *rows.get(&k).ok_or_else(|| SpellError::MissingFeature {
            video_id: b.video_id.clone(),
            time: b.time,
            entity_id: b.entity_id.clone(),
        })?;
        if seen.insert(k, ()).is_some() {
            return Err(SpellError::validation(format!(
                "tracks list ({}, {:.6}, {}) twice",
                b.video_id, b.time, b.entity_id
            )));
        }
        by_video.entry(b.video_id.clone()).or_insert_with(|| {
            video_order.push(b.video_id.clone());
            Vec::new()
        });
        by_video.get_mut(&b.video_id).unwrap().push(b);
    }

    let mut items = Vec::new();
    for video_id in &video_order {
        let vid_boxes = by_video.remove(video_id).unwrap();
        let labeled = vid_boxes.iter().filter(|b| b.label.is_some()).count();
        if labeled != 0 && labeled != vid_boxes.len() {
            return Err(SpellError::validation(format!(
                "video '{video_id}' mixes labeled and unlabeled boxes ({labeled} of {})",
                vid_boxes.len()
            )));
        }
        for nodes in order_and_chunk(vid_boxes, chunk_size)? {
            let batch = gather_batch(&nodes, store, config)?;
            let chunk = Chunk::build(nodes, tau)?;
            items.push(DatasetItem { chunk, batch });
        }
    }
    Ok(Dataset { items })
}

/// [`build_dataset`] from files on disk.
pub fn load_dataset(
    tracks_path: &Path,
    features_bin: &Path,
    features_index: &Path,
    config: &ModelConfig,
    chunk_size: usize,
    tau: f64,
) -> Result<Dataset> {
    let boxes = super::tracks::read_tracks(tracks_path)?;
    let store = FeatureStore::read(features_bin, features_index)?;
    build_dataset(boxes, &store, config, chunk_size, tau)
}

fn gather_batch(
    nodes: &[FaceBox],
    store: &FeatureStore,
    config: &ModelConfig,
) -> Result<NodeBatch<f32>> {
    let n = nodes.len();
    let (v, a, s) = (config.visual_dim, config.audio_dim, config.spatial_dim);
    let mut visual = Matrix::<f32>::zeros(n, v);
    let mut audio = Matrix::<f32>::zeros(n, a);
    let mut spatial = Matrix::<f32>::zeros(n, s);
    let mut labels = Vec::with_capacity(n);
    for (i, b) in nodes.iter().enumerate() {
        let feat = store.row(b.feature_row);
        visual.row_mut(i).copy_from_slice(&feat[..v]);
        audio.row_mut(i).copy_from_slice(&feat[v..v + a]);
        spatial.row_mut(i).copy_from_slice(&feat[v + a..v + a + s]);
        if let Some(l) = b.label {
            labels.push(l);
        }
    }
    let labels = if labels.len() == n { Some(labels) } else { None };
    let batch = NodeBatch { visual, audio, spatial, labels };
    batch.validate(config)?;
    Ok(batch)
}
