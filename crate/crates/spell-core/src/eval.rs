//! Scoring and evaluation: average precision, batch inference, and the
//! ablation/sweep drivers built on top of them.

use crate::error::{Result, SpellError};
use crate::graph::{EdgeVariant, FaceBox};
use crate::io::dataset::{build_dataset, Dataset};
use crate::io::features::FeatureStore;
use crate::model::{forward_eval, GraphView, ModelConfig, SpellParams};
use crate::train::{apply_modality_mask, fit, ModalityMask, TrainConfig};

/// Area under the precision-recall curve (step interpolation).
///
/// Scores are swept from high to low; equal scores enter together, so the
/// result is independent of input order. With `P` positives and cumulative
/// true/false positives `tp`, `fp` after each distinct score,
/// `AP = sum over thresholds of (delta recall) * precision`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SpellError::validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(SpellError::InvalidLabel { index: i, value: l });
        }
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(SpellError::validation(format!("non-finite score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(SpellError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before updating the curve.
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// One scored box, in dataset order.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub video_id: String,
    pub time: f64,
    pub entity_id: String,
    pub score: f64,
    pub label: Option<u8>,
}

/// Runs eval-mode inference over every chunk, preserving dataset order.
pub fn predict(params: &SpellParams<f32>, dataset: &Dataset) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(dataset.total_nodes());
    for item in &dataset.items {
        let graph = GraphView::from_chunk(&item.chunk);
        let probs = forward_eval(params, &item.batch, &graph)?;
        for (i, node) in item.chunk.nodes.iter().enumerate() {
            out.push(Prediction {
                video_id: node.video_id.clone(),
                time: node.time,
                entity_id: node.entity_id.clone(),
                score: probs[i] as f64,
                label: node.label,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Global AP over every labeled box.
    pub ap: f64,
    pub node_count: usize,
    pub positive_count: usize,
    /// Per-video AP in first-appearance order; `None` where a video has
    /// no positive labels (the metric is undefined there). Diagnostics
    /// only — the headline number is the global AP.
    pub per_video: Vec<(String, Option<f64>)>,
}

/// Inference plus AP over the labeled boxes. Errors if none are labeled.
pub fn evaluate(params: &SpellParams<f32>, dataset: &Dataset) -> Result<EvalReport> {
    let predictions = predict(params, dataset)?;
    report_from_predictions(&predictions)
}

/// AP over the labeled subset of a prediction list.
pub fn report_from_predictions(predictions: &[Prediction]) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut video_order: Vec<String> = Vec::new();
    let mut by_video: std::collections::HashMap<String, (Vec<f64>, Vec<u8>)> =
        std::collections::HashMap::new();
    for p in predictions {
        if let Some(l) = p.label {
            scores.push(p.score);
            labels.push(l);
            if !by_video.contains_key(&p.video_id) {
                video_order.push(p.video_id.clone());
            }
            let slot = by_video.entry(p.video_id.clone()).or_default();
            slot.0.push(p.score);
            slot.1.push(l);
        }
    }
    if scores.is_empty() {
        return Err(SpellError::validation(
            "no labeled boxes to evaluate; provide ground-truth labels",
        ));
    }
    let ap = average_precision(&scores, &labels)?;
    let positive_count = labels.iter().filter(|&&l| l == 1).count();
    let mut per_video = Vec::with_capacity(video_order.len());
    for video in video_order {
        let (s, l) = &by_video[&video];
        let video_ap = if l.contains(&1) { Some(average_precision(s, l)?) } else { None };
        per_video.push((video, video_ap));
    }
    Ok(EvalReport { ap, node_count: scores.len(), positive_count, per_video })
}

/// One trained-and-scored configuration of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_graph: bool,
    pub bidirectional: bool,
    pub edge_dropout: bool,
    pub use_spatial: bool,
    pub modality: ModalityMask,
    pub ap: f64,
}

/// Trains and scores the module-ablation rows (per-node baseline up to the
/// full model) followed by the modality rows, every row from the same seed
/// and recipe. Structure flags are toggled on `base_model`; widths and the
/// datasets stay fixed.
pub fn run_ablation(
    train_set: &Dataset,
    eval_set: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    // (name, use_graph, bidirectional, edge_dropout, use_spatial, modality)
    let rows: [(&'static str, bool, bool, bool, bool, ModalityMask); 8] = [
        ("no-graph", false, false, false, false, ModalityMask::None),
        ("undirected", true, false, false, false, ModalityMask::None),
        ("bidirectional", true, true, false, false, ModalityMask::None),
        ("+dropout", true, true, true, false, ModalityMask::None),
        ("+spatial", true, true, true, true, ModalityMask::None),
        ("audio-only", true, true, true, true, ModalityMask::AudioOnly),
        ("video-only", true, true, true, true, ModalityMask::VideoOnly),
        ("both", true, true, true, true, ModalityMask::None),
    ];
    let mut report = Vec::with_capacity(rows.len());
    for (name, use_graph, bidirectional, dropout, use_spatial, modality) in rows {
        let model = ModelConfig {
            use_graph,
            bidirectional,
            use_spatial,
            // Inception needs the graph head; drop it on the baseline row.
            inception_layer2: base_model.inception_layer2 && use_graph,
            ..base_model.clone()
        };
        let train_cfg = TrainConfig {
            edge_dropout_p: if dropout { base_train.edge_dropout_p } else { 0.0 },
            modality_mask: modality,
            ..base_train.clone()
        };
        let ap = train_and_score(model, &train_cfg, train_set, eval_set)?;
        report.push(AblationRow {
            name,
            use_graph,
            bidirectional,
            edge_dropout: dropout,
            use_spatial,
            modality,
            ap,
        });
    }
    Ok(report)
}

fn train_and_score(
    model: ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<f64> {
    let mut params = SpellParams::<f32>::init(model, train_cfg.seed)?;
    fit(&mut params, train_set, train_cfg, None)?;
    let masked_eval;
    let eval_ref = match train_cfg.modality_mask {
        ModalityMask::None => eval_set,
        mask => {
            let mut copy = eval_set.clone();
            apply_modality_mask(&mut copy, mask);
            masked_eval = copy;
            &masked_eval
        }
    };
    Ok(evaluate(&params, eval_ref)?.ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    N,
    FilterDim,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::N => "n",
            SweepAxis::FilterDim => "filter_dim",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "tau" => Ok(SweepAxis::Tau),
            "n" => Ok(SweepAxis::N),
            "filter_dim" => Ok(SweepAxis::FilterDim),
            other => Err(SpellError::validation(format!(
                "unknown sweep axis '{other}' (expected tau, n or filter_dim)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub ap: f64,
    /// Undirected edges (self-loops included) over the training chunks.
    pub edge_count: usize,
    pub param_count: usize,
}

/// One train+evaluate per axis value, everything else held fixed. `tau`
/// and `n` rebuild the graphs, so the raw boxes and stores are taken
/// rather than prebuilt datasets.
pub fn run_sweep(
    train_boxes: &[FaceBox],
    train_store: &FeatureStore,
    eval_boxes: &[FaceBox],
    eval_store: &FeatureStore,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(SpellError::validation("sweep needs at least one value"));
    }
    let as_count = |v: f64, what: &str| -> Result<usize> {
        if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
            return Err(SpellError::validation(format!(
                "{what} sweep values must be positive integers, got {v}"
            )));
        }
        Ok(v as usize)
    };
    let mut curve = Vec::with_capacity(values.len());
    for &value in values {
        let mut model = base_model.clone();
        let mut train_cfg = base_train.clone();
        match axis {
            SweepAxis::Tau => {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(SpellError::validation(format!(
                        "tau sweep values must be finite and >= 0, got {value}"
                    )));
                }
                train_cfg.tau = value;
            }
            SweepAxis::N => train_cfg.n = as_count(value, "n")?,
            SweepAxis::FilterDim => model.filter_dim = as_count(value, "filter_dim")?,
        }
        let train_set = build_dataset(
            train_boxes.to_vec(),
            train_store,
            &model,
            train_cfg.n,
            train_cfg.tau,
        )?;
        let eval_set =
            build_dataset(eval_boxes.to_vec(), eval_store, &model, train_cfg.n, train_cfg.tau)?;
        let edge_count = train_set
            .items
            .iter()
            .map(|it| it.chunk.edge_set(EdgeVariant::Undirected).len())
            .sum();
        let param_count = model.param_count();
        let ap = train_and_score(model, &train_cfg, &train_set, &eval_set)?;
        curve.push(SweepPoint { value, ap, edge_count, param_count });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Naive oracle: sweep every distinct score as a threshold, predict
    /// positive at `score >= t`, accumulate (delta recall) * precision.
    fn ap_threshold_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let positives = labels.iter().filter(|&&l| l == 1).count();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0;
            let mut fp = 0;
            for (s, &l) in scores.iter().zip(labels) {
                if *s >= t {
                    if l == 1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        // Positives ranked last: first at precision 1/3, second at 2/4.
        assert!((ap - (0.5 * (1.0 / 3.0) + 0.5 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn all_tied_scores_give_base_rate() {
        let ap = average_precision(&[0.5; 4], &[1, 0, 0, 1]).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(
            average_precision(&[0.5], &[0]).unwrap_err(),
            SpellError::NoPositives
        ));
        assert!(average_precision(&[f64::NAN], &[1]).is_err());
        assert!(matches!(
            average_precision(&[0.5], &[2]).unwrap_err(),
            SpellError::InvalidLabel { index: 0, value: 2 }
        ));
        assert!(average_precision(&[0.5, 0.2], &[1]).is_err());
    }

    #[test]
    fn order_independence() {
        let scores = [0.3, 0.9, 0.9, 0.1, 0.5];
        let labels = [0u8, 1, 0, 1, 1];
        let a = average_precision(&scores, &labels).unwrap();
        let mut idx: Vec<usize> = (0..5).collect();
        idx.reverse();
        let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        assert_eq!(a, average_precision(&s2, &l2).unwrap());
    }

    proptest! {
        #[test]
        fn matches_threshold_sweep_oracle(
            raw in proptest::collection::vec((0u8..4, 0u8..2), 1..60),
        ) {
            // Scores from a small alphabet to force plenty of ties.
            let scores: Vec<f64> = raw.iter().map(|&(q, _)| q as f64 * 0.25).collect();
            let labels: Vec<u8> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l == 1));
            let got = average_precision(&scores, &labels).unwrap();
            let want = ap_threshold_oracle(&scores, &labels);
            prop_assert!((got - want).abs() < 1e-12, "got {got} want {want}");
        }

        #[test]
        fn invariant_under_monotone_score_maps(
            raw in proptest::collection::vec((0u8..6, 0u8..2), 2..40),
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(q, _)| q as f64 * 0.2).collect();
            let labels: Vec<u8> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l == 1));
            let base = average_precision(&scores, &labels).unwrap();
            // Strictly increasing maps preserve order and tie groups.
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| 0.5 * s - 3.0).collect();
            prop_assert_eq!(base, average_precision(&cubed, &labels).unwrap());
            prop_assert_eq!(base, average_precision(&shifted, &labels).unwrap());
        }
    }

    #[test]
    fn random_scores_on_balanced_labels_sit_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 0.5).abs() < 0.03, "null AP {ap}");
    }

    #[test]
    fn per_video_breakdown_and_order_invariance() {
        use crate::io::dataset::build_dataset;
        use crate::io::synth::{generate, SynthMode, SynthSpec};
        use crate::model::ModelConfig;

        let cfg = ModelConfig {
            visual_dim: 12,
            audio_dim: 10,
            spatial_proj_dim: 3,
            filter_dim: 6,
            edge_mlp_hidden: 6,
            ..ModelConfig::default()
        };
        let spec = SynthSpec {
            mode: SynthMode::Separable,
            scenes: 3,
            identities: 2,
            duration: 4.0,
            visual_dim: 12,
            audio_dim: 10,
            ..SynthSpec::default()
        };
        let (boxes, store) = generate(&spec, 21).unwrap();
        let ds = build_dataset(boxes, &store, &cfg, 12, 0.9).unwrap();
        let params = SpellParams::<f32>::init(cfg, 5).unwrap();

        let report = evaluate(&params, &ds).unwrap();
        assert_eq!(report.per_video.len(), 3);
        assert_eq!(report.per_video[0].0, "scene000");
        assert_eq!(report.node_count, ds.total_nodes());

        // Chunk processing order does not change the metric.
        let mut reversed = ds.clone();
        reversed.items.reverse();
        let report2 = evaluate(&params, &reversed).unwrap();
        assert_eq!(report.ap, report2.ap);

        // Eval is deterministic run to run.
        let report3 = evaluate(&params, &ds).unwrap();
        assert_eq!(report.ap, report3.ap);
    }

    #[test]
    fn ablation_and_sweep_smoke() {
        use crate::io::dataset::build_dataset;
        use crate::io::synth::{generate, SynthMode, SynthSpec};
        use crate::model::ModelConfig;
        use crate::train::TrainConfig;

        let model = ModelConfig {
            visual_dim: 10,
            audio_dim: 8,
            spatial_proj_dim: 3,
            filter_dim: 5,
            edge_mlp_hidden: 5,
            ..ModelConfig::default()
        };
        let spec = SynthSpec {
            mode: SynthMode::Separable,
            scenes: 2,
            identities: 2,
            duration: 3.0,
            visual_dim: 10,
            audio_dim: 8,
            ..SynthSpec::default()
        };
        let (boxes, store) = generate(&spec, 31).unwrap();
        let (eval_boxes, eval_store) = generate(&spec, 32).unwrap();
        let train_cfg = TrainConfig {
            lr_max: 1e-3,
            epochs: 2,
            batch_size: 4,
            n: 15,
            seed: 1,
            ..TrainConfig::default()
        };

        let train_ds = build_dataset(boxes.clone(), &store, &model, 15, 0.9).unwrap();
        let eval_ds = build_dataset(eval_boxes.clone(), &eval_store, &model, 15, 0.9).unwrap();
        let rows = run_ablation(&train_ds, &eval_ds, &model, &train_cfg).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].name, "no-graph");
        assert!(!rows[0].use_graph);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.ap)));
        // Same flags + same seed give the same score.
        let full = rows.iter().find(|r| r.name == "+spatial").unwrap();
        let both = rows.iter().find(|r| r.name == "both").unwrap();
        assert_eq!(full.ap, both.ap);

        let curve = run_sweep(
            &boxes,
            &store,
            &eval_boxes,
            &eval_store,
            &model,
            &train_cfg,
            SweepAxis::Tau,
            &[0.0, 0.4, 1.2],
        )
        .unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve[0].edge_count <= curve[1].edge_count);
        assert!(curve[1].edge_count <= curve[2].edge_count);
        assert!(curve.windows(2).all(|w| w[0].param_count == w[1].param_count));

        let dims = run_sweep(
            &boxes,
            &store,
            &eval_boxes,
            &eval_store,
            &model,
            &train_cfg,
            SweepAxis::FilterDim,
            &[4.0, 6.0],
        )
        .unwrap();
        assert!(dims[0].param_count < dims[1].param_count);
        assert!(run_sweep(
            &boxes,
            &store,
            &eval_boxes,
            &eval_store,
            &model,
            &train_cfg,
            SweepAxis::FilterDim,
            &[2.5],
        )
        .is_err());
    }
}
