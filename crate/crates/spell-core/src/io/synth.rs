//! Synthetic conversation scenes with known ground truth.
//!
//! Each scene holds a fixed cast of identities, every one visible in every
//! frame. Feature rows follow the real layout: visual block, audio block,
//! then the four box coordinates. Speaking boxes carry a constant shift of
//! `snr / 4` on the first [`SIGNAL_DIMS`] dimensions of a block over unit
//! normal noise, so the optimal linear separation distance is `snr` (the
//! shift's L2 norm over 16 dimensions).
//!
//! Two label regimes:
//!
//! * [`SynthMode::Separable`] — each identity alternates between speaking
//!   and silent segments with exponential lengths (mean `mean_turn` while
//!   speaking, scaled so the long-run speaking fraction is `speak_prob`),
//!   independently of the other identities, and both blocks carry the
//!   box's own signal. A per-node classifier can solve this; it isolates
//!   plumbing and optimizer behavior from context modeling, while the
//!   turn persistence keeps temporal smoothing benign rather than
//!   misleading.
//! * [`SynthMode::Contextual`] — exactly one identity speaks at a time,
//!   holding the floor for an exponential turn length (`mean_turn`
//!   seconds). Only the visual block carries the (weak) signal; the audio
//!   block is frame-shared noise, identical across a frame's boxes, since
//!   speech is always present in this regime. Single boxes are ambiguous
//!   at low `snr_visual`; aggregating along a track's turn or comparing
//!   frame-mates resolves them, which is what a graph head can express and
//!   a per-node head cannot.

use crate::error::{Result, SpellError};
use crate::graph::FaceBox;
use crate::io::features::{FeatureKey, FeatureStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

/// Dimensions at the front of a block that carry the speaking signal.
pub const SIGNAL_DIMS: usize = 16;

/// Width of the spatial tail of a feature row: cx, cy, w, h.
pub const SPATIAL_DIMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    Separable,
    Contextual,
}

impl SynthMode {
    pub fn name(&self) -> &'static str {
        match self {
            SynthMode::Separable => "separable",
            SynthMode::Contextual => "contextual",
        }
    }

    pub fn parse(s: &str) -> Result<SynthMode> {
        match s {
            "separable" => Ok(SynthMode::Separable),
            "contextual" => Ok(SynthMode::Contextual),
            other => Err(SpellError::validation(format!(
                "unknown synth mode '{other}' (expected 'separable' or 'contextual')"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub mode: SynthMode,
    /// Number of independent scenes (videos).
    pub scenes: usize,
    /// Faces per scene, all present in every frame.
    pub identities: usize,
    /// Scene length in seconds.
    pub duration: f64,
    /// Frames per second; boxes land at `f / fps`.
    pub fps: f64,
    /// Mean speaking-turn length in seconds.
    pub mean_turn: f64,
    /// Long-run fraction of time an identity speaks (separable regime).
    pub speak_prob: f64,
    pub snr_visual: f64,
    pub snr_audio: f64,
    pub visual_dim: usize,
    pub audio_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            mode: SynthMode::Contextual,
            scenes: 8,
            identities: 4,
            duration: 20.0,
            fps: 5.0,
            mean_turn: 2.0,
            speak_prob: 0.3,
            snr_visual: 1.2,
            snr_audio: 1.2,
            visual_dim: 512,
            audio_dim: 512,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.identities == 0 {
            return Err(SpellError::validation("scenes and identities must be positive"));
        }
        if self.mode == SynthMode::Contextual && self.identities < 2 {
            return Err(SpellError::validation(
                "contextual scenes need at least 2 identities to compete for the floor",
            ));
        }
        if !(self.duration > 0.0 && self.fps > 0.0 && self.mean_turn > 0.0) {
            return Err(SpellError::validation(
                "duration, fps and mean_turn must be positive",
            ));
        }
        if !(self.speak_prob > 0.0 && self.speak_prob < 1.0) {
            return Err(SpellError::validation("speak_prob must lie in (0, 1)"));
        }
        if !(self.snr_visual >= 0.0 && self.snr_audio >= 0.0) {
            return Err(SpellError::validation("snr values must be non-negative"));
        }
        if self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(SpellError::validation("visual_dim and audio_dim must be positive"));
        }
        if self.frames() == 0 {
            return Err(SpellError::validation(
                "duration * fps must cover at least one frame",
            ));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    /// Feature row width: visual + audio + box coordinates.
    pub fn feature_dim(&self) -> usize {
        self.visual_dim + self.audio_dim + SPATIAL_DIMS
    }

    pub fn node_count(&self) -> usize {
        self.scenes * self.identities * self.frames()
    }
}

/// Reads a spec from `key = value` text (same shape as the run config:
/// `#` comments, unknown and duplicate keys rejected). Omitted keys keep
/// their defaults.
pub fn parse_synth_spec(text: &str, source: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for (line_no, key, value) in crate::io::config_file::parse_pairs(text, source)? {
        let bad = |what: &str| SpellError::parse(source, line_no, format!("key '{key}' needs {what}, got '{value}'"));
        match key.as_str() {
            "mode" => spec.mode = SynthMode::parse(&value).map_err(|e| SpellError::parse(source, line_no, e.to_string()))?,
            "scenes" => spec.scenes = value.parse().map_err(|_| bad("a positive integer"))?,
            "identities" => spec.identities = value.parse().map_err(|_| bad("a positive integer"))?,
            "duration" => spec.duration = value.parse().map_err(|_| bad("seconds"))?,
            "fps" => spec.fps = value.parse().map_err(|_| bad("frames per second"))?,
            "mean_turn" => spec.mean_turn = value.parse().map_err(|_| bad("seconds"))?,
            "speak_prob" => spec.speak_prob = value.parse().map_err(|_| bad("a probability"))?,
            "snr_visual" => spec.snr_visual = value.parse().map_err(|_| bad("a number"))?,
            "snr_audio" => spec.snr_audio = value.parse().map_err(|_| bad("a number"))?,
            "visual_dim" => spec.visual_dim = value.parse().map_err(|_| bad("a positive integer"))?,
            "audio_dim" => spec.audio_dim = value.parse().map_err(|_| bad("a positive integer"))?,
            other => {
                return Err(SpellError::parse(source, line_no, format!("unknown key '{other}'")))
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Generates labeled boxes and their feature store. Fully determined by
/// `(spec, seed)`; box order is scene-major, then frame, then identity.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(Vec<FaceBox>, FeatureStore)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let turn = Exp::new(1.0 / spec.mean_turn)
        .map_err(|e| SpellError::validation(format!("bad turn distribution: {e}")))?;

    let k = spec.identities;
    let frames = spec.frames();
    let v_amp = spec.snr_visual / 4.0;
    let a_amp = spec.snr_audio / 4.0;
    let v_sig = SIGNAL_DIMS.min(spec.visual_dim);
    let a_sig = SIGNAL_DIMS.min(spec.audio_dim);

    let mut boxes = Vec::with_capacity(spec.node_count());
    let mut store = FeatureStore::new(spec.feature_dim());
    let mut row = vec![0f32; spec.feature_dim()];
    let mut frame_audio = vec![0f64; spec.audio_dim];

    // Mean silent-gap length that makes `speak_prob` the stationary
    // speaking fraction of the separable on/off chain.
    let off_mean = spec.mean_turn * (1.0 - spec.speak_prob) / spec.speak_prob;
    let seg_len = |speaking: bool, rng: &mut ChaCha8Rng| {
        let mean = if speaking { spec.mean_turn } else { off_mean };
        turn.sample(rng) / spec.mean_turn * mean
    };

    for scene in 0..spec.scenes {
        let video_id = format!("scene{scene:03}");

        // Floor-holder per frame (contextual regime only).
        let mut active = rng.random_range(0..k);
        let mut turn_end = turn.sample(&mut rng);
        // Independent per-identity on/off chains (separable regime only).
        let mut talk_state = vec![false; k];
        let mut talk_end = vec![0f64; k];
        if spec.mode == SynthMode::Separable {
            for i in 0..k {
                talk_state[i] = rng.random::<f64>() < spec.speak_prob;
                talk_end[i] = seg_len(talk_state[i], &mut rng);
            }
        }
        for frame in 0..frames {
            let t = frame as f64 / spec.fps;
            if spec.mode == SynthMode::Contextual {
                while t >= turn_end {
                    let next = rng.random_range(0..k - 1);
                    active = if next >= active { next + 1 } else { next };
                    turn_end += turn.sample(&mut rng);
                }
                for x in frame_audio.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }

            for identity in 0..k {
                let speaking = match spec.mode {
                    SynthMode::Contextual => identity == active,
                    SynthMode::Separable => {
                        while t >= talk_end[identity] {
                            talk_state[identity] = !talk_state[identity];
                            talk_end[identity] += seg_len(talk_state[identity], &mut rng);
                        }
                        talk_state[identity]
                    }
                };
                let home_cx = (identity + 1) as f64 / (k + 1) as f64;
                let jitter = |rng: &mut ChaCha8Rng| (rng.random::<f64>() - 0.5) * 0.02;
                let cx = home_cx + jitter(&mut rng);
                let cy = 0.5 + jitter(&mut rng);
                let w = 0.12 + jitter(&mut rng);
                let h = 0.18 + jitter(&mut rng);

                let (vis, rest) = row.split_at_mut(spec.visual_dim);
                let (aud, spat) = rest.split_at_mut(spec.audio_dim);
                for x in vis.iter_mut() {
                    *x = normal.sample(&mut rng) as f32;
                }
                if speaking {
                    for x in vis[..v_sig].iter_mut() {
                        *x += v_amp as f32;
                    }
                }
                match spec.mode {
                    SynthMode::Contextual => {
                        for (x, &src) in aud.iter_mut().zip(&frame_audio) {
                            *x = src as f32;
                        }
                    }
                    SynthMode::Separable => {
                        for x in aud.iter_mut() {
                            *x = normal.sample(&mut rng) as f32;
                        }
                        if speaking {
                            for x in aud[..a_sig].iter_mut() {
                                *x += a_amp as f32;
                            }
                        }
                    }
                }
                spat.copy_from_slice(&[cx as f32, cy as f32, w as f32, h as f32]);

                let entity_id = format!("spk{identity:02}");
                let feature_row = store.len();
                store.push(
                    FeatureKey {
                        video_id: video_id.clone(),
                        time: t,
                        entity_id: entity_id.clone(),
                    },
                    &row,
                )?;
                boxes.push(FaceBox {
                    video_id: video_id.clone(),
                    time: t,
                    cx,
                    cy,
                    w,
                    h,
                    entity_id,
                    label: Some(speaking as u8),
                    feature_row,
                });
            }
        }
    }
    Ok((boxes, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::average_precision;

    fn small_spec(mode: SynthMode) -> SynthSpec {
        SynthSpec {
            mode,
            scenes: 3,
            identities: 4,
            duration: 10.0,
            fps: 5.0,
            visual_dim: 24,
            audio_dim: 20,
            ..SynthSpec::default()
        }
    }

    /// Mean of the signal-carrying dimensions of the visual block.
    fn visual_template_score(store: &FeatureStore, i: usize, visual_dim: usize) -> f64 {
        let n = SIGNAL_DIMS.min(visual_dim);
        store.row(i)[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64
    }

    #[test]
    fn deterministic_and_well_shaped() {
        let spec = small_spec(SynthMode::Separable);
        let (boxes, store) = generate(&spec, 7).unwrap();
        assert_eq!(boxes.len(), 3 * 4 * 50);
        assert_eq!(store.len(), boxes.len());
        assert_eq!(store.dim(), 24 + 20 + 4);

        let (boxes2, store2) = generate(&spec, 7).unwrap();
        assert_eq!(boxes, boxes2);
        for i in 0..store.len() {
            assert_eq!(store.row(i), store2.row(i));
            assert_eq!(store.keys()[i].video_id, boxes[i].video_id);
            assert_eq!(store.keys()[i].entity_id, boxes[i].entity_id);
        }

        let (boxes3, _) = generate(&spec, 8).unwrap();
        assert_ne!(boxes, boxes3);
    }

    #[test]
    fn contextual_has_exactly_one_speaker_per_frame() {
        let spec = small_spec(SynthMode::Contextual);
        let (boxes, _) = generate(&spec, 3).unwrap();
        for frame in boxes.chunks(spec.identities) {
            let t = frame[0].time;
            assert!(frame.iter().all(|b| b.time == t));
            let speakers: u32 = frame.iter().map(|b| b.label.unwrap() as u32).sum();
            assert_eq!(speakers, 1, "frame at t={t}");
        }
    }

    #[test]
    fn contextual_audio_is_frame_shared() {
        let spec = small_spec(SynthMode::Contextual);
        let (_, store) = generate(&spec, 11).unwrap();
        let (v, a) = (spec.visual_dim, spec.audio_dim);
        for f in 0..(store.len() / spec.identities) {
            let base = f * spec.identities;
            let first = &store.row(base)[v..v + a];
            for i in 1..spec.identities {
                assert_eq!(&store.row(base + i)[v..v + a], first);
            }
        }
    }

    #[test]
    fn separable_rate_tracks_speak_prob() {
        let spec = SynthSpec {
            scenes: 5,
            duration: 20.0,
            ..small_spec(SynthMode::Separable)
        };
        let (boxes, _) = generate(&spec, 5).unwrap();
        let rate = boxes.iter().filter(|b| b.label == Some(1)).count() as f64
            / boxes.len() as f64;
        assert!((rate - spec.speak_prob).abs() < 0.04, "rate {rate}");
    }

    #[test]
    fn separable_is_linearly_separable_at_high_snr() {
        let spec = SynthSpec { snr_visual: 4.0, ..small_spec(SynthMode::Separable) };
        let (boxes, store) = generate(&spec, 13).unwrap();
        let scores: Vec<f64> = (0..store.len())
            .map(|i| visual_template_score(&store, i, spec.visual_dim))
            .collect();
        let labels: Vec<u8> = boxes.iter().map(|b| b.label.unwrap()).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!(ap >= 0.98, "template AP {ap}");
    }

    #[test]
    fn separable_labels_persist_across_frames() {
        // Speaking comes in turns: a box's label should usually agree with
        // the same identity's label one frame later.
        let spec = SynthSpec { duration: 20.0, ..small_spec(SynthMode::Separable) };
        let (boxes, _) = generate(&spec, 19).unwrap();
        let k = spec.identities;
        let mut same = 0usize;
        let mut total = 0usize;
        for w in boxes.chunks(k).collect::<Vec<_>>().windows(2) {
            for (a, b) in w[0].iter().zip(w[1]) {
                assert_eq!(a.entity_id, b.entity_id);
                same += (a.label == b.label) as usize;
                total += 1;
            }
        }
        let agreement = same as f64 / total as f64;
        assert!(agreement > 0.85, "frame-to-frame label agreement {agreement}");
    }

    #[test]
    fn contextual_single_box_is_ambiguous_but_frame_context_resolves() {
        let spec = SynthSpec { snr_visual: 1.2, ..small_spec(SynthMode::Contextual) };
        let (boxes, store) = generate(&spec, 17).unwrap();
        let scores: Vec<f64> = (0..store.len())
            .map(|i| visual_template_score(&store, i, spec.visual_dim))
            .collect();
        let labels: Vec<u8> = boxes.iter().map(|b| b.label.unwrap()).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!(ap < 0.92, "per-box template should stay ambiguous, AP {ap}");

        // Picking the best-scoring box per frame beats chance (1/4) by a lot.
        let mut hits = 0;
        let mut frames = 0;
        for (frame_boxes, frame_scores) in boxes
            .chunks(spec.identities)
            .zip(scores.chunks(spec.identities))
        {
            let best = frame_scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            frames += 1;
            hits += (frame_boxes[best].label == Some(1)) as usize;
        }
        let acc = hits as f64 / frames as f64;
        assert!(acc > 0.55, "frame argmax accuracy {acc}");
    }

    #[test]
    fn spec_file_parses_and_rejects_unknowns() {
        let spec = parse_synth_spec(
            "mode = separable\nscenes = 2 # two\nsnr_visual = 3.5\nfps = 10\n",
            "spec",
        )
        .unwrap();
        assert_eq!(spec.mode, SynthMode::Separable);
        assert_eq!(spec.scenes, 2);
        assert_eq!(spec.snr_visual, 3.5);
        assert_eq!(spec.fps, 10.0);
        assert_eq!(spec.identities, SynthSpec::default().identities);

        let err = parse_synth_spec("volume = 11\n", "spec").unwrap_err().to_string();
        assert!(err.contains("unknown key 'volume'"), "{err}");
        let err = parse_synth_spec("mode = chaotic\n", "spec").unwrap_err().to_string();
        assert!(err.contains("chaotic"), "{err}");
        assert!(parse_synth_spec("scenes = 0\n", "spec").is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec(SynthMode::Contextual);
        spec.identities = 1;
        assert!(generate(&spec, 0).is_err());
        let mut spec = small_spec(SynthMode::Separable);
        spec.fps = 0.0;
        assert!(generate(&spec, 0).is_err());
        let mut spec = small_spec(SynthMode::Separable);
        spec.speak_prob = 1.5;
        assert!(generate(&spec, 0).is_err());
    }
}
