//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, blank lines ignored. Unknown
//! and duplicate keys are rejected with the offending line number. Keys
//! cover the model shape (`visual_dim`, `filter_dim`, `use_graph`,
//! `bidir`, ...) and the training recipe (`lr_max`, `epochs`, `tau`, `n`,
//! ...); anything omitted keeps its default. `bidir` steers the model's
//! stream layout and lives on the model side.

use crate::error::{Result, SpellError};
use crate::model::ModelConfig;
use crate::train::{ModalityMask, TrainConfig};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| SpellError::parse(&name, 0, e.to_string()))?;
    parse_run_config(&text, &name)
}

/// Splits `key = value` lines, stripping `#` comments and blanks.
/// Duplicate keys are rejected; key meaning is up to the caller.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(usize, String, String)>> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            SpellError::parse(source, line_no, format!("expected 'key = value', got '{line}'"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(SpellError::parse(source, line_no, "empty key or value"));
        }
        if pairs.iter().any(|(_, k, _)| k == key) {
            return Err(SpellError::parse(source, line_no, format!("duplicate key '{key}'")));
        }
        pairs.push((line_no, key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

pub fn parse_run_config(text: &str, source: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (line_no, key, value) in parse_pairs(text, source)? {
        apply_pair(&mut cfg, &key, &value)
            .map_err(|msg| SpellError::parse(source, line_no, msg))?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn apply_pair(cfg: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> std::result::Result<T, String> {
        value
            .parse::<T>()
            .map_err(|_| format!("key '{key}' needs {what}, got '{value}'"))
    }
    fn boolean(key: &str, value: &str) -> std::result::Result<bool, String> {
        match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("key '{key}' needs true or false, got '{value}'")),
        }
    }

    let m = &mut cfg.model;
    let t = &mut cfg.train;
    match key {
        "visual_dim" => m.visual_dim = num(key, value, "a positive integer")?,
        "audio_dim" => m.audio_dim = num(key, value, "a positive integer")?,
        "spatial_dim" => m.spatial_dim = num(key, value, "a positive integer")?,
        "spatial_proj_dim" => m.spatial_proj_dim = num(key, value, "a positive integer")?,
        "filter_dim" => m.filter_dim = num(key, value, "a positive integer")?,
        "edge_mlp_hidden" => m.edge_mlp_hidden = num(key, value, "a positive integer")?,
        "use_spatial" => m.use_spatial = boolean(key, value)?,
        "use_graph" => m.use_graph = boolean(key, value)?,
        "bidir" => m.bidirectional = boolean(key, value)?,
        "inception_layer2" => m.inception_layer2 = boolean(key, value)?,

        "lr_max" => t.lr_max = num(key, value, "a number")?,
        "lr_min" => t.lr_min = num(key, value, "a number")?,
        "t_max" => t.t_max = num(key, value, "a positive integer")?,
        "epochs" => t.epochs = num(key, value, "an integer")?,
        "batch_size" => t.batch_size = num(key, value, "a positive integer")?,
        "tau" => t.tau = num(key, value, "a number of seconds")?,
        "n" => t.n = num(key, value, "a positive integer")?,
        "edge_dropout_p" => t.edge_dropout_p = num(key, value, "a probability")?,
        "seed" => t.seed = num(key, value, "an integer")?,
        "modality_mask" => {
            t.modality_mask = ModalityMask::parse(value).map_err(|e| e.to_string())?
        }
        other => return Err(format!("unknown key '{other}'")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_run_config("", "test").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr_max, 2e-4);
        assert_eq!(cfg.train.n, 2000);
        assert!(cfg.model.bidirectional);
    }

    #[test]
    fn full_override_with_comments() {
        let text = "\
# model
filter_dim = 32   # narrower
bidir = false
use_spatial = false
inception_layer2 = false

# training
lr_max = 1e-3
lr_min = 1e-6
t_max = 5
epochs = 40
batch_size = 4
tau = 0.45
n = 256
edge_dropout_p = 0.1
seed = 77
modality_mask = video_only
";
        let cfg = parse_run_config(text, "test").unwrap();
        assert_eq!(cfg.model.filter_dim, 32);
        assert!(!cfg.model.bidirectional);
        assert!(!cfg.model.use_spatial);
        assert_eq!(cfg.train.lr_max, 1e-3);
        assert_eq!(cfg.train.lr_min, 1e-6);
        assert_eq!(cfg.train.t_max, 5);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.tau, 0.45);
        assert_eq!(cfg.train.n, 256);
        assert_eq!(cfg.train.edge_dropout_p, 0.1);
        assert_eq!(cfg.train.seed, 77);
        assert_eq!(cfg.train.modality_mask, ModalityMask::VideoOnly);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_run_config("tau = 0.9\nwat\n", "cfg.txt").unwrap_err().to_string();
        assert!(err.contains("cfg.txt:2"), "{err}");
        let err = parse_run_config("tau = 0.9\ntau = 0.5\n", "c").unwrap_err().to_string();
        assert!(err.contains(":2") && err.contains("duplicate"), "{err}");
        let err = parse_run_config("mystery = 3\n", "c").unwrap_err().to_string();
        assert!(err.contains("unknown key 'mystery'"), "{err}");
        let err = parse_run_config("use_graph = yes\n", "c").unwrap_err().to_string();
        assert!(err.contains("true or false"), "{err}");
        let err = parse_run_config("epochs = many\n", "c").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn cross_field_validation_runs() {
        // Inception needs the graph head.
        let err = parse_run_config("use_graph = false\ninception_layer2 = true\n", "c");
        assert!(err.is_err());
        // lr ordering enforced.
        assert!(parse_run_config("lr_max = 0\n", "c").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "filter_dim = 16\nepochs = 2\n").unwrap();
        let cfg = load_run_config(&path).unwrap();
        assert_eq!(cfg.model.filter_dim, 16);
        assert_eq!(cfg.train.epochs, 2);
        assert!(load_run_config(&dir.path().join("absent.cfg")).is_err());
    }
}
