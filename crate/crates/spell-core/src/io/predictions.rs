//! Predictions CSV: `video_id,time,entity_id,score`, one row per box.
//!
//! Written by inference, read back by evaluation. Times are printed with
//! six decimals (matching the tracks format) and scores with nine, so a
//! prediction run is byte-for-byte reproducible.

use crate::error::{Result, SpellError};
use crate::eval::Prediction;
use std::io::Write;
use std::path::Path;

pub const PREDICTIONS_HEADER: &str = "video_id,time,entity_id,score";

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{PREDICTIONS_HEADER}")?;
    for p in predictions {
        writeln!(
            file,
            "{},{:.6},{},{:.9}",
            p.video_id, p.time, p.entity_id, p.score
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a predictions file. Labels come back as `None`; joining against a
/// labeled tracks file is the caller's job.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let name = path.display().to_string();
    let file =
        std::fs::File::open(path).map_err(|e| SpellError::parse(&name, 0, e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| SpellError::parse(&name, 1, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.join(",") != PREDICTIONS_HEADER {
        return Err(SpellError::parse(
            &name,
            1,
            format!(
                "header is '{}', expected '{PREDICTIONS_HEADER}'",
                headers.join(",")
            ),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SpellError::parse(&name, 0, e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 4 {
            return Err(SpellError::parse(
                &name,
                line,
                format!("expected 4 fields, got {}", record.len()),
            ));
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let time: f64 = field(1)
            .parse()
            .map_err(|_| SpellError::parse(&name, line, format!("bad time '{}'", field(1))))?;
        let score: f64 = field(3)
            .parse()
            .map_err(|_| SpellError::parse(&name, line, format!("bad score '{}'", field(3))))?;
        if !time.is_finite() || !score.is_finite() {
            return Err(SpellError::parse(&name, line, "non-finite value"));
        }
        out.push(Prediction {
            video_id: field(0).to_string(),
            time,
            entity_id: field(2).to_string(),
            score,
            label: None,
        });
    }
    Ok(out)
}
