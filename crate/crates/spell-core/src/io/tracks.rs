//! Face-box track files.
//!
//! CSV with the exact header `video_id,time,cx,cy,w,h,entity_id,label`.
//! `time` is seconds, box coordinates are normalised to `[0, 1]`, `label`
//! is `1` (speaking), `0` (silent) or empty for unlabeled inference data.
//! Writing formats floats with six decimals, which round-trips through
//! [`crate::io::time_key`] joining.

use crate::error::{Result, SpellError};
use crate::graph::FaceBox;
use std::io::Write;
use std::path::Path;

pub const TRACKS_HEADER: &str = "video_id,time,cx,cy,w,h,entity_id,label";

pub fn read_tracks(path: &Path) -> Result<Vec<FaceBox>> {
    let file = std::fs::File::open(path)
        .map_err(|e| SpellError::parse(path.display().to_string(), 0, e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let fname = path.display().to_string();

    let headers = reader
        .headers()
        .map_err(|e| SpellError::parse(&fname, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    let want: Vec<&str> = TRACKS_HEADER.split(',').collect();
    if got != want {
        return Err(SpellError::parse(
            &fname,
            1,
            format!("header is '{}', expected '{TRACKS_HEADER}'", got.join(",")),
        ));
    }

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SpellError::parse(&fname, 0, e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let float = |i: usize, name: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                SpellError::parse(&fname, line, format!("bad {name} value '{}'", field(i)))
            })
        };

        let video_id = field(0).to_string();
        if video_id.is_empty() {
            return Err(SpellError::parse(&fname, line, "empty video_id"));
        }
        let time = float(1, "time")?;
        if !time.is_finite() || time < 0.0 {
            return Err(SpellError::parse(&fname, line, format!("time {time} out of range")));
        }
        let cx = float(2, "cx")?;
        let cy = float(3, "cy")?;
        let w = float(4, "w")?;
        let h = float(5, "h")?;
        for (name, v) in [("cx", cx), ("cy", cy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SpellError::parse(&fname, line, format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("w", w), ("h", h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(SpellError::parse(&fname, line, format!("{name} {v} outside (0, 1]")));
            }
        }
        let entity_id = field(6).to_string();
        if entity_id.is_empty() {
            return Err(SpellError::parse(&fname, line, "empty entity_id"));
        }
        let label = match field(7) {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => {
                return Err(SpellError::parse(
                    &fname,
                    line,
                    format!("label '{other}' must be 0, 1 or empty"),
                ))
            }
        };
        out.push(FaceBox {
            video_id,
            time,
            cx,
            cy,
            w,
            h,
            entity_id,
            label,
            feature_row: usize::MAX,
        });
    }
    if out.is_empty() {
        return Err(SpellError::parse(&fname, 0, "no track rows"));
    }
    Ok(out)
}

/// Writes boxes in their given order. Identifiers must stay plain (no
/// commas/newlines/quotes) so the byte output is reproducible without
/// quoting rules.
pub fn write_tracks(path: &Path, boxes: &[FaceBox]) -> Result<()> {
    for b in boxes {
        for (what, id) in [("video_id", &b.video_id), ("entity_id", &b.entity_id)] {
            if id.contains([',', '\n', '\r', '"']) {
                return Err(SpellError::validation(format!(
                    "{what} '{id}' contains CSV metacharacters"
                )));
            }
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{TRACKS_HEADER}")?;
    for b in boxes {
        let label = match b.label {
            Some(l) => l.to_string(),
            None => String::new(),
        };
        writeln!(
            file,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            b.video_id, b.time, b.cx, b.cy, b.w, b.h, b.entity_id, label
        )?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::time_key;

    fn sample() -> Vec<FaceBox> {
        vec![
            FaceBox {
                video_id: "v0".into(),
                time: 0.0,
                cx: 0.25,
                cy: 0.5,
                w: 0.1,
                h: 0.2,
                entity_id: "alice".into(),
                label: Some(1),
                feature_row: usize::MAX,
            },
            FaceBox {
                video_id: "v0".into(),
                time: 1.0 / 3.0,
                cx: 0.75,
                cy: 0.5,
                w: 0.1,
                h: 0.2,
                entity_id: "bob".into(),
                label: None,
                feature_row: usize::MAX,
            },
        ]
    }

    #[test]
    fn round_trip_preserves_rows_and_time_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.csv");
        let boxes = sample();
        write_tracks(&path, &boxes).unwrap();
        let back = read_tracks(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].video_id, "v0");
        assert_eq!(back[0].label, Some(1));
        assert_eq!(back[1].label, None);
        // Times printed at 6 decimals keep their microsecond join key.
        assert_eq!(time_key(back[1].time), time_key(boxes[1].time));
        assert_eq!(back[1].entity_id, "bob");
    }

    #[test]
    fn malformed_rows_report_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "video_id,time,cx,cy,w,h,entity_id,label\n\
             v0,0.0,0.5,0.5,0.1,0.1,a,1\n\
             v0,not_a_time,0.5,0.5,0.1,0.1,a,0\n",
        )
        .unwrap();
        let err = read_tracks(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "line number missing: {msg}");
        assert!(msg.contains("time"), "field missing: {msg}");
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "video,time\nv0,0\n").unwrap();
        let err = read_tracks(&path).unwrap_err();
        assert!(err.to_string().contains("header"));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "video_id,time,cx,cy,w,h,entity_id,label\nv0,0.0,1.5,0.5,0.1,0.1,a,1\n",
        )
        .unwrap();
        assert!(read_tracks(&path).unwrap_err().to_string().contains("cx"));
        std::fs::write(
            &path,
            "video_id,time,cx,cy,w,h,entity_id,label\nv0,0.0,0.5,0.5,0.0,0.1,a,2\n",
        )
        .unwrap();
        assert!(read_tracks(&path).unwrap_err().to_string().contains('w'));
        std::fs::write(
            &path,
            "video_id,time,cx,cy,w,h,entity_id,label\nv0,0.0,0.5,0.5,0.1,0.1,a,2\n",
        )
        .unwrap();
        assert!(read_tracks(&path).unwrap_err().to_string().contains("label"));
    }
}
