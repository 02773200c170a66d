//! Precomputed per-box feature store.
//!
//! Two files travel together:
//!
//! * `features.bin` — magic `SPELLFEAT1`, then little-endian `u32` row
//!   count and feature width, then `rows * width` raw `f32` values in row
//!   order;
//! * `features_index.csv` — header `video_id,time,entity_id,row`, one line
//!   per feature row in row order, keying each row to a face box.
//!
//! A row holds the visual embedding, the audio embedding and the box
//! coordinates back to back; the split widths live in the consumer's model
//! configuration, the store only knows the total width.

use crate::error::{Result, SpellError};
use std::io::{Read, Write};
use std::path::Path;

pub const FEATURES_MAGIC: &[u8; 10] = b"SPELLFEAT1";
pub const INDEX_HEADER: &str = "video_id,time,entity_id,row";

/// Identifies the face box a feature row belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureKey {
    pub video_id: String,
    pub time: f64,
    pub entity_id: String,
}

#[derive(Clone, Debug)]
pub struct FeatureStore {
    dim: usize,
    data: Vec<f32>,
    index: Vec<FeatureKey>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore { dim, data: Vec::new(), index: Vec::new() }
    }

    pub fn push(&mut self, key: FeatureKey, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(SpellError::validation(format!(
                "feature row has {} values, store width is {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        self.index.push(key);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.index
    }

    /// Writes `features.bin` and `features_index.csv`. Output is
    /// byte-deterministic for a given store.
    pub fn write(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
        bin.write_all(FEATURES_MAGIC)?;
        bin.write_all(&(self.len() as u32).to_le_bytes())?;
        bin.write_all(&(self.dim as u32).to_le_bytes())?;
        for &v in &self.data {
            bin.write_all(&v.to_le_bytes())?;
        }
        bin.flush()?;

        let mut idx = std::io::BufWriter::new(std::fs::File::create(index_path)?);
        writeln!(idx, "{INDEX_HEADER}")?;
        for (i, key) in self.index.iter().enumerate() {
            if key.video_id.contains([',', '\n', '\r', '"'])
                || key.entity_id.contains([',', '\n', '\r', '"'])
            {
                return Err(SpellError::validation(format!(
                    "feature key '{}/{}' contains CSV metacharacters",
                    key.video_id, key.entity_id
                )));
            }
            writeln!(idx, "{},{:.6},{},{}", key.video_id, key.time, key.entity_id, i)?;
        }
        idx.flush()?;
        Ok(())
    }

    pub fn read(bin_path: &Path, index_path: &Path) -> Result<FeatureStore> {
        let bname = bin_path.display().to_string();
        let mut file = std::io::BufReader::new(
            std::fs::File::open(bin_path)
                .map_err(|e| SpellError::parse(&bname, 0, e.to_string()))?,
        );
        let mut magic = [0u8; 10];
        file.read_exact(&mut magic)
            .map_err(|_| SpellError::parse(&bname, 0, "file too short for magic"))?;
        if &magic != FEATURES_MAGIC {
            return Err(SpellError::parse(&bname, 0, "bad magic (not a feature store)"));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)
            .map_err(|_| SpellError::parse(&bname, 0, "truncated row count"))?;
        let n = u32::from_le_bytes(u32buf) as usize;
        file.read_exact(&mut u32buf)
            .map_err(|_| SpellError::parse(&bname, 0, "truncated width"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if dim == 0 {
            return Err(SpellError::parse(&bname, 0, "zero feature width"));
        }

        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() != n * dim * 4 {
            return Err(SpellError::parse(
                &bname,
                0,
                format!("payload is {} bytes, expected {} ({n} rows x {dim})", raw.len(), n * dim * 4),
            ));
        }
        let mut data = Vec::with_capacity(n * dim);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(SpellError::parse(&bname, 0, format!("non-finite feature value {bad}")));
        }

        let iname = index_path.display().to_string();
        let ifile = std::fs::File::open(index_path)
            .map_err(|e| SpellError::parse(&iname, 0, e.to_string()))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(ifile);
        let headers = reader.headers().map_err(|e| SpellError::parse(&iname, 1, e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != INDEX_HEADER.split(',').collect::<Vec<_>>() {
            return Err(SpellError::parse(
                &iname,
                1,
                format!("header is '{}', expected '{INDEX_HEADER}'", got.join(",")),
            ));
        }
        let mut index = Vec::with_capacity(n);
        for record in reader.records() {
            let record = record.map_err(|e| SpellError::parse(&iname, 0, e.to_string()))?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let time: f64 = record.get(1).unwrap_or("").parse().map_err(|_| {
                SpellError::parse(&iname, line, format!("bad time '{}'", record.get(1).unwrap_or("")))
            })?;
            let row: usize = record.get(3).unwrap_or("").parse().map_err(|_| {
                SpellError::parse(&iname, line, format!("bad row '{}'", record.get(3).unwrap_or("")))
            })?;
            if row != index.len() {
                return Err(SpellError::parse(
                    &iname,
                    line,
                    format!("row column is {row}, expected {} (rows must be in order)", index.len()),
                ));
            }
            index.push(FeatureKey {
                video_id: record.get(0).unwrap_or("").to_string(),
                time,
                entity_id: record.get(2).unwrap_or("").to_string(),
            });
        }
        if index.len() != n {
            return Err(SpellError::parse(
                &iname,
                0,
                format!("index has {} rows, binary store has {n}", index.len()),
            ));
        }
        Ok(FeatureStore { dim, data, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureStore {
        let mut store = FeatureStore::new(3);
        store
            .push(
                FeatureKey { video_id: "v0".into(), time: 0.0, entity_id: "a".into() },
                &[1.0, 2.0, 3.0],
            )
            .unwrap();
        store
            .push(
                FeatureKey { video_id: "v0".into(), time: 0.5, entity_id: "b".into() },
                &[-1.0, 0.25, 9.5],
            )
            .unwrap();
        store
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.bin");
        let idx = dir.path().join("f.csv");
        let store = sample();
        store.write(&bin, &idx).unwrap();
        let bytes1 = std::fs::read(&bin).unwrap();
        let index1 = std::fs::read(&idx).unwrap();

        let back = FeatureStore::read(&bin, &idx).unwrap();
        assert_eq!(back.dim(), 3);
        assert_eq!(back.len(), 2);
        assert_eq!(back.row(1), &[-1.0, 0.25, 9.5]);

        let bin2 = dir.path().join("g.bin");
        let idx2 = dir.path().join("g.csv");
        back.write(&bin2, &idx2).unwrap();
        assert_eq!(bytes1, std::fs::read(&bin2).unwrap());
        assert_eq!(index1, std::fs::read(&idx2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.bin");
        let idx = dir.path().join("f.csv");
        sample().write(&bin, &idx).unwrap();

        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bin, &bytes).unwrap();
        assert!(FeatureStore::read(&bin, &idx).unwrap_err().to_string().contains("magic"));

        sample().write(&bin, &idx).unwrap();
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 5]).unwrap();
        assert!(FeatureStore::read(&bin, &idx)
            .unwrap_err()
            .to_string()
            .contains("payload"));
    }

    #[test]
    fn index_row_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.bin");
        let idx = dir.path().join("f.csv");
        sample().write(&bin, &idx).unwrap();
        std::fs::write(
            &idx,
            "video_id,time,entity_id,row\nv0,0.000000,a,0\nv0,0.500000,b,5\n",
        )
        .unwrap();
        let msg = FeatureStore::read(&bin, &idx).unwrap_err().to_string();
        assert!(msg.contains("row column"), "{msg}");
    }

    #[test]
    fn width_mismatch_on_push_is_rejected() {
        let mut store = FeatureStore::new(3);
        let err = store
            .push(FeatureKey { video_id: "v".into(), time: 0.0, entity_id: "a".into() }, &[1.0])
            .unwrap_err();
        assert!(err.to_string().contains("width"));
    }
}
