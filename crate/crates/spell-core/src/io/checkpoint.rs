//! Binary model checkpoints.
//!
//! Layout: magic `SPELLCKPT1`, little-endian `u32` tensor count, then per
//! tensor: `u32` name length, UTF-8 name, `u32` rank, one `u32` per
//! dimension, and the values as raw `f32`. Tensors are sorted by name, so
//! equal parameters always serialize to identical bytes.
//!
//! Parameters store as `[rows, cols]` matrices and batch-norm running
//! statistics as rank-1 vectors. No configuration block is written: the
//! model shape is recovered from the tensor names and dimensions on load
//! (the naming scheme is injective over configurations).

use crate::error::{Result, SpellError};
use crate::model::{config_from_shapes, SpellParams, TensorShape};
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"SPELLCKPT1";

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_DIM: usize = 1 << 24;

fn collect_entries(params: &SpellParams<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    params.for_each_param(&mut |t| {
        entries.push((
            t.name.clone(),
            vec![t.value.rows(), t.value.cols()],
            t.value.data().to_vec(),
        ));
    });
    params.for_each_state(&mut |name, data| {
        entries.push((name.to_string(), vec![data.len()], data.to_vec()));
    });
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

fn write_raw(path: &Path, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, dims, data) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        for &v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &SpellParams<f32>) -> Result<()> {
    write_raw(path, &collect_entries(params))
}

fn read_u32(r: &mut impl Read, file: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| SpellError::parse(file, 0, format!("truncated {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<SpellParams<f32>> {
    let fname = path.display().to_string();
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| SpellError::parse(&fname, 0, e.to_string()))?,
    );
    let mut magic = [0u8; 10];
    file.read_exact(&mut magic)
        .map_err(|_| SpellError::parse(&fname, 0, "file too short for magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SpellError::parse(&fname, 0, "bad magic (not a checkpoint)"));
    }

    let count = read_u32(&mut file, &fname, "tensor count")? as usize;
    let mut shapes = Vec::with_capacity(count);
    let mut values: HashMap<String, Vec<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut file, &fname, "name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(SpellError::parse(&fname, 0, format!("bad name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        file.read_exact(&mut name_buf)
            .map_err(|_| SpellError::parse(&fname, 0, "truncated tensor name"))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| SpellError::parse(&fname, 0, "tensor name is not UTF-8"))?;
        let rank = read_u32(&mut file, &fname, "rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(SpellError::parse(&fname, 0, format!("tensor '{name}' has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = read_u32(&mut file, &fname, "dimension")? as usize;
            if d == 0 || d > MAX_DIM {
                return Err(SpellError::parse(
                    &fname,
                    0,
                    format!("tensor '{name}' has dimension {d}"),
                ));
            }
            numel *= d;
            dims.push(d);
        }
        let mut raw = vec![0u8; numel * 4];
        file.read_exact(&mut raw)
            .map_err(|_| SpellError::parse(&fname, 0, format!("truncated data for '{name}'")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(SpellError::parse(
                &fname,
                0,
                format!("tensor '{name}' holds non-finite value {bad}"),
            ));
        }
        if values.insert(name.clone(), data).is_some() {
            return Err(SpellError::parse(&fname, 0, format!("tensor '{name}' appears twice")));
        }
        shapes.push(TensorShape { name, dims });
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(SpellError::parse(&fname, 0, "trailing bytes after last tensor"));
    }

    let config = config_from_shapes(&shapes)?;
    let mut params = SpellParams::<f32>::init(config, 0)?;
    let dims_by_name: HashMap<&str, &[usize]> =
        shapes.iter().map(|s| (s.name.as_str(), s.dims.as_slice())).collect();

    let mut consumed: HashSet<String> = HashSet::with_capacity(count);
    let mut fill_err: Option<SpellError> = None;
    params.for_each_param_mut(&mut |t| {
        if fill_err.is_some() {
            return;
        }
        let want = [t.value.rows(), t.value.cols()];
        match (values.get(&t.name), dims_by_name.get(t.name.as_str())) {
            (Some(data), Some(dims)) if *dims == want => {
                t.value.data_mut().copy_from_slice(data);
                consumed.insert(t.name.clone());
            }
            (Some(_), Some(dims)) => {
                fill_err = Some(SpellError::validation(format!(
                    "tensor '{}' is {dims:?} in the checkpoint but {want:?} in the model",
                    t.name
                )));
            }
            _ => {
                fill_err = Some(SpellError::validation(format!(
                    "checkpoint is missing tensor '{}'",
                    t.name
                )));
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    let mut state_names: Vec<(String, usize)> = Vec::new();
    params.for_each_state(&mut |name, data| state_names.push((name.to_string(), data.len())));
    for (name, len) in state_names {
        let (data, dims) = match (values.get(&name), dims_by_name.get(name.as_str())) {
            (Some(d), Some(s)) => (d, s),
            _ => {
                return Err(SpellError::validation(format!(
                    "checkpoint is missing tensor '{name}'"
                )))
            }
        };
        if *dims != [len] {
            return Err(SpellError::validation(format!(
                "tensor '{name}' is {dims:?} in the checkpoint but [{len}] in the model"
            )));
        }
        params.state_mut(&name).unwrap().copy_from_slice(data);
        consumed.insert(name);
    }

    if consumed.len() != count {
        let mut extra: Vec<&str> = values
            .keys()
            .filter(|n| !consumed.contains(n.as_str()))
            .map(|n| n.as_str())
            .collect();
        extra.sort_unstable();
        return Err(SpellError::validation(format!(
            "checkpoint holds tensors the model does not: {}",
            extra.join(", ")
        )));
    }
    Ok(params)
}
