//! Single-file checkpoints.
//!
//! Layout:
//!
//! ```text
//! SPECMTM-CKPT-1\n
//! {"format":"SPECMTM-CKPT-1","metadata":{...},"tensors":[{"name",...,"offset",...}]}\n
//! <little-endian tensor bytes, concatenated in manifest order>
//! ```
//!
//! Offsets are relative to the first byte after the manifest line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::params::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &str = "SPECMTM-CKPT-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    store: &ParameterStore,
    metadata: &serde_json::Value,
    dtype: Dtype,
) -> Result<()> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(_, p)| {
            let nbytes = (p.value.len() * dtype.width()) as u64;
            let e = TensorEntry {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                dtype,
                offset,
                nbytes,
                trainable: p.trainable,
            };
            offset += nbytes;
            e
        })
        .collect();
    let manifest = Manifest {
        format: CHECKPOINT_MAGIC.to_string(),
        metadata: metadata.clone(),
        tensors,
    };
    let json = serde_json::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "{json}")?;
    for (_, p) in store.iter() {
        for &x in p.value.as_slice() {
            match dtype {
                Dtype::F32 => out.write_all(&(x as f32).to_le_bytes())?,
                Dtype::F64 => out.write_all(&x.to_le_bytes())?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(ParameterStore, Manifest)> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    if header.trim_end_matches('\n') != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad header {:?}, expected {CHECKPOINT_MAGIC}",
            header.trim_end()
        )));
    }
    let mut line = String::new();
    input.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;

    let mut store = ParameterStore::new();
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        if e.nbytes as usize != n * e.dtype.width() {
            return Err(Error::Checkpoint(format!("{}: byte count mismatch", e.name)));
        }
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated data", e.name)))?;
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let id = store.add(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)?)?;
        store.set_trainable(id, e.trainable);
    }
    Ok((store, manifest))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParameterStore,
    metadata: &serde_json::Value,
    dtype: Dtype,
) -> Result<()> {
    let f = File::create(path.as_ref())?;
    write_checkpoint(BufWriter::new(f), store, metadata, dtype)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterStore, Manifest)> {
    let f = File::open(path.as_ref()).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("a.w", Mat::from_rows(&[vec![1.0, -2.5], vec![0.1, 3.0]]))
            .unwrap();
        let b = s.add("a.b", Mat::row_vector(&[0.5, 0.25, -8.0])).unwrap();
        s.set_trainable(b, false);
        s
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let s = sample_store();
        let meta = serde_json::json!({"epochs": 3});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, &meta, Dtype::F64).unwrap();
        assert!(buf.starts_with(b"SPECMTM-CKPT-1\n"));
        let (back, manifest) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert_eq!(manifest.metadata, meta);
        assert_eq!(manifest.tensors[1].offset, 32);
        assert_eq!(manifest.tensors[1].nbytes, 24);
    }

    #[test]
    fn f32_roundtrip_rounds() {
        let s = sample_store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, &serde_json::Value::Null, Dtype::F32).unwrap();
        let (back, _) = read_checkpoint(&buf[..]).unwrap();
        let w = back.by_name("a.w").unwrap();
        assert_eq!(w.value[(0, 0)], 1.0);
        assert_eq!(w.value[(1, 0)], 0.1f32 as f64);
    }

    #[test]
    fn bad_header_and_truncation_rejected() {
        assert!(read_checkpoint(&b"NOPE\n{}\n"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store(), &serde_json::Value::Null, Dtype::F64)
            .unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
