//! Versioned model checkpoints.
//!
//! ```text
//! magic    8 bytes  "NEDCKPT1"
//! u32      header length in bytes
//! header   JSON {format_version, kind, config, tensors: [{name, shape, trainable}]}
//! data     every tensor's values as f64 little-endian, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

pub const CHECKPOINT_VERSION: &str = "nedict-ckpt/1";
const MAGIC: &[u8; 8] = b"NEDCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header<C> {
    format_version: String,
    kind: String,
    config: C,
    tensors: Vec<TensorHeader>,
}

pub fn checkpoint_bytes<C: Serialize>(kind: &str, config: &C, params: &ParameterSet) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION.to_string(),
        kind: kind.to_string(),
        config,
        tensors: params
            .iter()
            .map(|p| TensorHeader {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<C: Serialize>(path: &Path, kind: &str, config: &C, params: &ParameterSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(kind, config, params)?)?;
    Ok(())
}

pub fn load_checkpoint<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, ParameterSet)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("train the {kind} model first"),
        },
        _ => Error::Io(e),
    })?;
    parse_checkpoint(path, &bytes, kind)
}

fn parse_checkpoint<C: DeserializeOwned>(path: &Path, bytes: &[u8], kind: &str) -> Result<(C, ParameterSet)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header<C> =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("format version `{}`, expected `{CHECKPOINT_VERSION}`", header.format_version),
        ));
    }
    if header.kind != kind {
        return Err(Error::format(path, format!("checkpoint holds a `{}` model, expected `{kind}`", header.kind)));
    }
    let mut data = &body[hlen..];
    let mut params = ParameterSet::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        if data.len() < n * 8 {
            return Err(Error::format(path, format!("tensor `{}` is truncated", t.name)));
        }
        let values = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        let id = params.insert(t.name, Tensor::new(t.shape, values)?)?;
        params.entry_mut(id).trainable = t.trainable;
    }
    if !data.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", data.len())));
    }
    Ok((header.config, params))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("a.w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap())
            .unwrap();
        let id = ps.insert("a.b", Tensor::zeros(&[1, 3])).unwrap();
        ps.entry_mut(id).trainable = false;
        ps
    }

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ps = sample();
        save_checkpoint(&path, "toy", &42u32, &ps).unwrap();
        let (cfg, back): (u32, ParameterSet) = load_checkpoint(&path, "toy").unwrap();
        assert_eq!(cfg, 42);
        assert_eq!(back, ps);
    }

    #[test]
    fn wrong_kind_and_truncation_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, "toy", &1u32, &sample()).unwrap();
        assert!(matches!(load_checkpoint::<u32>(&path, "other"), Err(Error::Format { .. })));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint::<u32>(&path, "toy").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn missing_file_is_an_actionable_error() {
        let err = load_checkpoint::<u32>(Path::new("/nonexistent/x.ckpt"), "detector").unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
    }
}
