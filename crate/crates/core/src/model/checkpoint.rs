//! Binary checkpoints.
//!
//! Layout: `WATT` magic, `u32` format version, `u32` header length, a JSON
//! header, then every parameter followed by every BN running mean/variance
//! as little-endian `f32`, all in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::nn::ParamKind;
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WATT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ArchConfig,
    pub tensors: Vec<TensorEntry>,
    /// BN layer names and channel counts, in order.
    pub bn_stats: Vec<(String, usize)>,
    /// Free-form training metadata (epoch, metric, seed, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    meta: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        tensors: model
            .store
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        bn_stats: model
            .store
            .stats
            .iter()
            .map(|s| (s.name.clone(), s.mean.len()))
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * model.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let len = u32::try_from(json.len()).map_err(|_| ckpt_err("header too large"))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |v: T| buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    for p in &model.store.params {
        p.value.data().iter().for_each(|&v| put(v));
    }
    for s in &model.store.stats {
        s.mean.iter().chain(&s.var).for_each(|&v| put(v));
    }
    let wrap = |source| Error::Path {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(wrap)?;
    f.write_all(&buf).map_err(wrap)?;
    Ok(())
}

/// Rebuild a model from `path`, checking every tensor against its config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| Error::Path {
            path: path.to_path_buf(),
            source,
        })?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| ckpt_err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut model = Model::<T>::build(&header.config, 0)?;
    if model.store.params.len() != header.tensors.len()
        || model.store.stats.len() != header.bn_stats.len()
    {
        return Err(ckpt_err(
            "tensor inventory does not match the recorded architecture",
        ));
    }
    let mut data = bytes[12 + hlen..].chunks_exact(4);
    let expected = model.num_params()
        + model
            .store
            .stats
            .iter()
            .map(|s| 2 * s.mean.len())
            .sum::<usize>();
    if data.len() != expected || !data.remainder().is_empty() {
        return Err(ckpt_err(format!(
            "payload holds {} values, architecture needs {expected}",
            data.len()
        )));
    }
    let mut next = || {
        T::of(f32::from_le_bytes(
            data.next()
                .expect("length checked")
                .try_into()
                .expect("4 bytes"),
        ) as f64)
    };
    for (p, e) in model.store.params.iter_mut().zip(&header.tensors) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(ckpt_err(format!(
                "tensor {} does not match header entry {}",
                p.name, e.name
            )));
        }
        p.value.data_mut().iter_mut().for_each(|v| *v = next());
    }
    for s in model.store.stats.iter_mut() {
        s.mean.iter_mut().for_each(|v| *v = next());
        s.var.iter_mut().for_each(|v| *v = next());
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ArchConfig::watt(1, 2).unwrap().with_input(32, 32);
        let mut m = Model::<f32>::build(&cfg, 5).unwrap();
        m.store.stats[0].mean[0] = 0.25;
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, serde_json::json!({"epoch": 3}), &path).unwrap();
        let (back, header) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(header.meta["epoch"], 3);
        assert_eq!(back.store.stats[0].mean[0], 0.25);
        for (a, b) in m.store.params.iter().zip(&back.store.params) {
            assert_eq!(a.value, b.value);
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
        bytes[0] = b'W';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
