//! Versioned checkpoint files: `<base>.json` holds the model config plus a
//! manifest of (name, shape, offset, trainable) entries; `<base>.raw` holds
//! the little-endian parameter payload in manifest order.

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the raw payload.
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    tool_version: String,
    dtype: String,
    bn_batches: u64,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(
    base: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<()> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.scalar_count() * T::WIDTH);
    for (name, param) in params.iter() {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: param.tensor.shape().to_vec(),
            offset: payload.len(),
            trainable: param.trainable,
        });
        for &v in param.tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        tool_version: crate::VERSION.to_string(),
        dtype: T::DTYPE.to_string(),
        bn_batches: params.bn_batches,
        config: cfg.clone(),
        manifest,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::json("encoding checkpoint header", e))?;
    let jp = with_ext(base, "json");
    fs::write(&jp, json).map_err(|e| Error::io(format!("writing {}", jp.display()), e))?;
    let rp = with_ext(base, "raw");
    fs::write(&rp, payload).map_err(|e| Error::io(format!("writing {}", rp.display()), e))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(base: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let jp = with_ext(base, "json");
    let json =
        fs::read_to_string(&jp).map_err(|e| Error::io(format!("reading {}", jp.display()), e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| Error::json(format!("parsing {}", jp.display()), e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptContainer {
            path: jp.display().to_string(),
            detail: format!("unsupported checkpoint version {}", header.version),
        });
    }
    if header.dtype != T::DTYPE {
        return Err(Error::CorruptContainer {
            path: jp.display().to_string(),
            detail: format!("checkpoint dtype {} does not match requested {}", header.dtype, T::DTYPE),
        });
    }
    let rp = with_ext(base, "raw");
    let payload = fs::read(&rp).map_err(|e| Error::io(format!("reading {}", rp.display()), e))?;
    let mut params = ModelParams::empty();
    params.bn_batches = header.bn_batches;
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * T::WIDTH;
        if end > payload.len() {
            return Err(Error::CorruptContainer {
                path: rp.display().to_string(),
                detail: format!(
                    "entry `{}` needs bytes {}..{end}, payload has {}",
                    entry.name,
                    entry.offset,
                    payload.len()
                ),
            });
        }
        let data: Vec<T> = payload[entry.offset..end]
            .chunks_exact(T::WIDTH)
            .map(|c| T::read_le(c))
            .collect();
        let tensor = Tensor::new(&entry.shape, data)?;
        params.insert(entry.name.clone(), tensor, entry.trainable);
    }
    header.config.validate()?;
    Ok((header.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("voxseg-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_preserves_every_scalar() {
        let cfg = ModelConfig::toy();
        let params = ModelParams::<f32>::init(&cfg, 42).unwrap();
        let base = tmp("roundtrip");
        save_checkpoint(&base, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint::<f32>(&base).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params.len(), params2.len());
        for ((n1, p1), (n2, p2)) in params.iter().zip(params2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.trainable, p2.trainable);
            assert_eq!(p1.tensor.shape(), p2.tensor.shape());
            assert!(p1
                .tensor
                .data()
                .iter()
                .zip(p2.tensor.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = ModelConfig::toy();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let base = tmp("dtype");
        save_checkpoint(&base, &cfg, &params).unwrap();
        assert!(load_checkpoint::<f64>(&base).is_err());
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let cfg = ModelConfig::toy();
        let params = ModelParams::<f32>::init(&cfg, 2).unwrap();
        let base = tmp("trunc");
        save_checkpoint(&base, &cfg, &params).unwrap();
        let raw = with_ext(&base, "raw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&base),
            Err(Error::CorruptContainer { .. })
        ));
    }
}
