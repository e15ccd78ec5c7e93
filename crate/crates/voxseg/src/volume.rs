//! 3D volumes, binary masks, and the bit-exact JSON+raw container.
//!
//! A stored object is a pair of files: `<base>.json` holds
//! `{"dim":[D,H,W],"dtype":"f32"|"u8","voxel_mm":[...]}` and `<base>.raw`
//! holds the little-endian payload, row-major with W fastest. The format is
//! deliberately trivial so any language can parse it byte-exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Scalar 3D image with voxel-size metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxel_mm: [f32; 3],
    pub data: Vec<f32>,
}

/// Binary 3D mask; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    dim: [usize; 3],
    dtype: String,
    voxel_mm: [f32; 3],
}

fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn header_path(base: &Path) -> PathBuf {
    with_ext(base, "json")
}

fn raw_path(base: &Path) -> PathBuf {
    with_ext(base, "raw")
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_pair(base: &Path, header: &ContainerHeader, payload: &[u8]) -> Result<()> {
    let hp = header_path(base);
    let json = serde_json::to_string(header).map_err(|e| Error::json("encoding header", e))?;
    fs::write(&hp, json).map_err(|e| Error::io(format!("writing {}", hp.display()), e))?;
    let rp = raw_path(base);
    fs::write(&rp, payload).map_err(|e| Error::io(format!("writing {}", rp.display()), e))?;
    Ok(())
}

fn read_pair(base: &Path) -> Result<(ContainerHeader, Vec<u8>)> {
    let hp = header_path(base);
    let json =
        fs::read_to_string(&hp).map_err(|e| Error::io(format!("reading {}", hp.display()), e))?;
    let header: ContainerHeader = serde_json::from_str(&json)
        .map_err(|e| Error::json(format!("parsing {}", hp.display()), e))?;
    let rp = raw_path(base);
    let payload = fs::read(&rp).map_err(|e| Error::io(format!("reading {}", rp.display()), e))?;
    Ok((header, payload))
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_mm: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(Error::shape(
                "volume",
                format!("dims {dims:?} imply {} voxels, data has {}", voxel_count(dims), data.len()),
            ));
        }
        Ok(Volume { dims, voxel_mm, data })
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    pub fn write(&self, base: &Path) -> Result<()> {
        let header = ContainerHeader {
            dim: self.dims,
            dtype: "f32".to_string(),
            voxel_mm: self.voxel_mm,
        };
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_pair(base, &header, &payload)
    }

    pub fn read(base: &Path) -> Result<Self> {
        match read_any(base)? {
            AnyVolume::Scalar(v) => Ok(v),
            AnyVolume::Label(_) => Err(Error::CorruptContainer {
                path: base.display().to_string(),
                detail: "expected dtype f32, found u8".to_string(),
            }),
        }
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(Error::shape(
                "label_volume",
                format!("dims {dims:?} imply {} voxels, data has {}", voxel_count(dims), data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvariantViolation(format!(
                "label volume must be binary; voxel {bad} has value {}",
                data[bad]
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelVolume { dims, data: vec![0; voxel_count(dims)] }
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    /// Number of foreground voxels.
    pub fn volume(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Voxelwise logical OR — pools two raters' masks into one truth.
    pub fn union(&self, other: &LabelVolume) -> Result<LabelVolume> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "union",
                format!("mask dims differ: {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a | b).collect();
        LabelVolume::new(self.dims, data)
    }

    pub fn write(&self, base: &Path) -> Result<()> {
        let header = ContainerHeader {
            dim: self.dims,
            dtype: "u8".to_string(),
            voxel_mm: [1.0, 1.0, 1.0],
        };
        write_pair(base, &header, &self.data)
    }

    pub fn read(base: &Path) -> Result<Self> {
        match read_any(base)? {
            AnyVolume::Label(m) => Ok(m),
            AnyVolume::Scalar(_) => Err(Error::CorruptContainer {
                path: base.display().to_string(),
                detail: "expected dtype u8, found f32".to_string(),
            }),
        }
    }
}

/// A container holds either a scalar volume or a binary mask.
#[derive(Debug, Clone)]
pub enum AnyVolume {
    Scalar(Volume),
    Label(LabelVolume),
}

/// Reads `<base>.json` + `<base>.raw`, dispatching on the header dtype.
pub fn read_any(base: &Path) -> Result<AnyVolume> {
    let (header, payload) = read_pair(base)?;
    let n = voxel_count(header.dim);
    let corrupt = |detail: String| Error::CorruptContainer {
        path: base.display().to_string(),
        detail,
    };
    match header.dtype.as_str() {
        "f32" => {
            if payload.len() != n * 4 {
                return Err(corrupt(format!(
                    "header implies {} bytes of f32 payload, raw file has {}",
                    n * 4,
                    payload.len()
                )));
            }
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyVolume::Scalar(Volume { dims: header.dim, voxel_mm: header.voxel_mm, data }))
        }
        "u8" => {
            if payload.len() != n {
                return Err(corrupt(format!(
                    "header implies {} bytes of u8 payload, raw file has {}",
                    n,
                    payload.len()
                )));
            }
            Ok(AnyVolume::Label(LabelVolume::new(header.dim, payload)?))
        }
        other => Err(corrupt(format!("unknown dtype {other:?}"))),
    }
}
