//! Minimal NIfTI-1 reader for interoperability with MRI tooling.
//!
//! Reads uncompressed single-file `.nii` volumes: 348-byte little-endian
//! header, magic `n+1\0`, datatype uint8 / int16 / float32, `dim[0] == 3`.
//! Values are rescaled by `scl_slope`/`scl_inter` when `scl_slope != 0`.
//! Everything else (detached `.hdr` pairs, compression, other datatypes,
//! 4-D time series) is rejected with an error naming the offending field.

use crate::error::{Error, Result};
use crate::volume::Volume;
use std::fs;
use std::path::Path;

const HEADER_LEN: usize = 348;

// NIfTI-1 field offsets (from the published C struct layout).
const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes(bytes[off..off + 2].try_into().unwrap())
}

fn i32_at(bytes: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

/// Reads an uncompressed NIfTI-1 volume.
///
/// Axis convention: NIfTI stores x fastest; the result is `[D, H, W]` =
/// `[dim[3], dim[2], dim[1]]` with matching `voxel_mm`, so the flat payload
/// order is preserved verbatim.
pub fn read_nifti1_minimal(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::UnsupportedNifti {
            field: "sizeof_hdr",
            detail: format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len()),
        });
    }
    let sizeof_hdr = i32_at(&bytes, OFF_SIZEOF_HDR);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::UnsupportedNifti {
            field: "sizeof_hdr",
            detail: format!("expected 348 (little-endian), found {sizeof_hdr}"),
        });
    }
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic != b"n+1\0" {
        let detail = if magic == b"ni1\0" {
            "detached header/image pairs (ni1) are not supported".to_string()
        } else {
            format!("expected \"n+1\\0\", found {magic:?}")
        };
        return Err(Error::UnsupportedNifti { field: "magic", detail });
    }
    let ndim = i16_at(&bytes, OFF_DIM);
    if ndim != 3 {
        return Err(Error::UnsupportedNifti {
            field: "dim[0]",
            detail: format!("expected 3 spatial dimensions, found {ndim}"),
        });
    }
    let nx = i16_at(&bytes, OFF_DIM + 2) as usize;
    let ny = i16_at(&bytes, OFF_DIM + 4) as usize;
    let nz = i16_at(&bytes, OFF_DIM + 6) as usize;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::UnsupportedNifti {
            field: "dim",
            detail: format!("zero extent in ({nx}, {ny}, {nz})"),
        });
    }
    let datatype = i16_at(&bytes, OFF_DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::UnsupportedNifti {
                field: "datatype",
                detail: format!("code {other} not in {{uint8=2, int16=4, float32=16}}"),
            })
        }
    };
    let px = f32_at(&bytes, OFF_PIXDIM + 4);
    let py = f32_at(&bytes, OFF_PIXDIM + 8);
    let pz = f32_at(&bytes, OFF_PIXDIM + 12);
    let vox_offset = f32_at(&bytes, OFF_VOX_OFFSET);
    let data_start = if vox_offset < HEADER_LEN as f32 { 352 } else { vox_offset as usize };
    let scl_slope = f32_at(&bytes, OFF_SCL_SLOPE);
    let scl_inter = f32_at(&bytes, OFF_SCL_INTER);

    let n = nx * ny * nz;
    let need = data_start + n * width;
    if bytes.len() < need {
        return Err(Error::UnsupportedNifti {
            field: "vox_offset",
            detail: format!("payload needs {need} bytes, file has {}", bytes.len()),
        });
    }
    let payload = &bytes[data_start..data_start + n * width];
    let rescale = |v: f32| if scl_slope != 0.0 { v * scl_slope + scl_inter } else { v };
    let data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| rescale(b as f32)).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| rescale(i16::from_le_bytes(c.try_into().unwrap()) as f32))
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| rescale(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        _ => unreachable!(),
    };
    Volume::new([nz, ny, nx], [pz, py, px], data)
}
