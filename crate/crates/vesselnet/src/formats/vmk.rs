//! Mask volumes: `VMK1`, then depth, height and width as little-endian
//! `u32`, then one byte (0 or 1) per voxel, width fastest.

use std::path::Path;

use vesselnet_core::volume::MaskVolume;

use super::{read_bytes, write_atomic};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VMK1";

pub fn encode(v: &MaskVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + v.voxels().len());
    out.extend_from_slice(MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(v.voxels());
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<MaskVolume, String> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err("not a VMK1 volume".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
    if bytes.len() - 16 != n {
        return Err(format!("{dims:?} needs {n} voxel bytes, found {}", bytes.len() - 16));
    }
    MaskVolume::from_voxels(dims, bytes[16..].to_vec()).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<MaskVolume> {
    decode(&read_bytes(path)?).map_err(|d| Error::format(path, d))
}

pub fn write(path: &Path, v: &MaskVolume) -> Result<()> {
    write_atomic(path, &encode(v))
}
