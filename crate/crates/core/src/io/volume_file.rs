//! `SFV1` volume files: magic, u32 nx/ny/nz, 3×f32 spacing, then int16
//! little-endian voxels z-major.

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::volume::Volume;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SFV1";

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 12 + 12 + v.voxels().len() * 2);
    out.extend_from_slice(MAGIC);
    for d in [v.nx, v.ny, v.nz] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &vox in v.voxels() {
        out.extend_from_slice(&vox.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let nx = r.u32()? as usize;
    let ny = r.u32()? as usize;
    let nz = r.u32()? as usize;
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let count = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::Format("volume dimensions overflow".into()))?;
    let expect_bytes = count
        .checked_mul(2)
        .ok_or_else(|| Error::Format("volume size overflow".into()))?;
    if r.remaining() != expect_bytes {
        return Err(Error::Format(format!(
            "volume {nx}x{ny}x{nz} needs {expect_bytes} voxel bytes, found {}",
            r.remaining()
        )));
    }
    let voxels = r.i16_vec(count)?;
    r.expect_end()?;
    Volume::new(nx, ny, nz, spacing, voxels).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read_file(path.as_ref())?)
}
