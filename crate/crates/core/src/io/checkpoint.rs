//! `SFP1` parameter checkpoints: magic, u32 entry count, then per entry a
//! u16 name length, the UTF-8 name, a u8 rank, rank×u32 dims, and the
//! values as f32 little-endian row-major.

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SFP1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(u32::try_from(entries.len()).map_err(|_| {
        Error::InvalidArgument("too many checkpoint entries".into())
    })?)
    .to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("name `{}` too long", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::InvalidArgument("rank exceeds u8".into()))?;
        let numel: usize = e.shape.iter().product();
        if numel != e.values.len() {
            return Err(Error::InvalidArgument(format!(
                "entry `{}`: shape {:?} vs {} values",
                e.name,
                e.shape,
                e.values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::Format(format!("entry `{name}` has a zero dim")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("entry size overflow".into()))?;
            shape.push(d);
        }
        let byte_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Format("entry size overflow".into()))?;
        if r.remaining() < byte_len {
            return Err(Error::Format(format!(
                "entry `{name}` wants {byte_len} value bytes, {} left",
                r.remaining()
            )));
        }
        let values = r.f32_vec(numel)?;
        entries.push(CheckpointEntry { name, shape, values });
    }
    r.expect_end()?;
    Ok(entries)
}

pub fn write_checkpoint(path: impl AsRef<Path>, entries: &[CheckpointEntry]) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(entries)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointEntry>> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<CheckpointEntry> {
        vec![
            CheckpointEntry {
                name: "conv.w".into(),
                shape: vec![2, 1, 3, 3],
                values: (0..18).map(|i| i as f32 * 0.5).collect(),
            },
            CheckpointEntry {
                name: "fc.b".into(),
                shape: vec![4],
                values: vec![1.0, -2.0, 0.25, 0.0],
            },
        ]
    }

    #[test]
    fn roundtrip_preserves_bytes_and_order() {
        let entries = sample();
        let bytes = encode_checkpoint(&entries).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(entries, back);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn malformed_inputs_error() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes[..7]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut bad_magic = bytes;
        bad_magic[3] = b'9';
        assert!(decode_checkpoint(&bad_magic).is_err());
    }
}
