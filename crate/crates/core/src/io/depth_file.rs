//! `BSM1` body-shape-map files: magic, u32 side length, then the frontal
//! map as f32 little-endian row-major, then the lateral map.

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::volume::DepthMapPair;
use std::path::Path;

const MAGIC: &[u8; 4] = b"BSM1";

pub fn encode_depth_maps(pair: &DepthMapPair) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * pair.size * pair.size);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(pair.size as u32).to_le_bytes());
    for plane in [&pair.frontal, &pair.lateral] {
        for &v in plane.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode a map pair; the subject id is not stored in the file and is
/// supplied by the caller (normally the manifest row).
pub fn decode_depth_maps(bytes: &[u8], id: &str) -> Result<DepthMapPair> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let size = r.u32()? as usize;
    if size == 0 {
        return Err(Error::Format("map size must be positive".into()));
    }
    let plane = size
        .checked_mul(size)
        .ok_or_else(|| Error::Format("map size overflow".into()))?;
    let expect = plane
        .checked_mul(8)
        .ok_or_else(|| Error::Format("map size overflow".into()))?;
    if r.remaining() != expect {
        return Err(Error::Format(format!(
            "map pair of side {size} needs {expect} bytes, found {}",
            r.remaining()
        )));
    }
    let frontal = r.f32_vec(plane)?;
    let lateral = r.f32_vec(plane)?;
    r.expect_end()?;
    for &v in frontal.iter().chain(&lateral) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Format(format!("map value {v} outside [0,1]")));
        }
    }
    Ok(DepthMapPair {
        id: id.to_string(),
        size,
        frontal,
        lateral,
    })
}

pub fn write_depth_maps(path: impl AsRef<Path>, pair: &DepthMapPair) -> Result<()> {
    write_file(path.as_ref(), &encode_depth_maps(pair))
}

pub fn read_depth_maps(path: impl AsRef<Path>, id: &str) -> Result<DepthMapPair> {
    decode_depth_maps(&read_file(path.as_ref())?, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_validation() {
        let pair = DepthMapPair {
            id: "s1".into(),
            size: 3,
            frontal: (0..9).map(|i| i as f32 / 10.0).collect(),
            lateral: (0..9).map(|i| i as f32 / 20.0).collect(),
        };
        let bytes = encode_depth_maps(&pair);
        let back = decode_depth_maps(&bytes, "s1").unwrap();
        assert_eq!(pair, back);
        assert!(decode_depth_maps(&bytes[..10], "s1").is_err());

        let mut out_of_range = pair.clone();
        out_of_range.frontal[0] = 1.5;
        assert!(decode_depth_maps(&encode_depth_maps(&out_of_range), "s1").is_err());
    }
}
