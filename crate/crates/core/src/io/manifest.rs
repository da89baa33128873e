//! Dataset manifest CSV: `id,frontal_path,lateral_path,fat_pct,grade,mean_hu`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub frontal_path: String,
    pub lateral_path: String,
    pub fat_pct: f64,
    pub grade: u8,
    pub mean_hu: f64,
}

fn validate(rows: &[ManifestRow]) -> Result<()> {
    for row in rows {
        if row.grade > 3 {
            return Err(Error::Format(format!(
                "subject `{}`: grade {} outside 0..=3",
                row.id, row.grade
            )));
        }
        if !row.fat_pct.is_finite() || !(0.0..=100.0).contains(&row.fat_pct) {
            return Err(Error::Format(format!(
                "subject `{}`: fat {} outside [0,100]",
                row.id, row.fat_pct
            )));
        }
        if !row.mean_hu.is_finite() {
            return Err(Error::Format(format!(
                "subject `{}`: non-finite mean attenuation",
                row.id
            )));
        }
    }
    Ok(())
}

pub fn decode_manifest(bytes: &[u8]) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    validate(&rows)?;
    Ok(rows)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    decode_manifest(&super::read_file(path.as_ref())?)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    validate(rows)?;
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    }
    super::write_file(path.as_ref(), &out)
}
