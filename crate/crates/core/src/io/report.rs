//! Per-image verdict CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verify::{Classification, VerdictReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub image_id: String,
    pub attack_kind: String,
    /// Empty for attacks without levels.
    pub level: Option<u8>,
    pub vanilla_pass: bool,
    #[serde(rename = "D2_detect")]
    pub d2_detect: f64,
    #[serde(rename = "D2_own")]
    pub d2_own: f64,
    pub classification: Classification,
    pub owned: bool,
}

impl VerdictRow {
    pub fn new(image_id: impl Into<String>, attack_kind: impl Into<String>, level: Option<u8>, v: &VerdictReport) -> Self {
        Self {
            image_id: image_id.into(),
            attack_kind: attack_kind.into(),
            level,
            vanilla_pass: v.vanilla_pass,
            d2_detect: v.d2_detect,
            d2_own: v.d2_own,
            classification: v.classification,
            owned: v.owned,
        }
    }
}

pub fn write_verdicts(path: &Path, rows: &[VerdictRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_verdicts(path: &Path) -> Result<Vec<VerdictRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
