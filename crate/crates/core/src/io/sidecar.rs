//! JSON metadata stored next to each generated image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{DeflectionConfig, GenerationMeta};

pub const SIDECAR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSidecar {
    pub format_version: u32,
    pub user_id: String,
    pub timestamp: u64,
    pub schedule_hash: String,
    pub predictor_hash: String,
    pub deflection: DeflectionConfig,
}

impl ImageSidecar {
    pub fn new(meta: &GenerationMeta, schedule_hash: String, predictor_hash: String) -> Self {
        Self {
            format_version: SIDECAR_FORMAT_VERSION,
            user_id: meta.user_id.clone(),
            timestamp: meta.timestamp,
            schedule_hash,
            predictor_hash,
            deflection: meta.deflection.clone(),
        }
    }

    pub fn meta(&self) -> GenerationMeta {
        GenerationMeta {
            user_id: self.user_id.clone(),
            timestamp: self.timestamp,
            deflection: self.deflection.clone(),
        }
    }

    pub fn check_hashes(&self, schedule_hash: &str, predictor_hash: &str) -> Result<()> {
        if self.schedule_hash != schedule_hash || self.predictor_hash != predictor_hash {
            return Err(Error::Provenance(format!(
                "sidecar was produced with schedule {} / predictor {}, loaded {} / {}",
                self.schedule_hash, self.predictor_hash, schedule_hash, predictor_hash
            )));
        }
        Ok(())
    }
}

pub fn write_sidecar(path: &Path, s: &ImageSidecar) -> Result<()> {
    super::write_atomic(path, serde_json::to_string_pretty(s)?.as_bytes())
}

pub fn read_sidecar(path: &Path) -> Result<ImageSidecar> {
    let s: ImageSidecar = serde_json::from_slice(&super::read_file(path)?)?;
    if s.format_version != SIDECAR_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported sidecar version {}", s.format_version)));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageSidecar {
        ImageSidecar {
            format_version: 1,
            user_id: "alice".into(),
            timestamp: 1_700_000_000,
            schedule_hash: "aa".into(),
            predictor_hash: "bb".into(),
            deflection: DeflectionConfig::standard(50),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_sidecar(&p, &sample()).unwrap();
        assert_eq!(read_sidecar(&p).unwrap(), sample());
    }

    #[test]
    fn missing_field_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, r#"{"format_version":1,"user_id":"a"}"#).unwrap();
        let e = read_sidecar(&p).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn hash_mismatch_is_provenance_error() {
        let s = sample();
        s.check_hashes("aa", "bb").unwrap();
        assert!(matches!(s.check_hashes("aa", "cc"), Err(Error::Provenance(_))));
    }
}
