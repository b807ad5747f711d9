//! Calibration bundles: fitted models, thresholds and the intrinsic-bias baseline.
//!
//! Layout: `"PAIM" | version u16 | length u32 | JSON body | crc32 u32`, with
//! the CRC over every byte before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::Calibration;

const MAGIC: &[u8; 4] = b"PAIM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

pub fn encode_calibration(c: &Calibration) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(c)?;
    let mut out = Vec::with_capacity(body.len() + 14);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_calibration(bytes: &[u8]) -> Result<Calibration> {
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PAIM magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 10 + len + 4 {
        return Err(Error::Format("model file length does not match header".into()));
    }
    let stored = u32::from_le_bytes(bytes[10 + len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..10 + len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(serde_json::from_slice(&bytes[10..10 + len])?)
}

pub fn write_calibration(path: &Path, c: &Calibration) -> Result<()> {
    super::write_atomic(path, &encode_calibration(c)?)
}

/// A missing file means the pipeline was never calibrated.
pub fn read_calibration(path: &Path) -> Result<Calibration> {
    match std::fs::read(path) {
        Ok(b) => decode_calibration(&b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Uncalibrated(format!(
            "no calibration at {}; run `trajmark calibrate` first",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{calibrate, CalibrationSettings, Pipeline};

    #[test]
    fn round_trip_and_corruption() {
        let p = Pipeline::toy().unwrap();
        let cal = calibrate(
            &p,
            &CalibrationSettings {
                invalid_keys: 50,
                detection_samples: 40,
                ownership_clean: 20,
                ownership_per_attack: 2,
                baseline_samples: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let bytes = encode_calibration(&cal).unwrap();
        assert_eq!(decode_calibration(&bytes).unwrap(), cal);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(decode_calibration(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(decode_calibration(&bytes[..30]), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        let e = read_calibration(&dir.path().join("none.paim")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
