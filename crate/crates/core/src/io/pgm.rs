//! Binary PGM (P5) masks and 8-bit previews.

use std::path::Path;

use crate::error::{Error, Result};
use crate::localize::TamperMask;
use crate::tensor::LatentTensor;

fn encode(width: usize, height: usize, maxval: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parse a P5 file with maxval < 256, returning (width, height, maxval, pixels).
fn decode(bytes: &[u8]) -> Result<(usize, usize, u16, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Format("bad PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM number '{s}'")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let data = &bytes[i + 1..];
    if data.len() != w * h {
        return Err(Error::Format(format!("PGM payload has {} bytes, expected {}", data.len(), w * h)));
    }
    Ok((w, h, maxval as u16, data))
}

pub fn write_mask(path: &Path, m: &TamperMask) -> Result<()> {
    let px: Vec<u8> = m.data.iter().map(|b| *b as u8).collect();
    super::write_atomic(path, &encode(m.width, m.height, 1, &px))
}

/// Any nonzero pixel is set, so both maxval-1 masks and 8-bit masks load.
pub fn read_mask(path: &Path) -> Result<TamperMask> {
    let bytes = super::read_file(path)?;
    let (width, height, _, px) = decode(&bytes)?;
    Ok(TamperMask {
        height,
        width,
        data: px.iter().map(|v| *v != 0).collect(),
    })
}

/// Channels are stacked vertically; values are clipped to [0, 1] and rounded.
pub fn write_preview(path: &Path, t: &LatentTensor) -> Result<()> {
    let [c, h, w] = t.shape();
    let px: Vec<u8> = t.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    super::write_atomic(path, &encode(w, c * h, 255, &px))
}

/// Inverse of [`write_preview`] for `channels` stacked planes.
pub fn read_preview(path: &Path, channels: usize) -> Result<LatentTensor> {
    let bytes = super::read_file(path)?;
    let (w, h, maxval, px) = decode(&bytes)?;
    if channels == 0 || h % channels != 0 {
        return Err(Error::Format(format!("preview height {h} not divisible into {channels} channels")));
    }
    let data = px.iter().map(|v| *v as f64 / maxval as f64).collect();
    LatentTensor::from_vec([channels, h / channels, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut m = TamperMask::empty(3, 5);
        m.data[7] = true;
        write_mask(&p, &m).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n1\n"));
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn preview_quantizes_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.pgm");
        let t = LatentTensor::from_vec([1, 2, 2], vec![0.0, 0.25, 1.0, 1.5]).unwrap();
        write_preview(&p, &t).unwrap();
        let back = read_preview(&p, 1).unwrap();
        assert_eq!(back.as_slice(), &[0.0, 64.0 / 255.0, 1.0, 1.0]);
        assert!(read_preview(&p, 3).is_err());
    }

    #[test]
    fn header_comments_and_errors() {
        let (w, h, m, px) = decode(b"P5 # c\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!((w, h, m, px), (2, 1, 255, &[1u8, 2][..]));
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
    }
}
