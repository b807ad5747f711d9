//! Short content hashes used for provenance checks.

use sha2::{Digest, Sha256};

/// Incremental SHA-256 over tagged numeric content, rendered as 16 hex chars.
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update([0u8]);
        Self(h)
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.0.update((v.len() as u64).to_le_bytes());
        for x in v {
            self.0.update(x.to_le_bytes());
        }
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn finish(&mut self) -> String {
        let digest = std::mem::take(&mut self.0).finalize();
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        let a = Fingerprint::new("x").f64s(&[1.0, 2.0]).finish();
        let b = Fingerprint::new("x").f64s(&[1.0, 2.0]).finish();
        let c = Fingerprint::new("x").f64s(&[1.0, 2.0000001]).finish();
        let d = Fingerprint::new("y").f64s(&[1.0, 2.0]).finish();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 16);
    }
}
