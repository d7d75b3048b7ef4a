//! Content digests used as provenance identifiers.

use sha2::{Digest as _, Sha256};

/// Incremental SHA-256 over typed little-endian fields, domain-separated by a tag.
pub struct Digest(Sha256);

impl Digest {
    pub fn new(tag: &str) -> Self {
        let mut h = Sha256::new();
        h.update((tag.len() as u64).to_le_bytes());
        h.update(tag.as_bytes());
        Digest(h)
    }

    pub fn f64s(&mut self, xs: &[f64]) -> &mut Self {
        for x in xs {
            self.0.update(x.to_bits().to_le_bytes());
        }
        self
    }

    pub fn usizes(&mut self, xs: &[usize]) -> &mut Self {
        self.0.update((xs.len() as u64).to_le_bytes());
        for &x in xs {
            self.0.update((x as u64).to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// SHA-256 of a byte slice, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
