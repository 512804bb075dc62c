//! Content digests for the table -> plan -> manifest chain of custody.
//!
//! Digests are SHA-256 over a canonical text form, rendered as
//! `sha256:<hex>`. Floats are digested by their exact bit pattern so a
//! value round-tripped through JSON digests identically.

use sha2::{Digest, Sha256};

pub const PREFIX: &str = "sha256:";

pub struct Hasher(Sha256);

impl Hasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update(b"\n");
        Hasher(h)
    }

    pub fn field(&mut self, name: &str, value: impl AsRef<str>) {
        self.0.update(name.as_bytes());
        self.0.update(b"=");
        self.0.update(value.as_ref().as_bytes());
        self.0.update(b"\n");
    }

    pub fn line(&mut self, parts: &[&str]) {
        self.0.update(parts.join("\t").as_bytes());
        self.0.update(b"\n");
    }

    pub fn finish(self) -> String {
        format!("{PREFIX}{}", hex::encode(self.0.finalize()))
    }
}

/// Canonical text form of an f64: hex of its IEEE-754 bits.
pub fn f64_bits(value: f64) -> String {
    format!("{:016x}", value.to_bits())
}

/// SHA-256 of raw bytes (image artifacts, file contents).
pub fn bytes_digest(bytes: &[u8]) -> String {
    format!("{PREFIX}{}", hex::encode(Sha256::digest(bytes)))
}

/// First 8 bytes of SHA-256 as a big-endian u64. Used by the mock image
/// backend to fold the prompt into its pixel stream.
pub fn short_hash(text: &str) -> u64 {
    let full = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(full[..8].try_into().unwrap())
}
