//! SHA-256 checksums used to tie artifacts together.

use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest as _, Sha256};

pub type Digest32 = [u8; 32];

/// Incremental hasher over little-endian encoded values.
#[derive(Clone, Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Hasher(Sha256::new())
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update(b);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        for v in vs {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Digest32 {
        self.0.finalize().into()
    }
}

pub fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

pub fn to_hex(d: &[u8]) -> String {
    let mut s = String::with_capacity(d.len() * 2);
    for b in d {
        let _ = write!(s, "{b:02x}");
    }
    s
}
