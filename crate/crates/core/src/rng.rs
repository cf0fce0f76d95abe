//! Keyed random streams.
//!
//! Every source of randomness is addressed by a path such as
//! `(seed, "replica", 17)` or `(seed, "edge", u, v, "circ")`. The path is
//! hashed into a ChaCha8 seed, so a stream's output depends only on its key,
//! never on which worker runs it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tree::VertexAddr;

pub type RandomStream = ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey([u8; 32]);

impl std::fmt::Debug for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StreamKey(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        Self::digest(&[b"wbtree/root", &seed.to_le_bytes()])
    }

    pub fn child(&self, label: &str) -> Self {
        Self::digest(&[&self.0, &[1], &(label.len() as u64).to_le_bytes(), label.as_bytes()])
    }

    pub fn index(&self, i: u64) -> Self {
        Self::digest(&[&self.0, &[2], &i.to_le_bytes()])
    }

    pub fn vertex(&self, x: &VertexAddr) -> Self {
        Self::digest(&[
            &self.0,
            &[3],
            &x.up().to_le_bytes(),
            &(x.word().len() as u64).to_le_bytes(),
            x.word(),
        ])
    }

    /// Shorthand for `root(seed).child("replica").index(i)`.
    pub fn replica(seed: u64, i: u64) -> Self {
        Self::root(seed).child("replica").index(i)
    }

    pub fn stream(&self) -> RandomStream {
        ChaCha8Rng::from_seed(self.0)
    }

    /// A single uniform draw in `[0, 1)` determined by the key.
    pub fn uniform(&self) -> f64 {
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&self.0[..8]);
        (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn digest(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        Self(out)
    }
}

/// Exponential variate with the given rate.
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}
