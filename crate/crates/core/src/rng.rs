//! Explicitly passed, splittable random number generator.
//!
//! Every stochastic component (data generation, batch sampling, dropout,
//! Gaussian perturbations) takes a `SplitRng` by mutable reference. There is
//! no global RNG state, so a whole experiment is reproducible from one seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PintError, Result};

const STATE_BYTES: usize = 32 + 8 + 16;

/// Counter-based ChaCha8 stream that can be split into independent children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRng {
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `stream` of the generator keyed by `seed`. Distinct streams of one
    /// key never overlap.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Draws a fresh key from `self` and returns `n` child streams under it.
    /// Advances `self` by exactly one `u64`.
    pub fn split(&mut self, n: usize) -> Vec<SplitRng> {
        let key = self.inner.next_u64();
        (0..n as u64).map(|s| Self::with_stream(key, s)).collect()
    }

    /// Serializes the full generator position as lowercase hex.
    pub fn state_hex(&self) -> String {
        let mut bytes = Vec::with_capacity(STATE_BYTES);
        bytes.extend_from_slice(&self.inner.get_seed());
        bytes.extend_from_slice(&self.inner.get_stream().to_le_bytes());
        bytes.extend_from_slice(&self.inner.get_word_pos().to_le_bytes());
        hex::encode(bytes)
    }

    pub fn from_state_hex(text: &str) -> Result<Self> {
        let bytes = hex::decode(text.trim())
            .map_err(|e| PintError::Format(format!("rng state is not hex: {e}")))?;
        if bytes.len() != STATE_BYTES {
            return Err(PintError::Format(format!(
                "rng state has {} bytes, expected {STATE_BYTES}",
                bytes.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let word_pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        Ok(Self { inner })
    }
}

impl RngCore for SplitRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
