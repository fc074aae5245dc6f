use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LssError, Result};

/// Seedable counter-based generator (ChaCha8, 256-bit key).
///
/// The full state is the key, the stream id and the 128-bit word position,
/// which [`Rng::to_words`] exposes so checkpoints can restore it exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    inner: ChaCha8Rng,
}

const STATE_WORDS: usize = 8 + 2 + 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a labelled sub-task of `seed` (per-video,
    /// per-epoch, ...). Does not consume draws from any other generator.
    pub fn derived(seed: u64, path: &[u64]) -> Self {
        let mut s = splitmix64(seed);
        for &p in path {
            s = splitmix64(s ^ splitmix64(p.wrapping_add(0x5151)));
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn to_words(&self) -> Vec<u32> {
        let mut w = Vec::with_capacity(STATE_WORDS);
        for chunk in self.inner.get_seed().chunks(4) {
            w.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let stream = self.inner.get_stream();
        w.push(stream as u32);
        w.push((stream >> 32) as u32);
        let pos = self.inner.get_word_pos();
        for i in 0..4 {
            w.push((pos >> (32 * i)) as u32);
        }
        w
    }

    pub fn from_words(words: &[u32]) -> Result<Self> {
        if words.len() != STATE_WORDS {
            return Err(LssError::Format(format!(
                "rng state needs {STATE_WORDS} words, got {}",
                words.len()
            )));
        }
        let mut seed = [0u8; 32];
        for (i, w) in words[..8].iter().enumerate() {
            seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(words[8] as u64 | ((words[9] as u64) << 32));
        let mut pos: u128 = 0;
        for i in 0..4 {
            pos |= (words[10 + i] as u128) << (32 * i);
        }
        inner.set_word_pos(pos);
        Ok(Rng { inner })
    }
}
