//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator. The 256-bit key is expanded from a
//! 64-bit seed (mixed with a domain tag through the SplitMix64 finalizer),
//! and the 64-bit ChaCha stream id selects an independent substream. Prompt
//! `i` of a run is always drawn from substream `i`, so sampling a batch in
//! any order or on any thread produces the same prompts.
//!
//! Gaussian variates come from `rand_distr::StandardNormal` (ziggurat).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Domain tags keep the prompt streams of training, evaluation and
/// initialization disjoint even when they share a user-facing seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Prompts,
    Train,
    Eval,
    Init,
    Check,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Prompts => 0x5052_4f4d_5054_5300,
            Domain::Train => 0x5452_4149_4e00_0000,
            Domain::Eval => 0x4556_414c_0000_0000,
            Domain::Init => 0x494e_4954_0000_0000,
            Domain::Check => 0x4348_4543_4b00_0000,
        }
    }
}

/// SplitMix64 output function (Steele, Lea & Flood constants).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    /// Stream 0 of the plain seed.
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    pub fn substream(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self { rng }
    }

    /// Substream `index` of `seed` within `domain`.
    pub fn derive(seed: u64, domain: Domain, index: u64) -> Self {
        Self::substream(splitmix64(seed ^ domain.tag()), index)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}
