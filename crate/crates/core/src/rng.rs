//! Seeded randomness with independent named streams.
//!
//! Every concern of a trial (group splits, failures, noise, priorities, ...)
//! draws from its own ChaCha stream, so adding draws to one concern never
//! shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named random streams of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Splits,
    Failures,
    Noise,
    Priorities,
    Placement,
    Membership,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Splits => 2,
            Stream::Failures => 3,
            Stream::Noise => 4,
            Stream::Priorities => 5,
            Stream::Placement => 6,
            Stream::Membership => 7,
        }
    }
}

/// Source of per-stream generators for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialRng {
    seed: u64,
}

impl TrialRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.id());
        rng
    }

    /// A child trial rng, e.g. for the k-th synchronization of an optimizer run.
    pub fn fork(&self, salt: u64) -> TrialRng {
        TrialRng::new(mix64(self.seed ^ mix64(salt.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }
}

/// SplitMix64 finalizer. Stable across platforms and releases.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed.
pub fn combine_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Folds a label into a word (FNV-1a).
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn seeded_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
