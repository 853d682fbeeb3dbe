//! Seeded random streams and the small sampling primitives shared across
//! modules.
//!
//! Every stochastic concern draws from its own ChaCha stream derived from the
//! run seed. Two learners that share a concern (for example replay sampling in
//! SCoMMER and in plain ER) therefore consume identical random numbers for it
//! regardless of what else each one draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type EngineRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Replay = 3,
    Reservoir = 4,
    Ema = 5,
    Dropout = 6,
    Augment = 7,
    Data = 8,
}

pub fn stream(seed: u64, which: Stream) -> EngineRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// All per-concern streams of one training run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub shuffle: EngineRng,
    pub replay: EngineRng,
    pub reservoir: EngineRng,
    pub ema: EngineRng,
    pub dropout: EngineRng,
    pub augment: EngineRng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            shuffle: stream(seed, Stream::Shuffle),
            replay: stream(seed, Stream::Replay),
            reservoir: stream(seed, Stream::Reservoir),
            ema: stream(seed, Stream::Ema),
            dropout: stream(seed, Stream::Dropout),
            augment: stream(seed, Stream::Augment),
        }
    }
}

/// Draws up to `count` distinct indices, each successive draw picking among the
/// remaining indices with probability proportional to its weight.
///
/// Zero-weight indices are never drawn; if fewer than `count` indices carry
/// positive weight, all of them are returned. The result is in draw order.
pub fn weighted_without_replacement<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = weights.iter().copied().enumerate().filter(|&(_, w)| w > 0.0).collect();
    let mut picked = Vec::with_capacity(count.min(remaining.len()));
    while picked.len() < count && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&(_, w)| w).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = remaining.len() - 1;
        for (pos, &(_, w)) in remaining.iter().enumerate() {
            if u < w {
                chosen = pos;
                break;
            }
            u -= w;
        }
        picked.push(remaining.remove(chosen).0);
    }
    picked
}

/// Fisher-Yates shuffle of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
