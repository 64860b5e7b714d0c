//! Rounding schemes used when casting reals onto a discrete grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How off-grid values are mapped onto the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RoundingMode {
    /// Deterministic round to nearest, ties to the even grid multiple.
    #[default]
    NearestEven,
    /// Round up with probability equal to the fractional distance to the
    /// lower grid point. Reproducible for a given seed.
    Stochastic {
        #[serde(with = "crate::serde_u64")]
        seed: u64,
    },
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the independent random stream with index `stream` derived from a
/// base seed. Distinct tensors draw from distinct streams so that the result
/// does not depend on the order in which they are quantized.
pub fn derive_stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ mix64(stream)
}

/// Stateful rounding engine. Nearest-even carries no state; stochastic
/// rounding owns a ChaCha stream.
#[derive(Debug, Clone)]
pub struct Rounder {
    rng: Option<ChaCha8Rng>,
}

impl Rounder {
    pub fn nearest() -> Self {
        Rounder { rng: None }
    }

    pub fn new(mode: RoundingMode) -> Self {
        Self::for_stream(mode, 0)
    }

    pub fn for_stream(mode: RoundingMode, stream: u64) -> Self {
        match mode {
            RoundingMode::NearestEven => Self::nearest(),
            RoundingMode::Stochastic { seed } => Rounder {
                rng: Some(ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, stream))),
            },
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.rng.is_some()
    }

    /// Rounds `q`, expressed in grid units, to an integer.
    #[inline]
    pub(crate) fn round_units(&mut self, q: f64) -> f64 {
        match &mut self.rng {
            None => q.round_ties_even(),
            Some(rng) => stochastic_units(q, rng),
        }
    }

    /// Chooses between two neighbours: returns `true` (take the upper one)
    /// with probability `p_up`. Nearest mode takes the upper one iff
    /// `p_up > 0.5`; exact ties stay low.
    #[inline]
    pub(crate) fn choose_upper(&mut self, p_up: f64) -> bool {
        match &mut self.rng {
            None => p_up > 0.5,
            Some(rng) => p_up > 0.0 && rng.gen::<f64>() < p_up,
        }
    }
}

impl Default for Rounder {
    fn default() -> Self {
        Self::nearest()
    }
}

#[inline]
fn stochastic_units<R: Rng + ?Sized>(q: f64, rng: &mut R) -> f64 {
    let lower = q.floor();
    let frac = q - lower;
    if frac > 0.0 && rng.gen::<f64>() < frac {
        lower + 1.0
    } else {
        lower
    }
}

/// Nearest multiple of `epsilon`; exact half-way cases go to the even multiple.
pub fn round_nearest_even(x: f32, epsilon: f32) -> f32 {
    assert!(epsilon > 0.0, "grid step must be positive");
    let eps = epsilon as f64;
    ((x as f64 / eps).round_ties_even() * eps) as f32
}

/// Rounds down to the grid with probability `1 - frac` and up with
/// probability `frac`, where `frac` is the fractional distance to the lower
/// grid point. The expected result equals `x`.
pub fn round_stochastic<R: Rng + ?Sized>(x: f32, epsilon: f32, rng: &mut R) -> f32 {
    assert!(epsilon > 0.0, "grid step must be positive");
    let eps = epsilon as f64;
    (stochastic_units(x as f64 / eps, rng) * eps) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_even_examples() {
        assert_eq!(round_nearest_even(0.5, 0.5), 0.5);
        assert_eq!(round_nearest_even(0.75, 0.5), 1.0);
        assert_eq!(round_nearest_even(0.3, 0.25), 0.25);
        assert_eq!(round_nearest_even(0.25, 0.5), 0.0);
        assert_eq!(round_nearest_even(-0.75, 0.5), -1.0);
    }

    #[test]
    fn stochastic_on_grid_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(round_stochastic(0.75, 0.25, &mut rng), 0.75);
        }
    }

    #[test]
    fn stochastic_frequency_and_mean() {
        let eps = 0.125f32;
        let x = 0.5f32 + 0.25 * eps;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ups = 0usize;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let r = round_stochastic(x, eps, &mut rng);
            assert!(r == 0.5 || r == 0.5 + eps);
            if r > 0.5 {
                ups += 1;
            }
            sum += r as f64;
        }
        let freq = ups as f64 / n as f64;
        assert!((freq - 0.25).abs() <= 0.01, "up-round frequency {freq}");
        let mean = sum / n as f64;
        let bound = 3.0 * (eps as f64 / 2.0) / (n as f64).sqrt();
        assert!((mean - x as f64).abs() <= bound, "mean {mean} vs {x}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mode = RoundingMode::Stochastic { seed: 7 };
        let draw = |stream| {
            let mut r = Rounder::for_stream(mode, stream);
            (0..64).map(|_| r.round_units(0.5)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }
}
