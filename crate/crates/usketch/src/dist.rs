//! Weight-value distributions: seeded sampling plus quantile functions.
//!
//! The bound verifier needs both directions (draw bucket contents, invert the
//! CDF), so each distribution bundles a sampler with its quantile function.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::ContinuousCDF;

/// A weight distribution usable for Monte Carlo bound checks.
#[derive(Debug, Clone)]
pub enum Distribution {
    /// Standard normal.
    Normal,
    /// Laplace with location 0 and the given scale.
    Laplace { scale: f64 },
    /// Empirical distribution of an observed sample (bootstrap draws,
    /// linearly interpolated quantiles).
    Empirical { sorted: Vec<f64> },
}

impl Distribution {
    pub fn empirical(values: &[f32]) -> Option<Distribution> {
        if values.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
        Some(Distribution::Empirical { sorted })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Normal => "normal",
            Distribution::Laplace { .. } => "laplace",
            Distribution::Empirical { .. } => "empirical",
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Distribution::Normal => rng.sample(rand_distr::StandardNormal),
            // Inverse-transform keeps the draw reproducible from the seed.
            Distribution::Laplace { .. } => self.quantile(rng.random::<f64>()),
            Distribution::Empirical { sorted } => sorted[rng.random_range(0..sorted.len())],
        }
    }

    /// Inverse CDF. `q` must lie in `(0, 1)` for the continuous cases.
    pub fn quantile(&self, q: f64) -> f64 {
        match self {
            Distribution::Normal => normal_quantile(q),
            Distribution::Laplace { scale } => {
                let centered = q - 0.5;
                -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
            }
            Distribution::Empirical { sorted } => {
                let n = sorted.len();
                if n == 1 {
                    return sorted[0];
                }
                let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = h - lo as f64;
                sorted[lo] + (sorted[hi] - sorted[lo]) * frac
            }
        }
    }
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    statrs::distribution::Normal::standard().inverse_cdf(q)
}

/// `n` standard-normal f32 draws from a fixed seed. Shared by tests, the
/// acceptance suite and the demo data generator.
pub fn normal_f32(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
        .collect()
}
