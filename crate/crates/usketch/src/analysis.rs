//! Compression error statistics, the probabilistic lower bound on bucket
//! minima, and the sketch-variant comparison harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::sketch::{compress_unit, decompress_unit, SketchConfig, SketchState, Variant};

/// Relative-error histogram: one exact-zero bucket, log-spaced decades from
/// 1e-4 to 1e1, catch-all buckets on both sides, and a separate tally for
/// zero-valued originals (their relative error is undefined).
///
/// All counts together sum to the weight count.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct Histogram {
    /// Originals with |w| == 0, excluded from relative-error statistics.
    pub zero_weights: u64,
    /// Relative error exactly zero.
    pub exact: u64,
    /// Relative error in (0, 1e-4).
    pub below: u64,
    /// Decades [1e-4, 1e-3), [1e-3, 1e-2), ..., [1e0, 1e1).
    pub decades: [u64; 5],
    /// Relative error >= 1e1.
    pub above: u64,
}

impl Histogram {
    fn record(&mut self, rel: f64) {
        if rel == 0.0 {
            self.exact += 1;
        } else if rel < 1e-4 {
            self.below += 1;
        } else if rel >= 1e1 {
            self.above += 1;
        } else {
            // log10(rel) in [-4, 1): decade index 0..5.
            let idx = (rel.log10().floor() as i32 + 4).clamp(0, 4) as usize;
            self.decades[idx] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.zero_weights + self.exact + self.below + self.decades.iter().sum::<u64>() + self.above
    }

    /// `(label, count)` rows for text output.
    pub fn rows(&self) -> Vec<(String, u64)> {
        let mut out = vec![
            ("zero_weight".to_string(), self.zero_weights),
            ("exact".to_string(), self.exact),
            ("(0,1e-4)".to_string(), self.below),
        ];
        for (i, &c) in self.decades.iter().enumerate() {
            let lo = i as i32 - 4;
            out.push((format!("[1e{},1e{})", lo, lo + 1), c));
        }
        out.push((">=1e1".to_string(), self.above));
        out
    }
}

/// Round-trip quality of one compressed unit (or a whole tensor).
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompressionReport {
    pub weight_count: u64,
    /// Mean of |w - w'| / |w| over nonzero originals.
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    /// Fraction of weights retrieved with the opposite sign (both nonzero).
    pub sign_error_rate: f64,
    /// Fraction reproduced bit-exactly.
    pub untouched_fraction: f64,
    /// Fraction of sketch cells no weight hashed to.
    pub unoccupied_fraction: f64,
    pub histogram: Histogram,
    /// Set when the state passed through scalar quantization; rounding may
    /// raise magnitudes, so underestimate checks do not apply.
    pub quantized: bool,
}

impl CompressionReport {
    pub fn with_quantized(mut self, quantized: bool) -> Self {
        self.quantized = quantized;
        self
    }

    /// Line-oriented `key=value` rendering.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("weight_count={}\n", self.weight_count));
        s.push_str(&format!(
            "mean_relative_error={:.6e}\n",
            self.mean_relative_error
        ));
        s.push_str(&format!(
            "max_relative_error={:.6e}\n",
            self.max_relative_error
        ));
        s.push_str(&format!("sign_error_rate={:.6}\n", self.sign_error_rate));
        s.push_str(&format!(
            "untouched_fraction={:.6}\n",
            self.untouched_fraction
        ));
        s.push_str(&format!(
            "unoccupied_fraction={:.6}\n",
            self.unoccupied_fraction
        ));
        s.push_str(&format!("quantized={}\n", self.quantized));
        for (label, count) in self.histogram.rows() {
            s.push_str(&format!("hist{}={}\n", label, count));
        }
        s
    }
}

/// Compare originals against their round-tripped approximations.
pub fn report(original: &[f32], approx: &[f32], state: &SketchState) -> Result<CompressionReport> {
    if original.len() != approx.len() {
        return Err(Error::LengthMismatch {
            left: original.len(),
            right: approx.len(),
        });
    }
    if original.is_empty() {
        return Err(Error::EmptyInput("report over empty weight sequence"));
    }

    let mut hist = Histogram::default();
    let mut sum_rel = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut nonzero = 0u64;
    let mut sign_errors = 0u64;
    let mut untouched = 0u64;

    for (&w, &a) in original.iter().zip(approx) {
        if w.to_bits() == a.to_bits() {
            untouched += 1;
        }
        if w == 0.0 {
            hist.zero_weights += 1;
            continue;
        }
        nonzero += 1;
        let rel = (f64::from(w) - f64::from(a)).abs() / f64::from(w.abs());
        hist.record(rel);
        sum_rel += rel;
        max_rel = max_rel.max(rel);
        if a != 0.0 && a.is_sign_positive() != w.is_sign_positive() {
            sign_errors += 1;
        }
    }

    let n = original.len() as f64;
    Ok(CompressionReport {
        weight_count: original.len() as u64,
        mean_relative_error: if nonzero > 0 {
            sum_rel / nonzero as f64
        } else {
            0.0
        },
        max_relative_error: max_rel,
        sign_error_rate: sign_errors as f64 / n,
        untouched_fraction: untouched as f64 / n,
        unoccupied_fraction: state.unoccupied_fraction(),
        histogram: hist,
        quantized: false,
    })
}

/// Per-bucket load model for `k` items hashed uniformly into `m` buckets:
/// the load is Binomial(k, 1/m).
#[derive(Debug, Clone, Copy)]
pub struct CollisionModel {
    pub k: u64,
    pub m: u64,
}

impl CollisionModel {
    pub fn expected_load(&self) -> f64 {
        self.k as f64 / self.m as f64
    }

    pub fn expected_empty_fraction(&self) -> f64 {
        expected_unoccupied(self.k, self.m)
    }

    pub fn sample_load(&self, rng: &mut ChaCha8Rng) -> u64 {
        rand_distr::Binomial::new(self.k, 1.0 / self.m as f64)
            .expect("valid binomial parameters")
            .sample(rng)
    }
}

/// Expected fraction of buckets left empty: `(1 - 1/m)^k`.
pub fn expected_unoccupied(k: u64, m: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    (k as f64 * (1.0 - 1.0 / m as f64).ln()).exp()
}

/// The value a bucket minimum stays above with probability `p`.
///
/// For a bucket holding `n` i.i.d. draws with CDF `F`, the minimum satisfies
/// `P(min >= L) = (1 - F(L))^n`; solving for probability `p` gives
/// `L = F^{-1}(1 - p^{1/n})`.
pub fn error_lower_bound(p: f64, n: u64, quantile: impl Fn(f64) -> f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if n == 0 {
        return Err(Error::InvalidConfig(
            "collision count n must be >= 1".into(),
        ));
    }
    Ok(quantile(1.0 - p.powf(1.0 / n as f64)))
}

/// Result of a Monte Carlo check of [`error_lower_bound`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct BoundCheck {
    pub p: f64,
    /// Fraction of sampled occupied buckets whose minimum reached the bound.
    pub coverage: f64,
    /// Number of occupied buckets sampled.
    pub buckets: usize,
    pub expected_load: f64,
    /// Bound evaluated at the expected load, for reporting.
    pub bound_at_expected_load: f64,
}

/// Samples occupied buckets under the Binomial(k, 1/m) load model, draws each
/// bucket's contents from `dist`, and measures how often the bucket minimum
/// reaches the load-specific bound. For a continuous distribution the
/// per-bucket hit probability is exactly `p`, so coverage concentrates
/// around `p`.
pub fn verify_bound(
    dist: &Distribution,
    k: u64,
    m: u64,
    p: f64,
    occupied_buckets: usize,
    seed: u64,
) -> Result<BoundCheck> {
    if occupied_buckets < 1000 {
        return Err(Error::InvalidConfig(
            "bound verification needs at least 1000 occupied buckets".into(),
        ));
    }
    if k == 0 || m == 0 {
        return Err(Error::InvalidConfig("k and m must be >= 1".into()));
    }
    // Validate p once up front; the per-bucket call cannot fail after this.
    error_lower_bound(p, 1, |q| dist.quantile(q))?;

    let model = CollisionModel { k, m };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut covered = 0usize;
    let mut sampled = 0usize;
    while sampled < occupied_buckets {
        let load = model.sample_load(&mut rng);
        if load == 0 {
            continue;
        }
        let mut min = f64::INFINITY;
        for _ in 0..load {
            min = min.min(dist.sample(&mut rng));
        }
        let bound = error_lower_bound(p, load, |q| dist.quantile(q))?;
        if min >= bound {
            covered += 1;
        }
        sampled += 1;
    }

    let expected_load = model.expected_load().max(1.0).round() as u64;
    Ok(BoundCheck {
        p,
        coverage: covered as f64 / sampled as f64,
        buckets: sampled,
        expected_load: model.expected_load(),
        bound_at_expected_load: error_lower_bound(p, expected_load, |q| dist.quantile(q))?,
    })
}

/// Classical Count-Min sizing heuristics at fixed state memory: the failure
/// probability shrinks exponentially in the row count while the accuracy
/// term shrinks linearly in the column count. Reported as documentation of
/// the row/column trade-off; they do not apply to the min/max variants.
pub fn countmin_tradeoff(rows: u64, columns: u64) -> (f64, f64) {
    ((-(rows as f64)).exp(), std::f64::consts::E / columns as f64)
}

/// Compress/decompress/report `weights` once per variant at identical
/// geometry (same rows, columns and seed), so each variant gets the same
/// memory budget.
pub fn compare_variants(
    weights: &[f32],
    base: &SketchConfig,
) -> Result<Vec<(Variant, CompressionReport)>> {
    [Variant::AbsMaxMin, Variant::AbsMinMax, Variant::CountMin]
        .into_iter()
        .map(|variant| {
            let config = SketchConfig {
                variant,
                ..base.clone()
            };
            let state = compress_unit(weights, &config)?;
            let out = decompress_unit(&state, weights.len() as u64)?;
            Ok((variant, report(weights, &out, &state)?))
        })
        .collect()
}
