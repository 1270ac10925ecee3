//! Saliency metrics and importance-proportional sketch space allocation.
//!
//! Weights differ sharply in how much compression noise they tolerate, so
//! units covering salient weights get more sketch columns. The main metric is
//! the expected squared activation per input dimension: approximating the
//! layer output error as a weighted sum of squared weight perturbations makes
//! E[a_j^2] the natural per-row weighting.

use crate::error::{Error, Result};

/// Unit mapping for a tensor: one unit per matrix row, the whole tensor as a
/// single unit, or the single-unit mapping with importance ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Granularity {
    Row,
    Layer,
    Uniform,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Row => "row",
            Granularity::Layer => "layer",
            Granularity::Uniform => "uniform",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "row" => Some(Granularity::Row),
            "layer" => Some(Granularity::Layer),
            "uniform" => Some(Granularity::Uniform),
            _ => None,
        }
    }
}

/// Non-negative saliency scores, one per allocation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceProfile {
    pub scores: Vec<f64>,
    /// Samples behind the expectation (1 for file-loaded profiles).
    pub sample_count: usize,
}

impl ImportanceProfile {
    pub fn new(scores: Vec<f64>, sample_count: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("importance profile"));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidConfig(
                "importance scores must be finite and non-negative".into(),
            ));
        }
        Ok(ImportanceProfile {
            scores,
            sample_count,
        })
    }

    pub fn uniform(units: usize) -> Result<Self> {
        ImportanceProfile::new(vec![1.0; units], 1)
    }

    /// Coarsen scores into `buckets` quantile groups, replacing each score by
    /// its group mean. Trades allocation granularity for regularity.
    pub fn quantile_bucketed(&self, buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::InvalidConfig("bucket count must be >= 1".into()));
        }
        let n = self.scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.scores[a]
                .partial_cmp(&self.scores[b])
                .expect("finite")
                .then(a.cmp(&b))
        });
        let mut out = vec![0.0; n];
        let buckets = buckets.min(n);
        for b in 0..buckets {
            let lo = b * n / buckets;
            let hi = (b + 1) * n / buckets;
            let mean =
                order[lo..hi].iter().map(|&i| self.scores[i]).sum::<f64>() / (hi - lo) as f64;
            for &i in &order[lo..hi] {
                out[i] = mean;
            }
        }
        ImportanceProfile::new(out, self.sample_count)
    }
}

/// Per-input-dimension importance `I_j = (1/N) sum_k a[k][j]^2` over an
/// `N x d` activation sample (row-major).
pub fn activation_importance(samples: &[f32], n: usize, dim: usize) -> Result<ImportanceProfile> {
    if n == 0 || dim == 0 {
        return Err(Error::EmptyInput("activation samples"));
    }
    if samples.len() != n * dim {
        return Err(Error::LengthMismatch {
            left: samples.len(),
            right: n * dim,
        });
    }
    let mut scores = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (s, &a) in scores.iter_mut().zip(row) {
            *s += f64::from(a) * f64::from(a);
        }
    }
    for s in &mut scores {
        *s /= n as f64;
    }
    ImportanceProfile::new(scores, n)
}

/// Layer-level saliency: the mean of its row scores.
pub fn layer_importance(rows: &ImportanceProfile) -> f64 {
    rows.scores.iter().sum::<f64>() / rows.scores.len() as f64
}

/// Column counts assigned to each unit.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct AllocationPlan {
    pub per_unit_columns: Vec<u32>,
    pub total_budget: u64,
    pub floor: u32,
}

impl AllocationPlan {
    pub fn total_allocated(&self) -> u64 {
        self.per_unit_columns.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Split a column budget across units in proportion to their scores.
///
/// Ideal shares `I_j / sum(I) * budget` are clamped to at least `floor`
/// columns (re-normalizing the rest), then rounded by largest remainder so
/// the plan spends the budget exactly. Deterministic: remainder ties break
/// toward the lower unit index.
pub fn allocate_columns(
    profile: &ImportanceProfile,
    total_budget: u64,
    floor: u32,
) -> Result<AllocationPlan> {
    let units = profile.scores.len();
    if floor == 0 {
        return Err(Error::InvalidConfig("allocation floor must be >= 1".into()));
    }
    if u64::from(floor) * units as u64 > total_budget {
        return Err(Error::InfeasibleFloor {
            units,
            floor,
            budget: total_budget,
        });
    }
    if total_budget > u64::from(u32::MAX) * units as u64 {
        return Err(Error::InvalidConfig(
            "budget exceeds representable columns".into(),
        ));
    }

    let mut columns = vec![0u32; units];
    // Clamped units hold exactly `floor`; the rest share what remains.
    let mut clamped = vec![false; units];
    loop {
        let active_score: f64 = profile
            .scores
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|(s, _)| s)
            .sum();
        let clamped_cols: u64 = u64::from(floor) * clamped.iter().filter(|&&c| c).count() as u64;
        let remaining = total_budget - clamped_cols;
        let active: Vec<usize> = (0..units).filter(|&i| !clamped[i]).collect();
        if active.is_empty() {
            break;
        }

        // All-zero active scores: spread the remainder evenly.
        let quota = |i: usize| -> f64 {
            if active_score == 0.0 {
                remaining as f64 / active.len() as f64
            } else {
                profile.scores[i] / active_score * remaining as f64
            }
        };

        let newly_clamped: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| quota(i) < f64::from(floor))
            .collect();
        if newly_clamped.is_empty() {
            // Largest-remainder rounding of the active quotas.
            let mut leftover = remaining;
            let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(active.len());
            for &i in &active {
                let q = quota(i);
                let base = q.floor() as u64;
                columns[i] = base as u32;
                leftover -= base;
                remainders.push((q - base as f64, i));
            }
            remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
            for &(_, i) in remainders.iter().take(leftover as usize) {
                columns[i] += 1;
            }
            break;
        }
        for i in newly_clamped {
            clamped[i] = true;
            columns[i] = floor;
        }
    }

    Ok(AllocationPlan {
        per_unit_columns: columns,
        total_budget,
        floor,
    })
}

/// Exactly stored `(unit-local index, value)` pairs.
pub type OutlierList = Vec<(u32, f32)>;

/// The `k` largest-magnitude weights as exact `(index, value)` pairs plus the
/// input with those positions zeroed. Magnitude ties keep the lower index.
/// Pairs come back ordered by descending magnitude.
pub fn split_topk_outliers(weights: &[f32], k: usize) -> Result<(OutlierList, Vec<f32>)> {
    if k > weights.len() {
        return Err(Error::IndexOutOfRange {
            index: k,
            limit: weights.len(),
        });
    }
    if weights.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig(
            "unit too large for 32-bit outlier indices".into(),
        ));
    }
    let mut order: Vec<u32> = (0..weights.len() as u32).collect();
    order.sort_by(|&a, &b| {
        weights[b as usize]
            .abs()
            .partial_cmp(&weights[a as usize].abs())
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    let mut remainder = weights.to_vec();
    let outliers: OutlierList = order[..k]
        .iter()
        .map(|&i| {
            remainder[i as usize] = 0.0;
            (i, weights[i as usize])
        })
        .collect();
    Ok((outliers, remainder))
}

/// Loss degradation from compressing a single layer: evaluates the model
/// with `layer` compressed minus the unperturbed baseline. `eval` receives
/// `Some(layer)` or `None` accordingly; larger deltas mean more salient
/// layers.
pub fn perturbation_importance<F>(mut eval: F, layer: usize) -> f64
where
    F: FnMut(Option<usize>) -> f64,
{
    eval(Some(layer)) - eval(None)
}
