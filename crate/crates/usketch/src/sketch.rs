//! Multi-row sketch state with select/update/retrieve rules.
//!
//! A compression unit of `k` weights is folded into an `M x N` state. Every
//! weight address hashes to one column per row. On update, colliding weights
//! reduce into the cell according to the variant; on retrieve, the bonded
//! cells are combined across rows. All reductions are deterministic and (for
//! the min/max variants) independent of insertion order.

use crate::error::{Error, Result};
use crate::hash::HashFamily;

/// Cell update/retrieve discipline.
///
/// * `AbsMaxMin` - cells keep the collider with the smallest absolute value;
///   retrieval takes the bonded cell with the largest absolute value. A
///   retrieved weight never exceeds the original in magnitude.
/// * `AbsMinMax` - the mirror image: cells keep the largest magnitude,
///   retrieval takes the smallest. Overestimates instead.
/// * `CountMin` - cells accumulate the sum of their colliders; retrieval
///   takes the bonded cell with the smallest absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Variant {
    AbsMaxMin,
    AbsMinMax,
    CountMin,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AbsMaxMin => "absmaxmin",
            Variant::AbsMinMax => "absminmax",
            Variant::CountMin => "countmin",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        match name {
            "absmaxmin" => Some(Variant::AbsMaxMin),
            "absminmax" => Some(Variant::AbsMinMax),
            "countmin" => Some(Variant::CountMin),
            _ => None,
        }
    }
}

/// Geometry and seeding of one sketch instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchConfig {
    pub variant: Variant,
    /// Number of rows (independent hash functions). Default 3.
    pub rows: usize,
    /// Columns per row for this compression unit.
    pub columns: u32,
    /// Master seed; per-row seeds are derived from it.
    pub seed: u64,
    /// Replace hashing with `addr % columns` (tests only).
    pub test_hash: bool,
}

pub const DEFAULT_ROWS: usize = 3;

impl SketchConfig {
    pub fn new(variant: Variant, rows: usize, columns: u32, seed: u64) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidConfig("rows must be >= 1".into()));
        }
        if columns == 0 {
            return Err(Error::InvalidConfig("columns must be >= 1".into()));
        }
        if rows > 255 {
            return Err(Error::InvalidConfig(format!("rows {rows} exceeds 255")));
        }
        Ok(SketchConfig {
            variant,
            rows,
            columns,
            seed,
            test_hash: false,
        })
    }

    pub fn with_test_hash(mut self) -> Self {
        self.test_hash = true;
        self
    }

    pub fn with_columns(mut self, columns: u32) -> Self {
        self.columns = columns;
        self
    }

    /// Total state elements (`rows x columns`).
    pub fn elements(&self) -> u64 {
        self.rows as u64 * u64::from(self.columns)
    }

    pub(crate) fn family(&self) -> HashFamily {
        HashFamily::new(self.seed, self.rows, self.test_hash)
    }
}

/// A weight's position inside its compression unit; the hash input.
/// No mapping table exists: the index itself addresses the sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightAddress(pub u64);

/// Keep the candidate with the smaller absolute value; on an exact magnitude
/// tie prefer the one with a clear sign bit (covers -0.0 vs 0.0 too, so the
/// reduction stays commutative, associative and idempotent and cell contents
/// do not depend on insertion order).
#[inline]
fn min_abs(a: f32, b: f32) -> f32 {
    if b.abs() < a.abs() || (b.abs() == a.abs() && a.is_sign_negative() && !b.is_sign_negative()) {
        b
    } else {
        a
    }
}

/// Mirror of [`min_abs`]: keep the larger magnitude, ties prefer non-negative.
#[inline]
fn max_abs(a: f32, b: f32) -> f32 {
    if b.abs() > a.abs() || (b.abs() == a.abs() && a.is_sign_negative() && !b.is_sign_negative()) {
        b
    } else {
        a
    }
}

/// The compressed representation of one unit: an `M x N` value matrix plus an
/// occupancy mask. Unoccupied cells hold 0.0 with the mask bit clear, so no
/// non-finite sentinel ever reaches serialization or quantization.
///
/// Immutable after compression; safe to share read-only across threads.
#[derive(Debug, Clone)]
pub struct SketchState {
    values: Vec<f32>,
    occupied: Vec<bool>,
    config: SketchConfig,
    weight_count: u64,
    family: HashFamily,
}

impl PartialEq for SketchState {
    /// Bit-level equality on values (distinguishes -0.0 from 0.0).
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.weight_count == other.weight_count
            && self.occupied == other.occupied
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl SketchState {
    /// Fresh all-unoccupied state.
    pub fn new(config: SketchConfig) -> Self {
        let cells = config.rows * config.columns as usize;
        let family = config.family();
        SketchState {
            values: vec![0.0; cells],
            occupied: vec![false; cells],
            config,
            weight_count: 0,
            family,
        }
    }

    /// Rebuild a state from its parts (deserialization, tests).
    pub fn from_raw(
        config: SketchConfig,
        values: Vec<f32>,
        occupied: Vec<bool>,
        weight_count: u64,
    ) -> Result<Self> {
        let cells = config.rows * config.columns as usize;
        if values.len() != cells || occupied.len() != cells {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: cells,
            });
        }
        let family = config.family();
        Ok(SketchState {
            values,
            occupied,
            config,
            weight_count,
            family,
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn weight_count(&self) -> u64 {
        self.weight_count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    /// Fraction of cells no weight ever hashed to.
    pub fn unoccupied_fraction(&self) -> f64 {
        let empty = self.occupied.iter().filter(|&&o| !o).count();
        empty as f64 / self.occupied.len() as f64
    }

    #[inline]
    fn cell(&self, row: usize, addr: u64) -> usize {
        row * self.config.columns as usize
            + self.family.index(row, addr, self.config.columns) as usize
    }

    /// Fold `w` into the bonded cell of every row.
    pub fn update(&mut self, addr: WeightAddress, w: f32) {
        for row in 0..self.config.rows {
            let idx = self.cell(row, addr.0);
            let cell = self.values[idx];
            self.values[idx] = if !self.occupied[idx] {
                w
            } else {
                match self.config.variant {
                    Variant::AbsMaxMin => min_abs(cell, w),
                    Variant::AbsMinMax => max_abs(cell, w),
                    Variant::CountMin => cell + w,
                }
            };
            self.occupied[idx] = true;
        }
    }

    /// Read back the approximation of the weight at `addr`.
    ///
    /// Combines the bonded cells across rows: largest magnitude for
    /// `AbsMaxMin`, smallest for `AbsMinMax` and `CountMin`. Magnitude ties
    /// prefer the non-negative cell, then the lower row. Asking for an
    /// address that was never inserted is a contract violation and errors.
    pub fn retrieve(&self, addr: WeightAddress) -> Result<f32> {
        if addr.0 >= self.weight_count {
            return Err(Error::NotInserted {
                addr: addr.0,
                count: self.weight_count,
            });
        }
        let mut best: Option<f32> = None;
        for row in 0..self.config.rows {
            let idx = self.cell(row, addr.0);
            if !self.occupied[idx] {
                return Err(Error::NotInserted {
                    addr: addr.0,
                    count: self.weight_count,
                });
            }
            let cell = self.values[idx];
            best = Some(match best {
                None => cell,
                Some(b) => match self.config.variant {
                    Variant::AbsMaxMin => max_abs(b, cell),
                    Variant::AbsMinMax | Variant::CountMin => min_abs(b, cell),
                },
            });
        }
        Ok(best.expect("rows >= 1"))
    }

    /// Row index of the cell retrieval would select for `addr`.
    /// Exposes the weight-to-row bonding so callers can watch it migrate.
    pub fn selected_row(&self, addr: WeightAddress) -> Result<u8> {
        if addr.0 >= self.weight_count {
            return Err(Error::NotInserted {
                addr: addr.0,
                count: self.weight_count,
            });
        }
        let mut best_row = 0u8;
        let mut best = self.values[self.cell(0, addr.0)];
        for row in 1..self.config.rows {
            let cell = self.values[self.cell(row, addr.0)];
            let pick = match self.config.variant {
                Variant::AbsMaxMin => max_abs(best, cell),
                Variant::AbsMinMax | Variant::CountMin => min_abs(best, cell),
            };
            if pick.to_bits() != best.to_bits() {
                best = pick;
                best_row = row as u8;
            }
        }
        Ok(best_row)
    }

    pub(crate) fn set_weight_count(&mut self, count: u64) {
        self.weight_count = count;
    }
}

/// Compress a whole unit: every weight is applied exactly once per row.
/// The resulting state does not depend on iteration order for the min/max
/// variants; `CountMin` sums in address order.
pub fn compress_unit(weights: &[f32], config: &SketchConfig) -> Result<SketchState> {
    compress_unit_excluding(weights, config, &[])
}

/// Like [`compress_unit`] but skips the (sorted, deduplicated) `excluded`
/// addresses. Used when outliers are stored exactly outside the sketch:
/// keeping them out of the cells can only raise the surviving minima.
pub fn compress_unit_excluding(
    weights: &[f32],
    config: &SketchConfig,
    excluded: &[u64],
) -> Result<SketchState> {
    if weights.is_empty() {
        return Err(Error::EmptyUnit);
    }
    if let Some(bad) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::InvalidConfig(format!("weight {bad} is not finite")));
    }
    let mut state = SketchState::new(config.clone());
    let mut skip = excluded.iter().copied().peekable();
    for (j, &w) in weights.iter().enumerate() {
        if skip.peek() == Some(&(j as u64)) {
            skip.next();
            continue;
        }
        state.update(WeightAddress(j as u64), w);
    }
    state.set_weight_count(weights.len() as u64);
    Ok(state)
}

/// Batch retrieve: element `j` is `retrieve(addr = j)`.
pub fn decompress_unit(state: &SketchState, count: u64) -> Result<Vec<f32>> {
    if count != state.weight_count() {
        return Err(Error::CountMismatch {
            expected: state.weight_count(),
            got: count,
        });
    }
    (0..count)
        .map(|j| state.retrieve(WeightAddress(j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(variant: Variant, rows: usize, columns: u32) -> SketchConfig {
        SketchConfig::new(variant, rows, columns, 42).unwrap()
    }

    #[test]
    fn config_rejects_degenerate_geometry() {
        assert!(SketchConfig::new(Variant::AbsMaxMin, 0, 4, 1).is_err());
        assert!(SketchConfig::new(Variant::AbsMaxMin, 1, 0, 1).is_err());
    }

    #[test]
    fn absmaxmin_update_keeps_smaller_magnitude() {
        let mut s = SketchState::new(cfg(Variant::AbsMaxMin, 1, 1));
        s.update(WeightAddress(0), 0.5);
        s.update(WeightAddress(1), -0.2);
        assert_eq!(s.values()[0], -0.2);

        let mut s = SketchState::new(cfg(Variant::AbsMaxMin, 1, 1));
        s.update(WeightAddress(0), -0.1);
        s.update(WeightAddress(1), 0.8);
        assert_eq!(s.values()[0], -0.1);
    }

    #[test]
    fn absminmax_update_keeps_larger_magnitude() {
        let mut s = SketchState::new(cfg(Variant::AbsMinMax, 1, 1));
        s.update(WeightAddress(0), 0.5);
        s.update(WeightAddress(1), -0.8);
        assert_eq!(s.values()[0], -0.8);
    }

    #[test]
    fn countmin_update_is_additive() {
        let mut s = SketchState::new(cfg(Variant::CountMin, 1, 1));
        s.update(WeightAddress(0), 0.3);
        s.update(WeightAddress(1), -0.2);
        approx::assert_abs_diff_eq!(s.values()[0], 0.1, epsilon = 1e-7);
    }

    #[test]
    fn magnitude_tie_prefers_non_negative() {
        let mut s = SketchState::new(cfg(Variant::AbsMaxMin, 1, 1));
        s.update(WeightAddress(0), -0.5);
        s.update(WeightAddress(1), 0.5);
        assert_eq!(s.values()[0], 0.5);

        let mut s = SketchState::new(cfg(Variant::AbsMaxMin, 1, 1));
        s.update(WeightAddress(0), 0.5);
        s.update(WeightAddress(1), -0.5);
        assert_eq!(s.values()[0], 0.5);
    }

    // Signed zeros are a magnitude tie as well; either insertion order must
    // leave the positive zero in the cell.
    #[test]
    fn signed_zero_tie_is_order_independent() {
        for (first, second) in [(0.0f32, -0.0f32), (-0.0, 0.0)] {
            let mut s = SketchState::new(cfg(Variant::AbsMaxMin, 1, 1));
            s.update(WeightAddress(0), first);
            s.update(WeightAddress(1), second);
            assert_eq!(s.values()[0].to_bits(), 0.0f32.to_bits());
        }
    }

    #[test]
    fn retrieve_takes_max_magnitude_across_rows() {
        // Bonded cells {0.5, -0.1, 0.5} with M=3, one column per row.
        let config = cfg(Variant::AbsMaxMin, 3, 1);
        let state =
            SketchState::from_raw(config, vec![0.5, -0.1, 0.5], vec![true, true, true], 1).unwrap();
        assert_eq!(state.retrieve(WeightAddress(0)).unwrap(), 0.5);
        assert_eq!(state.selected_row(WeightAddress(0)).unwrap(), 0);
    }

    #[test]
    fn retrieve_tie_across_rows_prefers_non_negative() {
        let config = cfg(Variant::AbsMaxMin, 2, 1);
        let state = SketchState::from_raw(config, vec![-0.5, 0.5], vec![true, true], 1).unwrap();
        assert_eq!(state.retrieve(WeightAddress(0)).unwrap(), 0.5);
        assert_eq!(state.selected_row(WeightAddress(0)).unwrap(), 1);
    }

    // Hand trace with the identity-mod hash, M=1, 2 columns:
    // column 0 sees {0.5, 0.8} -> 0.5, column 1 sees {-0.2, -0.1} -> -0.1.
    #[test]
    fn absmaxmin_hand_trace() {
        let config = cfg(Variant::AbsMaxMin, 1, 2).with_test_hash();
        let weights = [0.5, -0.2, 0.8, -0.1];
        let state = compress_unit(&weights, &config).unwrap();
        let out = decompress_unit(&state, 4).unwrap();
        assert_eq!(out, vec![0.5, -0.1, 0.5, -0.1]);
    }

    #[test]
    fn injective_config_reproduces_weights_exactly() {
        let config = cfg(Variant::AbsMaxMin, 1, 8).with_test_hash();
        let weights = [0.5f32, -0.2, 0.0, -0.0, 3.25, -7.5];
        let state = compress_unit(&weights, &config).unwrap();
        let out = decompress_unit(&state, 6).unwrap();
        for (w, o) in weights.iter().zip(&out) {
            assert_eq!(w.to_bits(), o.to_bits());
        }
    }

    #[test]
    fn single_weight_retrieves_exactly() {
        for variant in [Variant::AbsMaxMin, Variant::AbsMinMax, Variant::CountMin] {
            let state = compress_unit(&[0.7], &cfg(variant, 3, 4)).unwrap();
            assert_eq!(state.retrieve(WeightAddress(0)).unwrap(), 0.7);
        }
    }

    #[test]
    fn compress_rejects_empty_and_non_finite() {
        let config = cfg(Variant::AbsMaxMin, 1, 4);
        assert!(matches!(compress_unit(&[], &config), Err(Error::EmptyUnit)));
        assert!(compress_unit(&[1.0, f32::NAN], &config).is_err());
        assert!(compress_unit(&[f32::INFINITY], &config).is_err());
    }

    #[test]
    fn decompress_count_must_match() {
        let state = compress_unit(&[1.0, 2.0], &cfg(Variant::AbsMaxMin, 1, 4)).unwrap();
        assert!(matches!(
            decompress_unit(&state, 3),
            Err(Error::CountMismatch {
                expected: 2,
                got: 3
            })
        ));
        assert!(matches!(
            decompress_unit(&state, 0),
            Err(Error::CountMismatch {
                expected: 2,
                got: 0
            })
        ));
    }

    #[test]
    fn retrieving_uninserted_address_is_an_error() {
        let state = compress_unit(&[1.0, 2.0], &cfg(Variant::AbsMaxMin, 1, 16)).unwrap();
        assert!(matches!(
            state.retrieve(WeightAddress(5)),
            Err(Error::NotInserted { addr: 5, count: 2 })
        ));
    }

    #[test]
    fn unoccupied_fraction_matches_collision_model() {
        // 10^5 items into m = k/2 columns, M=1: expect (1 - 1/m)^k ~ 13.53%.
        let k = 100_000usize;
        let m = 50_000u32;
        let weights: Vec<f32> = crate::dist::normal_f32(k, 7);
        let state = compress_unit(&weights, &cfg(Variant::AbsMaxMin, 1, m)).unwrap();
        let expected = crate::analysis::expected_unoccupied(k as u64, u64::from(m));
        let sd = (expected * (1.0 - expected) / f64::from(m)).sqrt();
        assert!(
            (state.unoccupied_fraction() - expected).abs() < 4.0 * sd,
            "measured {} vs model {}",
            state.unoccupied_fraction(),
            expected
        );
    }

    // Adding rows at fixed columns never widens the magnitude gap
    // |w| - |w'|: each row's cells are independent of the row count, and the
    // cross-row maximum only gains candidates, all still bounded by |w|.
    // (The signed distance |w - w'| is *not* monotone: an extra row can
    // surface an opposite-signed cell with larger magnitude.)
    #[test]
    fn extra_rows_shrink_magnitude_gap() {
        let weights: Vec<f32> = crate::dist::normal_f32(4096, 11);
        let columns = 512u32;
        let mut prev_gaps: Option<Vec<f64>> = None;
        for rows in 1..=3 {
            let state = compress_unit(&weights, &cfg(Variant::AbsMaxMin, rows, columns)).unwrap();
            let out = decompress_unit(&state, weights.len() as u64).unwrap();
            let gaps: Vec<f64> = weights
                .iter()
                .zip(&out)
                .map(|(w, o)| f64::from(w.abs()) - f64::from(o.abs()))
                .collect();
            if let Some(prev) = &prev_gaps {
                for (g_more_rows, g_fewer) in gaps.iter().zip(prev) {
                    assert!(g_more_rows <= g_fewer);
                }
            }
            prev_gaps = Some(gaps);
        }
    }

    proptest! {
        // |retrieve(w)| <= |w| for every inserted weight, any geometry.
        #[test]
        fn underestimate_holds(
            weights in prop::collection::vec(-10.0f32..10.0, 1..200),
            rows in 1usize..4,
            columns in 1u32..64,
            seed in any::<u64>(),
        ) {
            let config = SketchConfig::new(Variant::AbsMaxMin, rows, columns, seed).unwrap();
            let state = compress_unit(&weights, &config).unwrap();
            for (j, w) in weights.iter().enumerate() {
                let got = state.retrieve(WeightAddress(j as u64)).unwrap();
                prop_assert!(got.abs() <= w.abs());
            }
        }

        // Permuting the (addr, w) pairs yields a bit-identical state for the
        // min/max variants.
        #[test]
        fn state_is_order_independent(
            weights in prop::collection::vec(-10.0f32..10.0, 1..64),
            variant in prop::sample::select(vec![Variant::AbsMaxMin, Variant::AbsMinMax]),
            columns in 1u32..16,
            seed in any::<u64>(),
            shuffle_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;

            let config = SketchConfig::new(variant, 2, columns, seed).unwrap();
            let reference = compress_unit(&weights, &config).unwrap();

            let mut order: Vec<usize> = (0..weights.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed);
            order.shuffle(&mut rng);

            let mut permuted = SketchState::new(config);
            for &j in &order {
                permuted.update(WeightAddress(j as u64), weights[j]);
            }
            permuted.set_weight_count(weights.len() as u64);
            prop_assert_eq!(&reference, &permuted);
        }

        // CountMin summation reordered over exactly representable values
        // (multiples of 0.25 add without rounding in f32).
        #[test]
        fn countmin_order_independent_on_exact_values(
            quarters in prop::collection::vec(-64i32..64, 1..64),
            columns in 1u32..8,
            seed in any::<u64>(),
            shuffle_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;

            let weights: Vec<f32> = quarters.iter().map(|&q| q as f32 * 0.25).collect();
            let config = SketchConfig::new(Variant::CountMin, 2, columns, seed).unwrap();
            let reference = compress_unit(&weights, &config).unwrap();

            let mut order: Vec<usize> = (0..weights.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed);
            order.shuffle(&mut rng);

            let mut permuted = SketchState::new(config);
            for &j in &order {
                permuted.update(WeightAddress(j as u64), weights[j]);
            }
            permuted.set_weight_count(weights.len() as u64);
            prop_assert_eq!(&reference, &permuted);
        }
    }
}
