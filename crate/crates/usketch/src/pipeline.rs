//! End-to-end tensor compression: unit mapping, importance-driven column
//! allocation, optional exact outlier extraction, sketching and stacked
//! quantization.

use crate::analysis::{report, CompressionReport};
use crate::error::{Error, Result};
use crate::importance::{allocate_columns, split_topk_outliers, Granularity, ImportanceProfile};
use crate::io::{CompressedUnit, SketchContainer, TensorContainer, UnitPayload};
use crate::quant::{QuantBits, QuantSpec};
use crate::sketch::{compress_unit_excluding, SketchConfig, Variant, WeightAddress};

pub const DEFAULT_FLOOR: u32 = 16;

/// Everything that determines a compression run. With a fixed seed the
/// output container is byte-for-byte reproducible.
#[derive(Debug, Clone)]
pub struct CompressOptions {
    pub variant: Variant,
    pub rows: usize,
    pub seed: u64,
    /// Target state elements per original weight (e.g. 0.125 for 1/8).
    pub rate: f64,
    pub granularity: Granularity,
    /// Per-unit saliency; length must match the unit count. Uniform scores
    /// are used when absent (and always for `uniform` granularity).
    pub importance: Option<ImportanceProfile>,
    /// Optional quantile bucketing of the profile before allocation.
    pub importance_buckets: Option<usize>,
    pub quant: QuantSpec,
    /// Store this many largest-magnitude weights exactly, outside the
    /// sketch (whole-tensor top-k).
    pub topk: usize,
    /// Minimum columns per unit.
    pub floor: u32,
    pub test_hash: bool,
}

impl CompressOptions {
    pub fn new(rate: f64) -> Self {
        CompressOptions {
            variant: Variant::AbsMaxMin,
            rows: crate::sketch::DEFAULT_ROWS,
            seed: 42,
            rate,
            granularity: Granularity::Uniform,
            importance: None,
            importance_buckets: None,
            quant: QuantSpec::none(),
            topk: 0,
            floor: DEFAULT_FLOOR,
            test_hash: false,
        }
    }
}

/// Unit boundaries for a tensor under the chosen granularity: row makes
/// every leading-dimension slice a unit, layer and uniform take the whole
/// tensor as one unit.
fn unit_len(tensor: &TensorContainer, granularity: Granularity) -> Result<usize> {
    let total = tensor.element_count()? as usize;
    if total == 0 {
        return Err(Error::EmptyInput("tensor with zero elements"));
    }
    match granularity {
        Granularity::Row => {
            if tensor.dims.len() < 2 {
                return Err(Error::InvalidConfig(
                    "row granularity needs a tensor with at least 2 dimensions".into(),
                ));
            }
            Ok(total / tensor.dims[0] as usize)
        }
        Granularity::Layer | Granularity::Uniform => Ok(total),
    }
}

pub fn compress_tensor(
    tensor: &TensorContainer,
    opts: &CompressOptions,
) -> Result<SketchContainer> {
    if !opts.rate.is_finite() || opts.rate <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "rate must be positive, got {}",
            opts.rate
        )));
    }
    let total = tensor.element_count()? as usize;
    let per_unit = unit_len(tensor, opts.granularity)?;
    let units = total / per_unit;

    // Saliency profile driving the split of the column budget.
    let profile = match (opts.granularity, &opts.importance) {
        (Granularity::Uniform, _) | (_, None) => ImportanceProfile::uniform(units)?,
        (_, Some(p)) => {
            if p.scores.len() != units {
                return Err(Error::LengthMismatch {
                    left: p.scores.len(),
                    right: units,
                });
            }
            p.clone()
        }
    };
    let profile = match opts.importance_buckets {
        Some(b) => profile.quantile_bucketed(b)?,
        None => profile,
    };

    let element_budget = (opts.rate * total as f64).round() as u64;
    let column_budget = element_budget / opts.rows as u64;
    let plan = allocate_columns(&profile, column_budget, opts.floor)?;

    // Whole-tensor outlier split; addresses become unit-local below.
    let (outliers, _remainder) = split_topk_outliers(&tensor.data, opts.topk)?;
    let mut unit_outliers: Vec<Vec<(u32, f32)>> = vec![Vec::new(); units];
    for &(idx, value) in &outliers {
        let unit = idx as usize / per_unit;
        unit_outliers[unit].push(((idx as usize % per_unit) as u32, value));
    }
    for per_unit_list in &mut unit_outliers {
        per_unit_list.sort_by_key(|&(i, _)| i);
    }

    let mut compressed = Vec::with_capacity(units);
    for (u, unit_outliers) in unit_outliers.into_iter().enumerate() {
        let weights = &tensor.data[u * per_unit..(u + 1) * per_unit];
        let mut config =
            SketchConfig::new(opts.variant, opts.rows, plan.per_unit_columns[u], opts.seed)?;
        config.test_hash = opts.test_hash;
        // Outliers are stored exactly and kept out of the cells entirely:
        // removing large colliders can only raise the surviving minima.
        let excluded: Vec<u64> = unit_outliers.iter().map(|&(i, _)| u64::from(i)).collect();
        let state = compress_unit_excluding(weights, &config, &excluded)?;
        compressed.push(CompressedUnit {
            payload: UnitPayload::from_state(state, opts.quant)?,
            outliers: unit_outliers,
        });
    }

    Ok(SketchContainer {
        variant: opts.variant,
        rows: opts.rows,
        seed: opts.seed,
        test_hash: opts.test_hash,
        quant: opts.quant,
        dims: tensor.dims.clone(),
        units: compressed,
    })
}

/// Reconstruct the tensor: retrieve every non-outlier address through the
/// sketch rules, then overwrite the outlier positions with their exact
/// values.
pub fn decompress_tensor(container: &SketchContainer) -> Result<TensorContainer> {
    let mut data = Vec::with_capacity(container.total_weight_count() as usize);
    for unit in &container.units {
        let state = unit.payload.to_state()?;
        let count = unit.payload.weight_count();
        let mut out = vec![0.0f32; count as usize];
        let mut is_outlier = vec![false; count as usize];
        for &(idx, value) in &unit.outliers {
            if u64::from(idx) >= count {
                return Err(Error::MalformedContainer(format!(
                    "outlier index {idx} beyond unit of {count} weights"
                )));
            }
            is_outlier[idx as usize] = true;
            out[idx as usize] = value;
        }
        for (j, slot) in out.iter_mut().enumerate() {
            if !is_outlier[j] {
                *slot = state.retrieve(WeightAddress(j as u64))?;
            }
        }
        data.extend_from_slice(&out);
    }
    TensorContainer::new(container.dims.clone(), data)
}

/// Compression-rate accounting for a container.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RateReport {
    pub weight_count: u64,
    pub state_elements: u64,
    pub outliers: u64,
    /// State elements per original weight.
    pub rate_elements: f64,
    /// Serialized state bytes per original f32 byte.
    pub rate_bytes: f64,
    /// Storage bits per original weight against `base_width`-bit elements.
    pub equivalent_bits: f64,
    pub payload_bytes: u64,
    pub file_bytes: u64,
}

pub fn rate_report(container: &SketchContainer, base_width: u32) -> RateReport {
    let weight_count = container.total_weight_count();
    let state_elements = container.state_elements();
    let outliers = container.total_outliers();
    let payload_bytes = container.state_payload_bytes();
    RateReport {
        weight_count,
        state_elements,
        outliers,
        rate_elements: state_elements as f64 / weight_count as f64,
        rate_bytes: payload_bytes as f64 / (weight_count as f64 * 4.0),
        equivalent_bits: crate::quant::equivalent_bits(
            state_elements,
            weight_count,
            container.quant.bits,
            base_width,
            outliers,
        ),
        payload_bytes,
        file_bytes: container.serialized_size(),
    }
}

/// Round-trip quality report for a compressed tensor against its original.
pub fn tensor_report(
    original: &TensorContainer,
    container: &SketchContainer,
) -> Result<CompressionReport> {
    let reconstructed = decompress_tensor(container)?;
    if reconstructed.data.len() != original.data.len() {
        return Err(Error::LengthMismatch {
            left: original.data.len(),
            right: reconstructed.data.len(),
        });
    }
    // Pool the per-unit masks by summarizing over one merged view: build the
    // report against a synthetic state carrying the pooled occupancy.
    let mut merged = report_state(container)?;
    merged.quantized = container.quant.bits != QuantBits::None;
    let mut r = report(&original.data, &reconstructed.data, &merged.state)?;
    r.quantized = merged.quantized;
    Ok(r)
}

struct MergedView {
    state: crate::sketch::SketchState,
    quantized: bool,
}

/// A single state pooling every unit's occupancy, used only for mask
/// statistics in reports.
fn report_state(container: &SketchContainer) -> Result<MergedView> {
    let mut values = Vec::new();
    let mut occupied = Vec::new();
    for unit in &container.units {
        let state = unit.payload.to_state()?;
        values.extend_from_slice(state.values());
        occupied.extend_from_slice(state.occupied());
    }
    let columns = (values.len().max(1)) as u32;
    let config = SketchConfig::new(container.variant, 1, columns, container.seed)?;
    let state = crate::sketch::SketchState::from_raw(
        config,
        values,
        occupied,
        container.total_weight_count(),
    )?;
    Ok(MergedView {
        state,
        quantized: container.quant.bits != QuantBits::None,
    })
}
