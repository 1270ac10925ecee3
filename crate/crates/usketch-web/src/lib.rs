//! Interactive browser demo: explore compression error against rate and
//! variant, watch the bucket-minimum bound hold, and race the finetuning
//! modes. Exported functions return JSON strings for a plain JS page to
//! plot; all heavy lifting stays in the core crate.

use wasm_bindgen::prelude::*;

use usketch::analysis::{compare_variants, error_lower_bound, report, verify_bound};
use usketch::dist::{normal_f32, normal_quantile, Distribution};
use usketch::finetune::{train, ModelShape, TrainConfig, TrainMode};
use usketch::quant::equivalent_bits;
use usketch::sketch::{compress_unit, decompress_unit, SketchConfig, Variant};

const SCATTER_POINTS: usize = 600;

#[derive(serde::Serialize)]
struct CompressionDemo {
    variant: &'static str,
    rows: usize,
    columns: u32,
    rate_elements: f64,
    equivalent_bits: f64,
    mean_relative_error: f64,
    max_relative_error: f64,
    sign_error_rate: f64,
    untouched_fraction: f64,
    unoccupied_fraction: f64,
    histogram: Vec<(String, u64)>,
    /// (original, retrieved) pairs for the scatter plot.
    scatter: Vec<(f32, f32)>,
}

fn compression_demo(
    n: usize,
    rate: f64,
    rows: usize,
    variant: &str,
    seed: u64,
) -> Result<String, String> {
    let variant = Variant::from_name(variant).ok_or("unknown variant")?;
    let n = n.clamp(256, 1 << 20);
    let columns = ((rate * n as f64 / rows as f64).round() as u32).max(1);
    let config = SketchConfig::new(variant, rows, columns, seed).map_err(|e| e.to_string())?;

    let weights = normal_f32(n, seed ^ 0x77);
    let state = compress_unit(&weights, &config).map_err(|e| e.to_string())?;
    let out = decompress_unit(&state, n as u64).map_err(|e| e.to_string())?;
    let r = report(&weights, &out, &state).map_err(|e| e.to_string())?;

    let stride = (n / SCATTER_POINTS).max(1);
    let scatter = weights
        .iter()
        .zip(&out)
        .step_by(stride)
        .take(SCATTER_POINTS)
        .map(|(&w, &o)| (w, o))
        .collect();

    let elements = config.elements();
    let demo = CompressionDemo {
        variant: variant.name(),
        rows,
        columns,
        rate_elements: elements as f64 / n as f64,
        equivalent_bits: equivalent_bits(
            elements,
            n as u64,
            usketch::quant::QuantBits::None,
            16,
            0,
        ),
        mean_relative_error: r.mean_relative_error,
        max_relative_error: r.max_relative_error,
        sign_error_rate: r.sign_error_rate,
        untouched_fraction: r.untouched_fraction,
        unoccupied_fraction: r.unoccupied_fraction,
        histogram: r.histogram.rows(),
        scatter,
    };
    serde_json::to_string(&demo).map_err(|e| e.to_string())
}

#[derive(serde::Serialize)]
struct VariantRow {
    variant: &'static str,
    mean_relative_error: f64,
    untouched_fraction: f64,
    sign_error_rate: f64,
}

fn variants_demo(n: usize, rate: f64, rows: usize, seed: u64) -> Result<String, String> {
    let n = n.clamp(256, 1 << 18);
    let columns = ((rate * n as f64 / rows as f64).round() as u32).max(1);
    let base =
        SketchConfig::new(Variant::AbsMaxMin, rows, columns, seed).map_err(|e| e.to_string())?;
    let weights = normal_f32(n, seed ^ 0x77);
    let rows = compare_variants(&weights, &base)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(variant, r)| VariantRow {
            variant: variant.name(),
            mean_relative_error: r.mean_relative_error,
            untouched_fraction: r.untouched_fraction,
            sign_error_rate: r.sign_error_rate,
        })
        .collect::<Vec<_>>();
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[derive(serde::Serialize)]
struct BoundDemo {
    p: f64,
    expected_load: f64,
    coverage: f64,
    buckets: usize,
    /// (load, bound) curve.
    curve: Vec<(u64, f64)>,
}

fn bound_demo(k: u64, m: u64, p: f64, buckets: usize, seed: u64) -> Result<String, String> {
    let check = verify_bound(
        &Distribution::Normal,
        k,
        m,
        p,
        buckets.clamp(1000, 100_000),
        seed,
    )
    .map_err(|e| e.to_string())?;
    let curve = (1..=24)
        .map(|load| error_lower_bound(p, load, normal_quantile).map(|bound| (load, bound)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let demo = BoundDemo {
        p,
        expected_load: check.expected_load,
        coverage: check.coverage,
        buckets: check.buckets,
        curve,
    };
    serde_json::to_string(&demo).map_err(|e| e.to_string())
}

#[derive(serde::Serialize)]
struct FinetuneDemo {
    mode: &'static str,
    state_elements: u64,
    compress_only_loss: f64,
    compress_only_rel_error: f64,
    final_loss: f64,
    final_rel_error: f64,
    loss: Vec<f64>,
    rel_error: Vec<f64>,
    rebonds: Vec<u64>,
}

fn finetune_demo(mode: &str, steps: usize, rate: f64, seed: u64) -> Result<String, String> {
    let mode = TrainMode::from_name(mode).ok_or("unknown mode")?;
    let mut config = TrainConfig::new(mode, steps.clamp(10, 3000));
    config.seed = seed;
    config.rate = rate;
    config.layer = 2;
    // Browser-friendly sizing.
    config.shape = ModelShape {
        input: 12,
        hidden: 32,
        output: 8,
    };
    config.batch = 64;
    config.pretrain_steps = 200;
    let run = train(&config).map_err(|e| e.to_string())?;
    let demo = FinetuneDemo {
        mode: mode.name(),
        state_elements: run.state_elements,
        compress_only_loss: run.compress_only_loss,
        compress_only_rel_error: run.compress_only_rel_error,
        final_loss: run.final_loss,
        final_rel_error: run.final_rel_error,
        loss: run.history.iter().map(|s| s.loss).collect(),
        rel_error: run.history.iter().map(|s| s.mean_rel_error).collect(),
        rebonds: run.history.iter().map(|s| s.binding_changes).collect(),
    };
    serde_json::to_string(&demo).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn explore_compression(
    n: u32,
    rate: f64,
    rows: u8,
    variant: &str,
    seed: u32,
) -> Result<String, JsValue> {
    compression_demo(
        n as usize,
        rate,
        rows.max(1) as usize,
        variant,
        u64::from(seed),
    )
    .map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn explore_variants(n: u32, rate: f64, rows: u8, seed: u32) -> Result<String, JsValue> {
    variants_demo(n as usize, rate, rows.max(1) as usize, u64::from(seed)).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn explore_bound(k: u32, m: u32, p: f64, buckets: u32, seed: u32) -> Result<String, JsValue> {
    bound_demo(
        u64::from(k),
        u64::from(m.max(1)),
        p,
        buckets as usize,
        u64::from(seed),
    )
    .map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn run_finetune(mode: &str, steps: u32, rate: f64, seed: u32) -> Result<String, JsValue> {
    finetune_demo(mode, steps as usize, rate, u64::from(seed)).map_err(JsValue::from)
}
