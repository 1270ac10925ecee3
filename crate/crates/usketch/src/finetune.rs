//! Desk-scale demonstration that straight-through finetuning with a
//! multi-row sketch beats the aggregated-gradient single-row baseline.
//!
//! The model is a small dense network with hand-written gradients, trained
//! on a fixed synthetic regression task (a frozen random teacher network
//! labels a frozen input batch). One designated layer is compressed:
//!
//! * `ste_multirow` - the original weights stay trainable; every step they
//!   are compressed and immediately decompressed (fake compression), the
//!   forward pass uses the decompressed copy, and each original weight
//!   receives its decompressed counterpart's gradient unchanged.
//! * `aggregated_singlerow` - a single-row state holds the only trainable
//!   parameters for that layer; each shared cell receives the summed
//!   gradients of the weights bound to it. Bindings never move.
//! * `uncompressed` - plain SGD, for reference.
//!
//! Everything is seeded and sequential, so runs are bit-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sketch::{compress_unit, decompress_unit, SketchConfig, Variant, WeightAddress};

/// Fully connected layer, weights `fan_out x fan_in` row-major.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl DenseLayer {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // Xavier-uniform, sampled in f32 so parameters start exactly
        // representable in the sketch's element type.
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| f64::from(rng.random_range(-bound..bound) as f32))
            .collect();
        DenseLayer {
            weights,
            bias: vec![0.0; fan_out],
            fan_in,
            fan_out,
        }
    }

    pub fn weights_f32(&self) -> Vec<f32> {
        self.weights.iter().map(|&w| w as f32).collect()
    }
}

/// Two-hidden-layer dense network (tanh activations, linear output).
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
}

/// Layer widths of the demo network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ModelShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            input: 16,
            hidden: 48,
            output: 8,
        }
    }
}

impl ToyModel {
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [shape.input, shape.hidden, shape.hidden, shape.output];
        let layers = dims
            .windows(2)
            .map(|d| DenseLayer::init(d[0], d[1], &mut rng))
            .collect();
        ToyModel { layers, seed }
    }

    pub fn layer_weight_count(&self, layer: usize) -> usize {
        self.layers[layer].weights.len()
    }

    /// Forward pass over a batch, keeping per-layer activations for
    /// backprop. `override_weights` substitutes one layer's weight matrix
    /// (the fake-compressed copy) without touching the model.
    fn forward(
        &self,
        inputs: &[f64],
        batch: usize,
        override_weights: Option<(usize, &[f64])>,
    ) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = vec![inputs.to_vec()];
        for (l, layer) in self.layers.iter().enumerate() {
            let weights = match override_weights {
                Some((ol, w)) if ol == l => w,
                _ => &layer.weights,
            };
            let prev = &acts[l];
            let mut out = vec![0.0f64; batch * layer.fan_out];
            for b in 0..batch {
                let x = &prev[b * layer.fan_in..(b + 1) * layer.fan_in];
                let y = &mut out[b * layer.fan_out..(b + 1) * layer.fan_out];
                for (o, y_o) in y.iter_mut().enumerate() {
                    let row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut acc = layer.bias[o];
                    for (w, xv) in row.iter().zip(x) {
                        acc += w * xv;
                    }
                    // Hidden layers squash, the last layer stays linear.
                    *y_o = if l + 1 == self.layers.len() {
                        acc
                    } else {
                        acc.tanh()
                    };
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Mean squared error of the (optionally overridden) forward pass.
    pub fn loss(&self, task: &RegressionTask, override_weights: Option<(usize, &[f64])>) -> f64 {
        let acts = self.forward(&task.inputs, task.batch, override_weights);
        mse(acts.last().expect("output layer"), &task.targets)
    }

    /// Loss gradient w.r.t. `layer`'s substituted weight matrix — the vector
    /// the straight-through estimator passes back to the originals.
    pub fn layer_weight_gradients(
        &self,
        task: &RegressionTask,
        layer: usize,
        substituted: &[f64],
    ) -> Vec<f64> {
        let mut grads = self.gradients(task, Some((layer, substituted)));
        grads.swap_remove(layer).weights
    }

    /// Gradients of the MSE loss for every layer (weights and biases),
    /// evaluated with `override_weights` substituted in the forward and
    /// backward passes.
    fn gradients(
        &self,
        task: &RegressionTask,
        override_weights: Option<(usize, &[f64])>,
    ) -> Vec<LayerGrad> {
        let batch = task.batch;
        let acts = self.forward(&task.inputs, batch, override_weights);
        let output = acts.last().expect("output layer");

        // dL/dz for the current layer, walking backwards.
        let norm = 2.0 / task.targets.len() as f64;
        let mut delta: Vec<f64> = output
            .iter()
            .zip(&task.targets)
            .map(|(o, t)| norm * (o - t))
            .collect();

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let weights = match override_weights {
                Some((ol, w)) if ol == l => w,
                _ => &layer.weights,
            };
            let prev = &acts[l];
            let mut gw = vec![0.0f64; layer.fan_in * layer.fan_out];
            let mut gb = vec![0.0f64; layer.fan_out];
            for b in 0..batch {
                let x = &prev[b * layer.fan_in..(b + 1) * layer.fan_in];
                let d = &delta[b * layer.fan_out..(b + 1) * layer.fan_out];
                for (o, &d_o) in d.iter().enumerate() {
                    gb[o] += d_o;
                    let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (g, xv) in row.iter_mut().zip(x) {
                        *g += d_o * xv;
                    }
                }
            }
            if l > 0 {
                // Propagate through W and the tanh of the layer below.
                let mut next = vec![0.0f64; batch * layer.fan_in];
                for b in 0..batch {
                    let d = &delta[b * layer.fan_out..(b + 1) * layer.fan_out];
                    let a = &acts[l][b * layer.fan_in..(b + 1) * layer.fan_in];
                    let nx = &mut next[b * layer.fan_in..(b + 1) * layer.fan_in];
                    for (o, &d_o) in d.iter().enumerate() {
                        let row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for (i, w) in row.iter().enumerate() {
                            nx[i] += d_o * w;
                        }
                    }
                    for (n, a_v) in nx.iter_mut().zip(a) {
                        *n *= 1.0 - a_v * a_v;
                    }
                }
                delta = next;
            }
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        grads
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn mse(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / target.len() as f64
}

/// Frozen synthetic regression batch: inputs drawn once, targets produced by
/// a frozen random teacher of the same shape.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub batch: usize,
    pub shape: ModelShape,
}

impl RegressionTask {
    pub fn synthetic(shape: ModelShape, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<f64> = (0..batch * shape.input)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let teacher = ToyModel::init(shape, seed.wrapping_add(0x7eac_4e11));
        let targets = teacher.forward(&inputs, batch, None).pop().expect("output");
        RegressionTask {
            inputs,
            targets,
            batch,
            shape,
        }
    }

    /// A task the given model solves exactly (its own outputs as targets);
    /// the unperturbed loss is zero, so any perturbation delta is a clean
    /// non-negative saliency signal.
    pub fn labeled_by(model: &ToyModel, shape: ModelShape, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<f64> = (0..batch * shape.input)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let targets = model.forward(&inputs, batch, None).pop().expect("output");
        RegressionTask {
            inputs,
            targets,
            batch,
            shape,
        }
    }
}

/// Compress-then-decompress one layer's weights through the sketch, no
/// gradient tracked: returns the loss under the perturbed weights plus the
/// decompressed copy itself.
pub fn fake_compress_forward(
    model: &ToyModel,
    task: &RegressionTask,
    layer: usize,
    config: &SketchConfig,
) -> Result<(f64, Vec<f32>)> {
    if layer >= model.layers.len() {
        return Err(Error::IndexOutOfRange {
            index: layer,
            limit: model.layers.len(),
        });
    }
    let w32 = model.layers[layer].weights_f32();
    let state = compress_unit(&w32, config)?;
    let decompressed = decompress_unit(&state, w32.len() as u64)?;
    let used: Vec<f64> = decompressed.iter().map(|&w| f64::from(w)).collect();
    Ok((model.loss(task, Some((layer, &used))), decompressed))
}

/// Straight-through estimator: the original weight takes its decompressed
/// counterpart's gradient unchanged.
pub fn ste_backward(grad_wrt_decompressed: &[f64]) -> Vec<f64> {
    grad_wrt_decompressed.to_vec()
}

/// Aggregated-gradient baseline: shared cell `s` accumulates the sum of the
/// gradients of all member weights mapped to it.
pub fn aggregated_backward(
    member_grads: &[f64],
    mapping: &[u32],
    shared_len: usize,
) -> Result<Vec<f64>> {
    if member_grads.len() != mapping.len() {
        return Err(Error::LengthMismatch {
            left: member_grads.len(),
            right: mapping.len(),
        });
    }
    let mut shared = vec![0.0f64; shared_len];
    for (&g, &s) in member_grads.iter().zip(mapping) {
        let s = s as usize;
        if s >= shared_len {
            return Err(Error::IndexOutOfRange {
                index: s,
                limit: shared_len,
            });
        }
        shared[s] += g;
    }
    Ok(shared)
}

/// Loss degradation from sketch-compressing one layer of `model`, holding
/// everything else fixed.
pub fn layer_perturbation(
    model: &ToyModel,
    task: &RegressionTask,
    layer: usize,
    config: &SketchConfig,
) -> Result<f64> {
    let mut failure: Option<Error> = None;
    let delta = crate::importance::perturbation_importance(
        |compressed| match compressed {
            None => model.loss(task, None),
            Some(l) => match fake_compress_forward(model, task, l, config) {
                Ok((loss, _)) => loss,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            },
        },
        layer,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(delta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum TrainMode {
    SteMultirow,
    AggregatedSinglerow,
    Uncompressed,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::SteMultirow => "ste",
            TrainMode::AggregatedSinglerow => "aggregated",
            TrainMode::Uncompressed => "uncompressed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ste" => Some(TrainMode::SteMultirow),
            "aggregated" => Some(TrainMode::AggregatedSinglerow),
            "uncompressed" => Some(TrainMode::Uncompressed),
            _ => None,
        }
    }
}

/// Training setup. `rate` and `rows` size the sketch for the designated
/// layer; the aggregated baseline always runs one row over the identical
/// element budget.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub shape: ModelShape,
    pub batch: usize,
    /// Initial learning rate; decays linearly to zero over `steps`.
    pub lr: f64,
    pub seed: u64,
    pub rate: f64,
    pub rows: usize,
    pub layer: usize,
    /// Uncompressed warm-up steps fitting the model to the task first.
    pub pretrain_steps: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, steps: usize) -> Self {
        TrainConfig {
            mode,
            steps,
            shape: ModelShape::default(),
            batch: 128,
            lr: 1e-2,
            seed: 42,
            rate: 0.5,
            rows: 3,
            layer: 2,
            pretrain_steps: 400,
        }
    }
}

/// Per-step record: training loss, mean relative error of the compressed
/// layer, and how many weights changed their selected sketch row since the
/// previous step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub mean_rel_error: f64,
    pub binding_changes: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainRun {
    pub mode: TrainMode,
    pub steps: usize,
    pub history: Vec<StepStats>,
    pub final_loss: f64,
    pub final_rel_error: f64,
    /// Sketch state elements used by the compressed layer (fairness knob).
    pub state_elements: u64,
    /// Loss of the pretrained model with the layer compressed but untrained.
    pub compress_only_loss: f64,
    pub compress_only_rel_error: f64,
}

fn mean_rel_error_f32(original: &[f32], used: &[f32]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0u64;
    for (&w, &u) in original.iter().zip(used) {
        if w != 0.0 {
            sum += (f64::from(w) - f64::from(u)).abs() / f64::from(w.abs());
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn sgd_step(model: &mut ToyModel, grads: &[LayerGrad], lr: f64, skip_layer: Option<usize>) {
    for (l, (layer, grad)) in model.layers.iter_mut().zip(grads).enumerate() {
        if skip_layer != Some(l) {
            for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
                *w -= lr * g;
            }
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

/// Run the demo: pretrain uncompressed, then finetune in the chosen mode
/// with a linearly decaying learning rate. Errors out if the loss ever
/// leaves the finite range.
pub fn train(config: &TrainConfig) -> Result<TrainRun> {
    if config.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    if config.layer >= 3 {
        return Err(Error::IndexOutOfRange {
            index: config.layer,
            limit: 3,
        });
    }
    let task = RegressionTask::synthetic(config.shape, config.batch, config.seed ^ 0x7a5c);
    let mut model = ToyModel::init(config.shape, config.seed);

    // Shared warm-up so every mode starts from the same fitted model.
    for _ in 0..config.pretrain_steps {
        let grads = model.gradients(&task, None);
        sgd_step(&mut model, &grads, config.lr, None);
    }

    let k = model.layer_weight_count(config.layer);
    let rows = match config.mode {
        TrainMode::AggregatedSinglerow => 1,
        _ => config.rows,
    };
    // Identical element budget across modes: multi-row splits it into
    // rows x columns, the single-row baseline gets one wide row.
    let ste_columns =
        (((config.rate * k as f64).round() as u64) / config.rows as u64).max(1) as u32;
    let state_elements = u64::from(ste_columns) * config.rows as u64;
    let columns = match config.mode {
        TrainMode::AggregatedSinglerow => state_elements as u32,
        _ => ste_columns,
    };
    let sketch_config = SketchConfig::new(Variant::AbsMaxMin, rows, columns, config.seed ^ 0x5be7)?;

    let pretrained_w32 = model.layers[config.layer].weights_f32();
    let (compress_only_loss, compress_only_used) =
        fake_compress_forward(&model, &task, config.layer, &sketch_config)?;
    let compress_only_rel_error = mean_rel_error_f32(&pretrained_w32, &compress_only_used);

    // Aggregated baseline: fixed single-row bindings, shared cells
    // initialized from the sketch of the pretrained weights.
    let initial_state = compress_unit(&pretrained_w32, &sketch_config)?;
    let mapping: Vec<u32> = {
        let family =
            crate::hash::HashFamily::new(sketch_config.seed, rows, sketch_config.test_hash);
        (0..k as u64).map(|j| family.index(0, j, columns)).collect()
    };
    let mut shared: Vec<f64> = initial_state
        .values()
        .iter()
        .map(|&v| f64::from(v))
        .collect();

    let mut history = Vec::with_capacity(config.steps);
    let mut prev_bindings: Option<Vec<u8>> = None;

    for step in 0..config.steps {
        let lr = config.lr * (1.0 - step as f64 / config.steps as f64);
        let stats = match config.mode {
            TrainMode::Uncompressed => {
                let grads = model.gradients(&task, None);
                let loss = model.loss(&task, None);
                sgd_step(&mut model, &grads, lr, None);
                StepStats {
                    loss,
                    mean_rel_error: 0.0,
                    binding_changes: 0,
                }
            }
            TrainMode::SteMultirow => {
                let w32 = model.layers[config.layer].weights_f32();
                let state = compress_unit(&w32, &sketch_config)?;
                let decompressed = decompress_unit(&state, k as u64)?;
                let used: Vec<f64> = decompressed.iter().map(|&w| f64::from(w)).collect();

                let bindings: Vec<u8> = (0..k as u64)
                    .map(|j| state.selected_row(WeightAddress(j)))
                    .collect::<Result<_>>()?;
                let binding_changes = prev_bindings
                    .as_ref()
                    .map(|prev| prev.iter().zip(&bindings).filter(|(a, b)| a != b).count() as u64)
                    .unwrap_or(0);
                prev_bindings = Some(bindings);

                let grads = model.gradients(&task, Some((config.layer, &used)));
                let loss = model.loss(&task, Some((config.layer, &used)));
                // Gradient w.r.t. the decompressed weights passes straight
                // through the discrete mapping onto the originals.
                let passed = ste_backward(&grads[config.layer].weights);
                for (w, g) in model.layers[config.layer].weights.iter_mut().zip(&passed) {
                    *w -= lr * g;
                }
                sgd_step(&mut model, &grads, lr, Some(config.layer));
                StepStats {
                    loss,
                    mean_rel_error: mean_rel_error_f32(&w32, &decompressed),
                    binding_changes,
                }
            }
            TrainMode::AggregatedSinglerow => {
                // The mapped cells are the only trainable parameters; the
                // rest of the network stays at its pretrained values.
                let used: Vec<f64> = mapping.iter().map(|&s| shared[s as usize]).collect();
                let grads = model.gradients(&task, Some((config.layer, &used)));
                let loss = model.loss(&task, Some((config.layer, &used)));
                let shared_grad =
                    aggregated_backward(&grads[config.layer].weights, &mapping, shared.len())?;
                for (s, g) in shared.iter_mut().zip(&shared_grad) {
                    *s -= lr * g;
                }
                let used32: Vec<f32> = used.iter().map(|&u| u as f32).collect();
                StepStats {
                    loss,
                    mean_rel_error: mean_rel_error_f32(&pretrained_w32, &used32),
                    binding_changes: 0,
                }
            }
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        history.push(stats);
    }

    // Final metrics after the last update.
    let (final_loss, final_rel_error) = match config.mode {
        TrainMode::Uncompressed => (model.loss(&task, None), 0.0),
        TrainMode::SteMultirow => {
            let w32 = model.layers[config.layer].weights_f32();
            let state = compress_unit(&w32, &sketch_config)?;
            let decompressed = decompress_unit(&state, k as u64)?;
            let used: Vec<f64> = decompressed.iter().map(|&w| f64::from(w)).collect();
            (
                model.loss(&task, Some((config.layer, &used))),
                mean_rel_error_f32(&w32, &decompressed),
            )
        }
        TrainMode::AggregatedSinglerow => {
            let used: Vec<f64> = mapping.iter().map(|&s| shared[s as usize]).collect();
            let used32: Vec<f32> = used.iter().map(|&u| u as f32).collect();
            (
                model.loss(&task, Some((config.layer, &used))),
                mean_rel_error_f32(&pretrained_w32, &used32),
            )
        }
    };

    Ok(TrainRun {
        mode: config.mode,
        steps: config.steps,
        history,
        final_loss,
        final_rel_error,
        state_elements,
        compress_only_loss,
        compress_only_rel_error,
    })
}

/// Peak inference memory under layer-by-layer decompression: all sketch
/// states stay resident while only the active layer's full weights exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct MemoryEstimate {
    /// `sum(sketch_bytes) + max(layer_bytes)`.
    pub peak: u64,
    /// `sum(layer_bytes)`: everything resident at once.
    pub baseline: u64,
}

pub fn peak_memory_estimate(layer_bytes: &[u64], sketch_bytes: &[u64]) -> Result<MemoryEstimate> {
    if layer_bytes.is_empty() {
        return Err(Error::EmptyInput("layer sizes"));
    }
    if layer_bytes.len() != sketch_bytes.len() {
        return Err(Error::LengthMismatch {
            left: layer_bytes.len(),
            right: sketch_bytes.len(),
        });
    }
    if layer_bytes.iter().chain(sketch_bytes).any(|&b| b == 0) {
        return Err(Error::InvalidConfig(
            "layer and sketch sizes must be positive".into(),
        ));
    }
    Ok(MemoryEstimate {
        peak: sketch_bytes.iter().sum::<u64>() + layer_bytes.iter().max().copied().unwrap_or(0),
        baseline: layer_bytes.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_task_and_model() -> (RegressionTask, ToyModel) {
        let shape = ModelShape {
            input: 8,
            hidden: 8,
            output: 4,
        };
        (
            RegressionTask::synthetic(shape, 32, 5),
            ToyModel::init(shape, 6),
        )
    }

    fn injective_config(k: usize) -> SketchConfig {
        SketchConfig::new(Variant::AbsMaxMin, 1, k as u32, 1)
            .unwrap()
            .with_test_hash()
    }

    #[test]
    fn injective_fake_compress_is_lossless() {
        let (task, model) = small_task_and_model();
        let k = model.layer_weight_count(1);
        let (loss, decompressed) =
            fake_compress_forward(&model, &task, 1, &injective_config(k)).unwrap();
        // Initialization is f32-exact, so the cast-compress-decompress-cast
        // path returns the weights bit for bit and the losses coincide.
        assert_eq!(loss, model.loss(&task, None));
        for (w, d) in model.layers[1].weights.iter().zip(&decompressed) {
            assert_eq!(*w, f64::from(*d));
        }
    }

    #[test]
    fn fake_compress_is_deterministic() {
        let (task, model) = small_task_and_model();
        let config = SketchConfig::new(Variant::AbsMaxMin, 3, 8, 3).unwrap();
        let (a, _) = fake_compress_forward(&model, &task, 1, &config).unwrap();
        let (b, _) = fake_compress_forward(&model, &task, 1, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fake_compress_validates_layer() {
        let (task, model) = small_task_and_model();
        assert!(fake_compress_forward(&model, &task, 9, &injective_config(4)).is_err());
    }

    #[test]
    fn ste_backward_is_identity() {
        let grads = vec![0.5, -0.125, 0.0, 3.5];
        assert_eq!(ste_backward(&grads), grads);
        assert_eq!(ste_backward(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn aggregated_backward_sums_members() {
        // Two members sharing slot 0: 0.1 + (-0.3) = -0.2.
        let shared = aggregated_backward(&[0.1, -0.3], &[0, 0], 2).unwrap();
        assert_abs_diff_eq!(shared[0], -0.2, epsilon = 1e-15);
        assert_eq!(shared[1], 0.0);

        // Injective mapping is the identity.
        let grads = [0.25, -1.5, 3.0];
        let shared = aggregated_backward(&grads, &[0, 1, 2], 3).unwrap();
        assert_eq!(shared, grads.to_vec());

        assert!(aggregated_backward(&[1.0], &[0, 1], 2).is_err());
        assert!(aggregated_backward(&[1.0], &[5], 2).is_err());
    }

    // Central-difference oracle for the full backward pass: perturb the
    // decompressed weights directly; the analytic gradient w.r.t. them must
    // match (this is the gradient STE passes through).
    #[test]
    fn ste_gradient_matches_finite_differences() {
        let (task, model) = small_task_and_model();
        let layer = 1;
        let config = SketchConfig::new(Variant::AbsMaxMin, 2, 16, 3).unwrap();
        let w32 = model.layers[layer].weights_f32();
        let state = compress_unit(&w32, &config).unwrap();
        let mut used: Vec<f64> = decompress_unit(&state, w32.len() as u64)
            .unwrap()
            .iter()
            .map(|&w| f64::from(w))
            .collect();

        let grads = model.gradients(&task, Some((layer, &used)));
        let analytic = ste_backward(&grads[layer].weights);

        let h = 1e-4;
        for j in 0..used.len() {
            let orig = used[j];
            used[j] = orig + h;
            let up = model.loss(&task, Some((layer, &used)));
            used[j] = orig - h;
            let down = model.loss(&task, Some((layer, &used)));
            used[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[j] - numeric).abs() / denom < 1e-4,
                "weight {j}: analytic {} vs numeric {numeric}",
                analytic[j]
            );
        }
    }

    // Same oracle for the aggregated mode: perturb one shared cell; its
    // gradient is the sum over bound members.
    #[test]
    fn aggregated_gradient_matches_finite_differences() {
        let (task, model) = small_task_and_model();
        let layer = 1;
        let k = model.layer_weight_count(layer);
        let columns = 16u32;
        let config = SketchConfig::new(Variant::AbsMaxMin, 1, columns, 3).unwrap();
        let state = compress_unit(&model.layers[layer].weights_f32(), &config).unwrap();
        let family = crate::hash::HashFamily::new(config.seed, 1, false);
        let mapping: Vec<u32> = (0..k as u64).map(|j| family.index(0, j, columns)).collect();
        let mut shared: Vec<f64> = state.values().iter().map(|&v| f64::from(v)).collect();

        let used: Vec<f64> = mapping.iter().map(|&s| shared[s as usize]).collect();
        let grads = model.gradients(&task, Some((layer, &used)));
        let analytic = aggregated_backward(&grads[layer].weights, &mapping, shared.len()).unwrap();

        let h = 1e-4;
        for s in 0..shared.len() {
            let orig = shared[s];
            shared[s] = orig + h;
            let used: Vec<f64> = mapping.iter().map(|&c| shared[c as usize]).collect();
            let up = model.loss(&task, Some((layer, &used)));
            shared[s] = orig - h;
            let used: Vec<f64> = mapping.iter().map(|&c| shared[c as usize]).collect();
            let down = model.loss(&task, Some((layer, &used)));
            shared[s] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[s].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[s] - numeric).abs() / denom < 1e-4,
                "cell {s}: analytic {} vs numeric {numeric}",
                analytic[s]
            );
        }
    }

    #[test]
    fn uncompressed_training_reduces_loss() {
        let mut config = TrainConfig::new(TrainMode::Uncompressed, 150);
        config.shape = ModelShape {
            input: 8,
            hidden: 16,
            output: 4,
        };
        config.batch = 32;
        config.pretrain_steps = 0;
        let run = train(&config).unwrap();
        assert!(run.final_loss <= run.history[0].loss);
        assert!(run.history.iter().all(|s| s.loss.is_finite()));
        assert_eq!(run.history.len(), 150);
    }

    #[test]
    fn compression_raises_loss_on_a_fitted_model() {
        let mut config = TrainConfig::new(TrainMode::SteMultirow, 1);
        config.shape = ModelShape {
            input: 8,
            hidden: 16,
            output: 4,
        };
        config.batch = 32;
        config.rate = 0.5;
        config.pretrain_steps = 300;
        let run = train(&config).unwrap();
        // The fitted model pays for the perturbation at step 0.
        assert!(run.compress_only_loss > 0.0);
        assert!(run.compress_only_rel_error > 0.0);
    }

    #[test]
    fn training_is_reproducible() {
        let mut config = TrainConfig::new(TrainMode::SteMultirow, 20);
        config.shape = ModelShape {
            input: 8,
            hidden: 12,
            output: 4,
        };
        config.batch = 16;
        config.pretrain_steps = 20;
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.mean_rel_error.to_bits(), y.mean_rel_error.to_bits());
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let mut config = TrainConfig::new(TrainMode::Uncompressed, 400);
        config.shape = ModelShape {
            input: 8,
            hidden: 16,
            output: 4,
        };
        config.batch = 16;
        config.lr = 1e4;
        config.pretrain_steps = 0;
        match train(&config) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn equal_memory_between_modes() {
        let mut config = TrainConfig::new(TrainMode::SteMultirow, 5);
        config.shape = ModelShape {
            input: 8,
            hidden: 12,
            output: 4,
        };
        config.batch = 16;
        config.pretrain_steps = 10;
        let ste = train(&config).unwrap();
        config.mode = TrainMode::AggregatedSinglerow;
        let agg = train(&config).unwrap();
        assert_eq!(ste.state_elements, agg.state_elements);
    }

    #[test]
    fn underestimate_persists_during_ste_training() {
        let shape = ModelShape {
            input: 8,
            hidden: 12,
            output: 4,
        };
        let task = RegressionTask::synthetic(shape, 16, 9);
        let mut model = ToyModel::init(shape, 10);
        let config = SketchConfig::new(Variant::AbsMaxMin, 3, 12, 4).unwrap();
        for _ in 0..30 {
            let w32 = model.layers[1].weights_f32();
            let state = compress_unit(&w32, &config).unwrap();
            let dec = decompress_unit(&state, w32.len() as u64).unwrap();
            for (w, d) in w32.iter().zip(&dec) {
                assert!(d.abs() <= w.abs());
            }
            let used: Vec<f64> = dec.iter().map(|&w| f64::from(w)).collect();
            let grads = model.gradients(&task, Some((1, &used)));
            sgd_step(&mut model, &grads, 1e-2, None);
        }
    }

    // Two variants of the same network, one with a dominant compressed
    // layer, one with that layer shrunk to near zero. Each labels its own
    // task (baseline loss is exactly zero), so the perturbation delta
    // isolates how much the compressed layer matters.
    #[test]
    fn dominant_layer_ranks_higher_under_perturbation() {
        let shape = ModelShape {
            input: 8,
            hidden: 16,
            output: 4,
        };
        let mut dominant = ToyModel::init(shape, 4);
        for w in &mut dominant.layers[1].weights {
            *w *= 2.0;
        }
        let mut quiet = ToyModel::init(shape, 4);
        for w in &mut quiet.layers[1].weights {
            *w *= 1e-3;
        }

        let k1 = dominant.layer_weight_count(1);
        let c1 = SketchConfig::new(Variant::AbsMaxMin, 1, (k1 / 8) as u32, 7).unwrap();

        let task_d = RegressionTask::labeled_by(&dominant, shape, 64, 3);
        let delta_dominant = layer_perturbation(&dominant, &task_d, 1, &c1).unwrap();

        let task_q = RegressionTask::labeled_by(&quiet, shape, 64, 3);
        let delta_quiet = layer_perturbation(&quiet, &task_q, 1, &c1).unwrap();

        assert!(delta_dominant >= 0.0 && delta_quiet >= 0.0);
        assert!(
            delta_dominant > delta_quiet,
            "dominant {delta_dominant} vs quiet {delta_quiet}"
        );

        // Injective compression perturbs nothing.
        let injective = injective_config(k1);
        let zero = layer_perturbation(&dominant, &task_d, 1, &injective).unwrap();
        assert_eq!(zero, 0.0);

        // Bit-exact reproducibility for a fixed seed.
        let again = layer_perturbation(&dominant, &task_d, 1, &c1).unwrap();
        assert_eq!(delta_dominant.to_bits(), again.to_bits());
    }

    #[test]
    fn memory_estimate_arithmetic() {
        let e = peak_memory_estimate(&[100, 100], &[50, 50]).unwrap();
        assert_eq!(e.peak, 200);
        assert_eq!(e.baseline, 200);

        let e = peak_memory_estimate(&[100, 100], &[12, 12]).unwrap();
        assert_eq!(e.peak, 124);
        assert_eq!(e.baseline, 200);

        // A single layer with sketch as large as the layer doubles it.
        let e = peak_memory_estimate(&[100], &[100]).unwrap();
        assert_eq!(e.peak, 200);

        assert!(peak_memory_estimate(&[], &[]).is_err());
        assert!(peak_memory_estimate(&[1, 2], &[1]).is_err());
        assert!(peak_memory_estimate(&[1, 0], &[1, 1]).is_err());
    }
}
