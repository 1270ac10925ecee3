//! Command-line interface: compress / decompress / stats / bound / compare /
//! importance / demo-finetune / memest, plus a tiny tensor generator.
//!
//! Every command is deterministic for fixed flags and seeds: identical
//! invocations produce byte-identical output files.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::finetune::{self, TrainConfig, TrainMode};
use crate::importance::{activation_importance, layer_importance, Granularity};
use crate::io;
use crate::pipeline::{self, CompressOptions};
use crate::quant::{QuantBits, QuantSpec};
use crate::sketch::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "usketch",
    version,
    about = "Index-free weight compression with a multi-row underestimate sketch"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compress a tensor into a sketch container.
    Compress(CompressArgs),
    /// Reconstruct the tensor stored in a sketch container.
    Decompress {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Round-trip quality and rate statistics for a compressed tensor.
    Stats {
        /// The original tensor (.ust).
        #[arg(long)]
        original: PathBuf,
        /// The compressed container (.usk).
        #[arg(long)]
        compressed: PathBuf,
        /// Element width the equivalent-bits figure is measured against.
        #[arg(long, default_value_t = 16)]
        base_width: u32,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Probabilistic lower bound on bucket minima, with Monte Carlo coverage.
    Bound {
        /// Target probability in (0, 1).
        #[arg(long)]
        p: f64,
        /// Weight distribution: normal, laplace or empirical.
        #[arg(long, default_value = "normal")]
        dist: String,
        /// Scale parameter for the laplace distribution.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Tensor providing samples for the empirical distribution.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Inserted element count.
        #[arg(short, long)]
        k: u64,
        /// Bucket count.
        #[arg(short, long)]
        m: u64,
        /// Occupied buckets to sample.
        #[arg(long, default_value_t = 20_000)]
        buckets: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Compress with each sketch variant at equal memory and report quality.
    Compare {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        /// Sketch rows (the variant study default is a single row).
        #[arg(long, default_value_t = 1)]
        rows: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Mean squared activation per input dimension, written as a 1-D profile.
    Importance {
        /// N x d activation samples (.ust).
        #[arg(long)]
        activations: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Straight-through finetuning demonstration on the toy regression task.
    DemoFinetune {
        /// ste, aggregated or uncompressed.
        #[arg(long, default_value = "ste")]
        mode: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        #[arg(long, default_value_t = 3)]
        rows: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        /// Which layer to compress (0, 1 or 2).
        #[arg(long, default_value_t = 2)]
        layer: usize,
        /// Print a history row every this many steps.
        #[arg(long, default_value_t = 100)]
        every: usize,
    },
    /// Peak-memory model for layer-by-layer decompression.
    Memest {
        /// Per-layer weight bytes, comma separated.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<u64>,
        /// Per-layer sketch state bytes, comma separated.
        #[arg(long, value_delimiter = ',')]
        sketches: Vec<u64>,
    },
    /// Generate a standard-normal tensor (demo input).
    Gen {
        /// Tensor shape, comma separated (e.g. 256,1024).
        #[arg(long, value_delimiter = ',')]
        dims: Vec<u64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// State elements per weight (e.g. 0.125 for 1/8 compression).
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 3)]
    pub rows: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// absmaxmin, absminmax or countmin.
    #[arg(long, default_value = "absmaxmin")]
    pub variant: String,
    /// uniform, row or layer.
    #[arg(long, default_value = "uniform")]
    pub granularity: String,
    /// Importance profile (1-D tensor, one score per unit).
    #[arg(long)]
    pub importance: Option<PathBuf>,
    /// Coarsen the profile into this many quantile buckets first.
    #[arg(long)]
    pub importance_buckets: Option<usize>,
    /// none, q8 or q4.
    #[arg(long, default_value = "none")]
    pub quant: String,
    #[arg(long, default_value_t = 128)]
    pub group_size: u32,
    /// Store this many largest-magnitude weights exactly.
    #[arg(long, default_value_t = 0)]
    pub topk: usize,
    /// Minimum columns per unit.
    #[arg(long, default_value_t = 16)]
    pub floor: u32,
    /// Identity-mod hashing (testing aid).
    #[arg(long, default_value_t = false)]
    pub test_hash: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::from_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{name}'")))
}

fn parse_granularity(name: &str) -> Result<Granularity> {
    Granularity::from_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown granularity '{name}'")))
}

fn parse_quant(name: &str, group_size: u32) -> Result<QuantSpec> {
    let bits = QuantBits::from_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown quant mode '{name}'")))?;
    match bits {
        QuantBits::None => Ok(QuantSpec::none()),
        _ => QuantSpec::new(bits, group_size),
    }
}

/// Run a parsed command, writing human-readable output to `out`.
pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<()> {
    let print_err = |e: std::io::Error| Error::io("writing output", e);
    match cli.command {
        Command::Compress(args) => {
            let tensor = io::read_tensor(&args.input)?;
            let importance = match &args.importance {
                None => None,
                Some(path) => {
                    let profile = io::read_tensor(path)?;
                    if profile.dims.len() != 1 {
                        return Err(Error::InvalidConfig(
                            "importance file must be a 1-D score tensor".into(),
                        ));
                    }
                    Some(crate::importance::ImportanceProfile::new(
                        profile.data.iter().map(|&s| f64::from(s)).collect(),
                        1,
                    )?)
                }
            };
            let opts = CompressOptions {
                variant: parse_variant(&args.variant)?,
                rows: args.rows,
                seed: args.seed,
                rate: args.rate,
                granularity: parse_granularity(&args.granularity)?,
                importance,
                importance_buckets: args.importance_buckets,
                quant: parse_quant(&args.quant, args.group_size)?,
                topk: args.topk,
                floor: args.floor,
                test_hash: args.test_hash,
            };
            let container = pipeline::compress_tensor(&tensor, &opts)?;
            io::write_sketch(&args.output, &container)?;
            let rate = pipeline::rate_report(&container, 16);
            writeln!(out, "units={}", container.units.len()).map_err(print_err)?;
            writeln!(out, "weight_count={}", rate.weight_count).map_err(print_err)?;
            writeln!(out, "state_elements={}", rate.state_elements).map_err(print_err)?;
            writeln!(out, "rate_elements={:.6}", rate.rate_elements).map_err(print_err)?;
            writeln!(out, "equivalent_bits={:.4}", rate.equivalent_bits).map_err(print_err)?;
            writeln!(out, "file_bytes={}", rate.file_bytes).map_err(print_err)?;
            Ok(())
        }
        Command::Decompress { input, output } => {
            let container = io::read_sketch(&input)?;
            let tensor = pipeline::decompress_tensor(&container)?;
            io::write_tensor(&output, &tensor)?;
            writeln!(out, "dims={:?} elements={}", tensor.dims, tensor.data.len())
                .map_err(print_err)?;
            Ok(())
        }
        Command::Stats {
            original,
            compressed,
            base_width,
            json,
        } => {
            let tensor = io::read_tensor(&original)?;
            let container = io::read_sketch(&compressed)?;
            let report = pipeline::tensor_report(&tensor, &container)?;
            let rate = pipeline::rate_report(&container, base_width);
            write!(out, "{}", report.to_kv()).map_err(print_err)?;
            writeln!(out, "rate_elements={:.6}", rate.rate_elements).map_err(print_err)?;
            writeln!(out, "rate_bytes={:.6}", rate.rate_bytes).map_err(print_err)?;
            writeln!(out, "equivalent_bits={:.4}", rate.equivalent_bits).map_err(print_err)?;
            writeln!(out, "outliers={}", rate.outliers).map_err(print_err)?;
            if let Some(path) = json {
                let doc = serde_json::json!({ "report": report, "rate": rate });
                std::fs::write(
                    &path,
                    serde_json::to_vec_pretty(&doc).expect("serializable"),
                )
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            }
            Ok(())
        }
        Command::Bound {
            p,
            dist,
            scale,
            input,
            k,
            m,
            buckets,
            seed,
        } => {
            let dist = match dist.as_str() {
                "normal" => Distribution::Normal,
                "laplace" => Distribution::Laplace { scale },
                "empirical" => {
                    let path = input.ok_or_else(|| {
                        Error::InvalidConfig("--dist empirical needs --input".into())
                    })?;
                    let tensor = io::read_tensor(&path)?;
                    Distribution::empirical(&tensor.data)
                        .ok_or(Error::EmptyInput("empirical sample"))?
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown distribution '{other}'"
                    )))
                }
            };
            let check = analysis::verify_bound(&dist, k, m, p, buckets, seed)?;
            writeln!(out, "distribution={}", dist.name()).map_err(print_err)?;
            writeln!(out, "k={k} m={m} p={p}").map_err(print_err)?;
            writeln!(out, "expected_load={:.4}", check.expected_load).map_err(print_err)?;
            writeln!(
                out,
                "bound_at_expected_load={:.6}",
                check.bound_at_expected_load
            )
            .map_err(print_err)?;
            writeln!(out, "buckets={}", check.buckets).map_err(print_err)?;
            writeln!(out, "coverage={:.6}", check.coverage).map_err(print_err)?;
            Ok(())
        }
        Command::Compare {
            input,
            rate,
            rows,
            seed,
        } => {
            let tensor = io::read_tensor(&input)?;
            let total = tensor.element_count()?;
            let columns = ((rate * total as f64).round() as u64 / rows as u64).max(1) as u32;
            let base = crate::sketch::SketchConfig::new(Variant::AbsMaxMin, rows, columns, seed)?;
            writeln!(
                out,
                "{:<10} {:>14} {:>14} {:>12} {:>12} {:>12}",
                "variant", "mean_rel_err", "max_rel_err", "sign_err", "untouched", "unoccupied"
            )
            .map_err(print_err)?;
            for (variant, r) in analysis::compare_variants(&tensor.data, &base)? {
                writeln!(
                    out,
                    "{:<10} {:>14.6e} {:>14.6e} {:>12.6} {:>12.6} {:>12.6}",
                    variant.name(),
                    r.mean_relative_error,
                    r.max_relative_error,
                    r.sign_error_rate,
                    r.untouched_fraction,
                    r.unoccupied_fraction
                )
                .map_err(print_err)?;
            }
            Ok(())
        }
        Command::Importance {
            activations,
            output,
        } => {
            let tensor = io::read_tensor(&activations)?;
            if tensor.dims.len() != 2 {
                return Err(Error::InvalidConfig(
                    "activations must be a 2-D (samples x dim) tensor".into(),
                ));
            }
            let profile = activation_importance(
                &tensor.data,
                tensor.dims[0] as usize,
                tensor.dims[1] as usize,
            )?;
            let scores: Vec<f32> = profile.scores.iter().map(|&s| s as f32).collect();
            io::write_tensor(&output, &io::TensorContainer::vector(scores)?)?;
            writeln!(out, "dims={}", profile.scores.len()).map_err(print_err)?;
            writeln!(out, "samples={}", profile.sample_count).map_err(print_err)?;
            writeln!(out, "layer_importance={:.6e}", layer_importance(&profile))
                .map_err(print_err)?;
            Ok(())
        }
        Command::DemoFinetune {
            mode,
            steps,
            seed,
            rate,
            rows,
            lr,
            layer,
            every,
        } => {
            let mode = TrainMode::from_name(&mode)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown mode '{mode}'")))?;
            let mut config = TrainConfig::new(mode, steps);
            config.seed = seed;
            config.rate = rate;
            config.rows = rows;
            config.lr = lr;
            config.layer = layer;
            let run = finetune::train(&config)?;
            writeln!(
                out,
                "mode={} steps={} state_elements={}",
                mode.name(),
                steps,
                run.state_elements
            )
            .map_err(print_err)?;
            writeln!(out, "compress_only_loss={:.6e}", run.compress_only_loss)
                .map_err(print_err)?;
            writeln!(
                out,
                "compress_only_rel_error={:.6}",
                run.compress_only_rel_error
            )
            .map_err(print_err)?;
            writeln!(
                out,
                "{:>6} {:>14} {:>14} {:>10}",
                "step", "loss", "rel_error", "rebonds"
            )
            .map_err(print_err)?;
            for (i, s) in run.history.iter().enumerate() {
                if i % every.max(1) == 0 || i + 1 == run.history.len() {
                    writeln!(
                        out,
                        "{:>6} {:>14.6e} {:>14.6} {:>10}",
                        i, s.loss, s.mean_rel_error, s.binding_changes
                    )
                    .map_err(print_err)?;
                }
            }
            writeln!(out, "final_loss={:.6e}", run.final_loss).map_err(print_err)?;
            writeln!(out, "final_rel_error={:.6}", run.final_rel_error).map_err(print_err)?;
            Ok(())
        }
        Command::Memest { layers, sketches } => {
            let estimate = finetune::peak_memory_estimate(&layers, &sketches)?;
            writeln!(out, "peak_bytes={}", estimate.peak).map_err(print_err)?;
            writeln!(out, "baseline_bytes={}", estimate.baseline).map_err(print_err)?;
            writeln!(
                out,
                "saving_fraction={:.6}",
                1.0 - estimate.peak as f64 / estimate.baseline as f64
            )
            .map_err(print_err)?;
            Ok(())
        }
        Command::Gen { dims, seed, output } => {
            let count = dims.iter().product::<u64>() as usize;
            let tensor = io::TensorContainer::new(dims, crate::dist::normal_f32(count, seed))?;
            io::write_tensor(&output, &tensor)?;
            writeln!(out, "elements={count}").map_err(print_err)?;
            Ok(())
        }
    }
}

/// Parse `argv` and run; returns the process exit status (0 success, 1
/// runtime failure, 2 usage error). Diagnostics go to stderr as one line.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (help/version exit 0).
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
