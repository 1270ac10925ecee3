//! Index-free, multiple-to-one weight compression built on a multi-row
//! underestimate sketch.
//!
//! A weight tensor is split into compression units (whole tensor or one unit
//! per matrix row). Each unit is folded into a small `M x N` sketch state:
//! every weight hashes to one cell per row, colliding weights share a cell,
//! and the cell keeps the collider with the smallest absolute value. Reading
//! a weight back takes the bonded cell with the largest absolute value across
//! rows, so a retrieved weight never grows in magnitude. No index tables are
//! stored; the weight's position inside its unit is the hash input.
//!
//! On top of the core sketch the crate provides error statistics and a
//! probabilistic lower bound on bucket minima ([`analysis`]), saliency-driven
//! sketch space allocation ([`importance`]), stacked 4/8-bit quantization of
//! sketch states ([`quant`]), a small straight-through-estimator finetuning
//! demonstration ([`finetune`]), binary container formats ([`io`]) and the
//! `usketch` command-line tool ([`cli`]).

pub mod analysis;
#[cfg(feature = "cli")]
pub mod cli;
pub mod dist;
mod error;
pub mod finetune;
pub mod hash;
pub mod importance;
pub mod io;
pub mod pipeline;
pub mod quant;
pub mod sketch;

pub use error::{Error, Result};
pub use sketch::{SketchConfig, SketchState, Variant, WeightAddress};
