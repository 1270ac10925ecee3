//! Scalar quantization stacked on sketch states.
//!
//! The sketch already shrinks element count; storing the surviving state
//! elements in 8 or 4 bits drops the equivalent bits per weight further
//! (rate 1/8 with 4-bit codes reaches 0.5). Scheme: symmetric absmax per
//! group of state elements, signed codes, round-half-away-from-zero.

use crate::error::{Error, Result};
use crate::sketch::{SketchConfig, SketchState};

/// Code width for state elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum QuantBits {
    None,
    Q8,
    Q4,
}

impl QuantBits {
    pub fn bits(self) -> Option<u32> {
        match self {
            QuantBits::None => None,
            QuantBits::Q8 => Some(8),
            QuantBits::Q4 => Some(4),
        }
    }

    /// Largest code magnitude: 127 for 8-bit, 7 for 4-bit.
    fn max_code(self) -> Option<i32> {
        match self {
            QuantBits::None => None,
            QuantBits::Q8 => Some(127),
            QuantBits::Q4 => Some(7),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantBits::None => "none",
            QuantBits::Q8 => "q8",
            QuantBits::Q4 => "q4",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "none" => Some(QuantBits::None),
            "q8" => Some(QuantBits::Q8),
            "q4" => Some(QuantBits::Q4),
            _ => None,
        }
    }
}

pub const DEFAULT_GROUP_SIZE: u32 = 128;

/// Quantization parameters: code width plus the number of consecutive state
/// elements sharing one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct QuantSpec {
    pub bits: QuantBits,
    pub group_size: u32,
}

impl QuantSpec {
    pub fn none() -> Self {
        QuantSpec {
            bits: QuantBits::None,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }

    pub fn new(bits: QuantBits, group_size: u32) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidConfig("quant group size must be >= 1".into()));
        }
        Ok(QuantSpec { bits, group_size })
    }
}

/// A sketch state with its elements replaced by signed integer codes and one
/// scale per group. The occupancy mask rides along unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedState {
    pub codes: Vec<i8>,
    pub scales: Vec<f32>,
    pub occupied: Vec<bool>,
    pub config: SketchConfig,
    pub spec: QuantSpec,
    pub weight_count: u64,
}

/// Quantize every occupied state element: per group, `scale = max|v| /
/// max_code` and `code = round(v / scale)` (half away from zero). Unoccupied
/// cells code to 0 with their mask bit clear; all-unoccupied (or all-zero)
/// groups get scale 0.
pub fn quantize_state(state: &SketchState, spec: QuantSpec) -> Result<QuantizedState> {
    let max_code = spec
        .bits
        .max_code()
        .ok_or_else(|| Error::InvalidConfig("cannot quantize with bits=none".into()))?;
    let values = state.values();
    let occupied = state.occupied();
    let group = spec.group_size as usize;

    let mut codes = vec![0i8; values.len()];
    let mut scales = Vec::with_capacity(values.len().div_ceil(group));
    for (g, chunk) in values.chunks(group).enumerate() {
        let base = g * group;
        let group_max = chunk
            .iter()
            .zip(&occupied[base..base + chunk.len()])
            .filter(|(_, &occ)| occ)
            .map(|(v, _)| v.abs())
            .fold(0.0f32, f32::max);
        if group_max == 0.0 {
            scales.push(0.0);
            continue;
        }
        scales.push(group_max / max_code as f32);
        for (j, (&v, &occ)) in chunk
            .iter()
            .zip(&occupied[base..base + chunk.len()])
            .enumerate()
        {
            if !occ {
                continue;
            }
            // Scale in f64 against the group maximum so exact half-points
            // (like 0.25/0.5 * 127 = 63.5) round predictably.
            let q = f64::from(v) / f64::from(group_max) * f64::from(max_code);
            codes[base + j] = q.round().clamp(-f64::from(max_code), f64::from(max_code)) as i8;
        }
    }

    Ok(QuantizedState {
        codes,
        scales,
        occupied: occupied.to_vec(),
        config: state.config().clone(),
        spec,
        weight_count: state.weight_count(),
    })
}

/// Rebuild a sketch state: `value = code * group_scale`, occupied mask
/// restored. Retrieval then runs through the sketch rules unchanged.
pub fn dequantize_state(q: &QuantizedState) -> Result<SketchState> {
    let cells = q.config.rows * q.config.columns as usize;
    if q.codes.len() != cells || q.occupied.len() != cells {
        return Err(Error::MalformedContainer(format!(
            "quantized state has {} codes / {} mask bits for {} cells",
            q.codes.len(),
            q.occupied.len(),
            cells
        )));
    }
    let group = q.spec.group_size as usize;
    if q.scales.len() != cells.div_ceil(group) {
        return Err(Error::MalformedContainer(format!(
            "expected {} group scales, found {}",
            cells.div_ceil(group),
            q.scales.len()
        )));
    }
    let values: Vec<f32> = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if q.occupied[i] {
                f32::from(c) * q.scales[i / group]
            } else {
                0.0
            }
        })
        .collect();
    SketchState::from_raw(q.config.clone(), values, q.occupied.clone(), q.weight_count)
}

/// Bits of storage per original weight: the element rate times the stored
/// element width. Unquantized states count at `base_width` bits per element
/// (16 by default, matching half-precision weight storage); exactly stored
/// outliers are charged at 32 bits of index plus 32 bits of value each.
pub fn equivalent_bits(
    state_elements: u64,
    weight_count: u64,
    bits: QuantBits,
    base_width: u32,
    outlier_count: u64,
) -> f64 {
    let per_element = f64::from(bits.bits().unwrap_or(base_width));
    (state_elements as f64 * per_element + outlier_count as f64 * 64.0) / weight_count as f64
}

/// Two 4-bit codes per byte, low nibble first, sign bits preserved.
pub(crate) fn pack_nibbles(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = if pair.len() == 2 {
                (pair[1] as u8) & 0x0f
            } else {
                0
            };
            lo | (hi << 4)
        })
        .collect()
}

pub(crate) fn unpack_nibbles(bytes: &[u8], count: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(count);
    for &b in bytes {
        // Sign-extend each nibble through a left-align/arithmetic-shift pair.
        out.push(((b << 4) as i8) >> 4);
        if out.len() == count {
            break;
        }
        out.push((b as i8) >> 4);
        if out.len() == count {
            break;
        }
    }
    out
}
