//! Binary container formats for tensors and compressed sketches.
//!
//! All integers are little-endian; both formats are versioned from 1.
//!
//! Tensor container (`USLT`):
//!
//! ```text
//! magic "USLT" | version u16 | dtype u8 (0 = f32) | ndim u8
//! | dims u64 * ndim | payload f32 * prod(dims), row-major
//! ```
//!
//! Sketch container (`USLS`):
//!
//! ```text
//! magic "USLS" | version u16 | variant u8 | rows u8 | flags u8 (bit0 = test hash)
//! | quant scheme u8 (0 = none, 1 = symmetric absmax) | quant bits u8
//! | group size u32 | master seed u64 | ndim u8 | dims u64 * ndim
//! | unit count u32
//! | unit headers: columns u32, weight count u64, outlier count u32
//! | unit payloads, in order:
//! |   occupied mask, bit-packed LSB-first, ceil(rows*columns / 8) bytes
//! |   scheme none: values f32 * rows*columns
//! |   scheme absmax: scales f32 * ceil(rows*columns / group)
//! |                  codes: q8 one byte each, q4 two per byte (low nibble first)
//! |   outliers: (index u32, value f32) * outlier count
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::quant::{pack_nibbles, unpack_nibbles, QuantBits, QuantSpec, QuantizedState};
use crate::sketch::{SketchConfig, SketchState, Variant};

pub const TENSOR_MAGIC: [u8; 4] = *b"USLT";
pub const SKETCH_MAGIC: [u8; 4] = *b"USLS";
pub const FORMAT_VERSION: u16 = 1;

const MAX_NDIM: u8 = 8;
const MAX_ELEMENTS: u64 = 1 << 33;

fn io_err(context: &str) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(context, e)
}

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

/// An n-dimensional f32 tensor (row-major payload). A zero-dimensional
/// tensor is a scalar with one element.
#[derive(Debug, Clone)]
pub struct TensorContainer {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorContainer {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let t = TensorContainer { dims, data };
        t.validate()?;
        Ok(t)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        TensorContainer::new(vec![data.len() as u64], data)
    }

    pub fn element_count(&self) -> Result<u64> {
        self.dims.iter().try_fold(1u64, |acc, &d| {
            acc.checked_mul(d)
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| Error::MalformedContainer("dimension overflow".into()))
        })
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() > MAX_NDIM as usize {
            return Err(Error::MalformedContainer(format!(
                "ndim {} exceeds {MAX_NDIM}",
                self.dims.len()
            )));
        }
        let n = self.element_count()?;
        if n != self.data.len() as u64 {
            return Err(Error::MalformedContainer(format!(
                "payload holds {} elements, dims promise {n}",
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn write_tensor_to<W: Write>(w: &mut W, t: &TensorContainer) -> Result<()> {
    t.validate()?;
    let ctx = "writing tensor container";
    w.write_all(&TENSOR_MAGIC).map_err(io_err(ctx))?;
    w.write_u16::<LittleEndian>(FORMAT_VERSION)
        .map_err(io_err(ctx))?;
    w.write_u8(0).map_err(io_err(ctx))?; // dtype: f32
    w.write_u8(t.dims.len() as u8).map_err(io_err(ctx))?;
    for &d in &t.dims {
        w.write_u64::<LittleEndian>(d).map_err(io_err(ctx))?;
    }
    for &v in &t.data {
        w.write_u32::<LittleEndian>(v.to_bits())
            .map_err(io_err(ctx))?;
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<TensorContainer> {
    let ctx = "reading tensor container";
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(ctx))?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>().map_err(io_err(ctx))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dtype = r.read_u8().map_err(io_err(ctx))?;
    if dtype != 0 {
        return Err(Error::MalformedContainer(format!(
            "unknown dtype code {dtype}"
        )));
    }
    let ndim = r.read_u8().map_err(io_err(ctx))?;
    if ndim > MAX_NDIM {
        return Err(Error::MalformedContainer(format!(
            "ndim {ndim} exceeds {MAX_NDIM}"
        )));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>().map_err(io_err(ctx))?);
    }
    let holder = TensorContainer {
        dims,
        data: Vec::new(),
    };
    let count = holder.element_count()?;
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        data.push(f32::from_bits(
            r.read_u32::<LittleEndian>().map_err(io_err(ctx))?,
        ));
    }
    Ok(TensorContainer {
        dims: holder.dims,
        data,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorContainer) -> Result<()> {
    let file =
        File::create(&path).map_err(io_err(&format!("creating {}", path.as_ref().display())))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, t)?;
    w.flush().map_err(io_err("flushing tensor container"))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let file =
        File::open(&path).map_err(io_err(&format!("opening {}", path.as_ref().display())))?;
    read_tensor_from(&mut BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Sketch container
// ---------------------------------------------------------------------------

/// One compression unit: its sketch state (raw or quantized) plus exactly
/// stored outliers, `(unit-local index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUnit {
    pub payload: UnitPayload,
    pub outliers: Vec<(u32, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnitPayload {
    Raw(SketchState),
    Quantized(QuantizedState),
}

impl UnitPayload {
    /// Quantize a fresh state per `spec` (identity for `bits = none`).
    pub fn from_state(state: SketchState, spec: QuantSpec) -> Result<UnitPayload> {
        Ok(match spec.bits {
            QuantBits::None => UnitPayload::Raw(state),
            _ => UnitPayload::Quantized(crate::quant::quantize_state(&state, spec)?),
        })
    }

    /// The retrievable state (dequantizing if needed).
    pub fn to_state(&self) -> Result<SketchState> {
        match self {
            UnitPayload::Raw(s) => Ok(s.clone()),
            UnitPayload::Quantized(q) => crate::quant::dequantize_state(q),
        }
    }

    pub fn columns(&self) -> u32 {
        match self {
            UnitPayload::Raw(s) => s.config().columns,
            UnitPayload::Quantized(q) => q.config.columns,
        }
    }

    pub fn weight_count(&self) -> u64 {
        match self {
            UnitPayload::Raw(s) => s.weight_count(),
            UnitPayload::Quantized(q) => q.weight_count,
        }
    }

    fn occupied(&self) -> &[bool] {
        match self {
            UnitPayload::Raw(s) => s.occupied(),
            UnitPayload::Quantized(q) => &q.occupied,
        }
    }
}

/// A compressed tensor: shared sketch parameters, the original tensor shape,
/// and one unit per row (or a single unit for whole-tensor granularity).
#[derive(Debug, Clone, PartialEq)]
pub struct SketchContainer {
    pub variant: Variant,
    pub rows: usize,
    pub seed: u64,
    pub test_hash: bool,
    pub quant: QuantSpec,
    /// Shape of the original tensor, restored on decompression.
    pub dims: Vec<u64>,
    pub units: Vec<CompressedUnit>,
}

impl SketchContainer {
    /// Sketch config for a unit of this container with the given columns.
    pub fn unit_config(&self, columns: u32) -> Result<SketchConfig> {
        let mut config = SketchConfig::new(self.variant, self.rows, columns, self.seed)?;
        config.test_hash = self.test_hash;
        Ok(config)
    }

    pub fn total_weight_count(&self) -> u64 {
        self.units.iter().map(|u| u.payload.weight_count()).sum()
    }

    /// Total state elements across units (rows x columns each).
    pub fn state_elements(&self) -> u64 {
        self.units
            .iter()
            .map(|u| self.rows as u64 * u64::from(u.payload.columns()))
            .sum()
    }

    pub fn total_outliers(&self) -> u64 {
        self.units.iter().map(|u| u.outliers.len() as u64).sum()
    }

    fn cells(&self, unit: &CompressedUnit) -> u64 {
        self.rows as u64 * u64::from(unit.payload.columns())
    }

    /// Bytes of state data: occupancy masks, values (or scales plus codes)
    /// and outlier pairs. Everything else in the file is header.
    pub fn state_payload_bytes(&self) -> u64 {
        self.units
            .iter()
            .map(|u| {
                let cells = self.cells(u);
                let mask = cells.div_ceil(8);
                let body = match self.quant.bits {
                    QuantBits::None => cells * 4,
                    QuantBits::Q8 => cells.div_ceil(u64::from(self.quant.group_size)) * 4 + cells,
                    QuantBits::Q4 => {
                        cells.div_ceil(u64::from(self.quant.group_size)) * 4 + cells.div_ceil(2)
                    }
                };
                mask + body + u.outliers.len() as u64 * 8
            })
            .sum()
    }

    /// Exact size of the serialized container.
    pub fn serialized_size(&self) -> u64 {
        let fixed = 4 + 2 + 1 + 1 + 1 + 1 + 1 + 4 + 8 + 1 + 8 * self.dims.len() as u64 + 4;
        fixed + 16 * self.units.len() as u64 + self.state_payload_bytes()
    }

    fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::EmptyInput("sketch container without units"));
        }
        if self.rows == 0 || self.rows > 255 {
            return Err(Error::InvalidConfig(format!(
                "rows {} out of range",
                self.rows
            )));
        }
        for unit in &self.units {
            let quantized = matches!(unit.payload, UnitPayload::Quantized(_));
            if quantized != (self.quant.bits != QuantBits::None) {
                return Err(Error::InvalidConfig(
                    "unit payload kind disagrees with the container quant spec".into(),
                ));
            }
            let (config, spec) = match &unit.payload {
                UnitPayload::Raw(s) => (s.config(), None),
                UnitPayload::Quantized(q) => (&q.config, Some(q.spec)),
            };
            if config.variant != self.variant
                || config.rows != self.rows
                || config.seed != self.seed
                || config.test_hash != self.test_hash
            {
                return Err(Error::InvalidConfig(
                    "unit sketch config disagrees with the container header".into(),
                ));
            }
            if let Some(spec) = spec {
                if spec != self.quant {
                    return Err(Error::InvalidConfig(
                        "unit quant spec disagrees with the container header".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_mask(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count)
        .map(|i| bytes[i / 8] & (1 << (i % 8)) != 0)
        .collect()
}

pub fn write_sketch_to<W: Write>(w: &mut W, c: &SketchContainer) -> Result<()> {
    c.validate()?;
    let ctx = "writing sketch container";
    w.write_all(&SKETCH_MAGIC).map_err(io_err(ctx))?;
    w.write_u16::<LittleEndian>(FORMAT_VERSION)
        .map_err(io_err(ctx))?;
    w.write_u8(match c.variant {
        Variant::AbsMaxMin => 0,
        Variant::AbsMinMax => 1,
        Variant::CountMin => 2,
    })
    .map_err(io_err(ctx))?;
    w.write_u8(c.rows as u8).map_err(io_err(ctx))?;
    w.write_u8(u8::from(c.test_hash)).map_err(io_err(ctx))?;
    let (scheme, bits) = match c.quant.bits {
        QuantBits::None => (0u8, 0u8),
        QuantBits::Q8 => (1, 8),
        QuantBits::Q4 => (1, 4),
    };
    w.write_u8(scheme).map_err(io_err(ctx))?;
    w.write_u8(bits).map_err(io_err(ctx))?;
    w.write_u32::<LittleEndian>(c.quant.group_size)
        .map_err(io_err(ctx))?;
    w.write_u64::<LittleEndian>(c.seed).map_err(io_err(ctx))?;
    w.write_u8(c.dims.len() as u8).map_err(io_err(ctx))?;
    for &d in &c.dims {
        w.write_u64::<LittleEndian>(d).map_err(io_err(ctx))?;
    }
    w.write_u32::<LittleEndian>(c.units.len() as u32)
        .map_err(io_err(ctx))?;

    for unit in &c.units {
        w.write_u32::<LittleEndian>(unit.payload.columns())
            .map_err(io_err(ctx))?;
        w.write_u64::<LittleEndian>(unit.payload.weight_count())
            .map_err(io_err(ctx))?;
        w.write_u32::<LittleEndian>(unit.outliers.len() as u32)
            .map_err(io_err(ctx))?;
    }
    for unit in &c.units {
        w.write_all(&pack_mask(unit.payload.occupied()))
            .map_err(io_err(ctx))?;
        match &unit.payload {
            UnitPayload::Raw(state) => {
                for &v in state.values() {
                    w.write_u32::<LittleEndian>(v.to_bits())
                        .map_err(io_err(ctx))?;
                }
            }
            UnitPayload::Quantized(q) => {
                for &s in &q.scales {
                    w.write_u32::<LittleEndian>(s.to_bits())
                        .map_err(io_err(ctx))?;
                }
                match c.quant.bits {
                    QuantBits::Q8 => {
                        let bytes: Vec<u8> = q.codes.iter().map(|&c| c as u8).collect();
                        w.write_all(&bytes).map_err(io_err(ctx))?;
                    }
                    QuantBits::Q4 => {
                        w.write_all(&pack_nibbles(&q.codes)).map_err(io_err(ctx))?;
                    }
                    QuantBits::None => unreachable!("validated"),
                }
            }
        }
        for &(idx, value) in &unit.outliers {
            w.write_u32::<LittleEndian>(idx).map_err(io_err(ctx))?;
            w.write_u32::<LittleEndian>(value.to_bits())
                .map_err(io_err(ctx))?;
        }
    }
    Ok(())
}

pub fn read_sketch_from<R: Read>(r: &mut R) -> Result<SketchContainer> {
    let ctx = "reading sketch container";
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(ctx))?;
    if magic != SKETCH_MAGIC {
        return Err(Error::BadMagic {
            expected: SKETCH_MAGIC,
            found: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>().map_err(io_err(ctx))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let variant = match r.read_u8().map_err(io_err(ctx))? {
        0 => Variant::AbsMaxMin,
        1 => Variant::AbsMinMax,
        2 => Variant::CountMin,
        v => {
            return Err(Error::MalformedContainer(format!(
                "unknown variant code {v}"
            )))
        }
    };
    let rows = r.read_u8().map_err(io_err(ctx))? as usize;
    if rows == 0 {
        return Err(Error::MalformedContainer("rows must be >= 1".into()));
    }
    let flags = r.read_u8().map_err(io_err(ctx))?;
    let test_hash = flags & 1 != 0;
    let scheme = r.read_u8().map_err(io_err(ctx))?;
    let bits_code = r.read_u8().map_err(io_err(ctx))?;
    let group_size = r.read_u32::<LittleEndian>().map_err(io_err(ctx))?;
    let bits = match (scheme, bits_code) {
        (0, 0) => QuantBits::None,
        (1, 8) => QuantBits::Q8,
        (1, 4) => QuantBits::Q4,
        _ => {
            return Err(Error::MalformedContainer(format!(
                "unknown quant scheme/bits {scheme}/{bits_code}"
            )))
        }
    };
    let quant = match bits {
        QuantBits::None => QuantSpec::none(),
        _ => QuantSpec::new(bits, group_size)?,
    };
    let seed = r.read_u64::<LittleEndian>().map_err(io_err(ctx))?;
    let ndim = r.read_u8().map_err(io_err(ctx))?;
    if ndim > MAX_NDIM {
        return Err(Error::MalformedContainer(format!(
            "ndim {ndim} exceeds {MAX_NDIM}"
        )));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>().map_err(io_err(ctx))?);
    }
    let unit_count = r.read_u32::<LittleEndian>().map_err(io_err(ctx))?;
    if unit_count == 0 {
        return Err(Error::MalformedContainer(
            "sketch container without units".into(),
        ));
    }

    let mut headers = Vec::with_capacity(unit_count as usize);
    for _ in 0..unit_count {
        let columns = r.read_u32::<LittleEndian>().map_err(io_err(ctx))?;
        let weight_count = r.read_u64::<LittleEndian>().map_err(io_err(ctx))?;
        let outlier_count = r.read_u32::<LittleEndian>().map_err(io_err(ctx))?;
        if columns == 0 {
            return Err(Error::MalformedContainer("unit with zero columns".into()));
        }
        headers.push((columns, weight_count, outlier_count));
    }

    let mut units = Vec::with_capacity(unit_count as usize);
    for (columns, weight_count, outlier_count) in headers {
        let cells = rows
            .checked_mul(columns as usize)
            .filter(|&n| (n as u64) <= MAX_ELEMENTS)
            .ok_or_else(|| Error::MalformedContainer("state size overflow".into()))?;
        let mut mask_bytes = vec![0u8; cells.div_ceil(8)];
        r.read_exact(&mut mask_bytes).map_err(io_err(ctx))?;
        let occupied = unpack_mask(&mask_bytes, cells);

        let mut config = SketchConfig::new(variant, rows, columns, seed)?;
        config.test_hash = test_hash;

        let payload = match bits {
            QuantBits::None => {
                let mut values = Vec::with_capacity(cells);
                for _ in 0..cells {
                    values.push(f32::from_bits(
                        r.read_u32::<LittleEndian>().map_err(io_err(ctx))?,
                    ));
                }
                UnitPayload::Raw(SketchState::from_raw(
                    config,
                    values,
                    occupied,
                    weight_count,
                )?)
            }
            _ => {
                let groups = cells.div_ceil(group_size as usize);
                let mut scales = Vec::with_capacity(groups);
                for _ in 0..groups {
                    scales.push(f32::from_bits(
                        r.read_u32::<LittleEndian>().map_err(io_err(ctx))?,
                    ));
                }
                let codes = match bits {
                    QuantBits::Q8 => {
                        let mut bytes = vec![0u8; cells];
                        r.read_exact(&mut bytes).map_err(io_err(ctx))?;
                        bytes.into_iter().map(|b| b as i8).collect()
                    }
                    QuantBits::Q4 => {
                        let mut bytes = vec![0u8; cells.div_ceil(2)];
                        r.read_exact(&mut bytes).map_err(io_err(ctx))?;
                        unpack_nibbles(&bytes, cells)
                    }
                    QuantBits::None => unreachable!(),
                };
                UnitPayload::Quantized(QuantizedState {
                    codes,
                    scales,
                    occupied,
                    config,
                    spec: quant,
                    weight_count,
                })
            }
        };
        let mut outliers = Vec::with_capacity(outlier_count as usize);
        for _ in 0..outlier_count {
            let idx = r.read_u32::<LittleEndian>().map_err(io_err(ctx))?;
            let value = f32::from_bits(r.read_u32::<LittleEndian>().map_err(io_err(ctx))?);
            outliers.push((idx, value));
        }
        units.push(CompressedUnit { payload, outliers });
    }

    let container = SketchContainer {
        variant,
        rows,
        seed,
        test_hash,
        quant,
        dims,
        units,
    };
    container.validate()?;
    Ok(container)
}

pub fn write_sketch(path: impl AsRef<Path>, c: &SketchContainer) -> Result<()> {
    let file =
        File::create(&path).map_err(io_err(&format!("creating {}", path.as_ref().display())))?;
    let mut w = BufWriter::new(file);
    write_sketch_to(&mut w, c)?;
    w.flush().map_err(io_err("flushing sketch container"))
}

pub fn read_sketch(path: impl AsRef<Path>) -> Result<SketchContainer> {
    let file =
        File::open(&path).map_err(io_err(&format!("opening {}", path.as_ref().display())))?;
    read_sketch_from(&mut BufReader::new(file))
}
