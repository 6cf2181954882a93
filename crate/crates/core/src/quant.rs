//! Group-wise asymmetric integer quantization of key/value vectors.
//!
//! Each group of `group_size` consecutive elements gets its own scale `alpha`
//! and zero point `beta`:
//!
//! ```text
//! alpha = (max - min) / (2^N - 1)
//! beta  = min
//! code  = round_half_even((x - beta) / alpha)   clamped to [0, 2^N - 1]
//! x_hat = alpha * code + beta
//! ```
//!
//! Codes are bit-packed with a fixed little-endian layout:
//!
//! | bits | layout                                               |
//! |------|------------------------------------------------------|
//! | 2    | 4 codes per byte, code `i` at bits `2*(i%4)`         |
//! | 3    | 8 codes per 3 bytes, LSB-first across a 24-bit word  |
//! | 4    | 2 codes per byte, even index in the low nibble       |
//! | 8    | 1 code per byte                                      |
//!
//! A trailing partial super-group is zero padded, so the packed length is
//! always a whole number of super-groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit widths the quantizer supports.
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Width used when accounting a scale or a zero point.
pub const PARAM_BITS: u32 = 16;

/// Token-group length used by the per-channel simulation.
pub const CHANNEL_GROUP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct QuantSpec {
    bits: u8,
    group_size: usize,
}

#[derive(Deserialize)]
struct RawSpec {
    bits: u8,
    group_size: usize,
}

impl TryFrom<RawSpec> for QuantSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        QuantSpec::new(raw.bits, raw.group_size)
    }
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        check_bits(bits)?;
        if group_size == 0 {
            return Err(Error::invalid("group_size must be at least 1"));
        }
        Ok(Self { bits, group_size })
    }

    /// Spec using the default grouping of half a head.
    pub fn for_head_dim(bits: u8, head_dim: usize) -> Result<Self> {
        if head_dim < 2 {
            return Err(Error::invalid(format!(
                "head_dim {head_dim} too small for half-head grouping"
            )));
        }
        Self::new(bits, head_dim / 2)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    pub fn levels(&self) -> f64 {
        f64::from(self.max_code())
    }

    /// Checks that groups tile a head exactly.
    pub fn validate_for(&self, head_dim: usize) -> Result<()> {
        if !head_dim.is_multiple_of(self.group_size) {
            return Err(Error::invalid(format!(
                "group_size {} does not divide head_dim {head_dim}",
                self.group_size
            )));
        }
        Ok(())
    }

    pub fn num_groups(&self, len: usize) -> usize {
        len.div_ceil(self.group_size)
    }

    /// Bits per element including the per-group scale and zero point.
    pub fn effective_bits(&self) -> f64 {
        effective_bits(self.bits, self.group_size)
    }
}

/// `N + 2*16/group_size`: payload bits plus amortized scale/zero storage.
pub fn effective_bits(bits: u8, group_size: usize) -> f64 {
    f64::from(bits) + 2.0 * f64::from(PARAM_BITS) / group_size as f64
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "unsupported bit width {bits}; expected one of 2, 3, 4, 8"
        )))
    }
}

/// Packed byte count for `len` codes at `bits` per code.
pub fn packed_len(bits: u8, len: usize) -> usize {
    match bits {
        2 => len.div_ceil(4),
        3 => len.div_ceil(8) * 3,
        4 => len.div_ceil(2),
        8 => len,
        _ => unreachable!("bit width validated by caller"),
    }
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let max = ((1u16 << bits) - 1) as u8;
    if let Some(pos) = codes.iter().position(|&c| c > max) {
        return Err(Error::invalid(format!(
            "code {} at index {pos} exceeds {bits}-bit range",
            codes[pos]
        )));
    }
    let mut out = vec![0u8; packed_len(bits, codes.len())];
    match bits {
        2 | 4 => {
            let per_byte = 8 / bits as usize;
            for (i, &c) in codes.iter().enumerate() {
                out[i / per_byte] |= c << (bits as usize * (i % per_byte));
            }
        }
        3 => {
            for (chunk_idx, chunk) in codes.chunks(8).enumerate() {
                let word = chunk
                    .iter()
                    .enumerate()
                    .fold(0u32, |w, (j, &c)| w | (u32::from(c) << (3 * j)));
                let base = chunk_idx * 3;
                out[base..base + 3].copy_from_slice(&word.to_le_bytes()[..3]);
            }
        }
        8 => out.copy_from_slice(codes),
        _ => unreachable!(),
    }
    Ok(out)
}

pub fn unpack_codes(packed: &[u8], bits: u8, len: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let need = packed_len(bits, len);
    if packed.len() < need {
        return Err(Error::format(
            packed.len() as u64,
            format!(
                "packed codes hold {} bytes but {len} codes at {bits} bits need {need}",
                packed.len()
            ),
        ));
    }
    let mut codes = Vec::with_capacity(len);
    match bits {
        2 | 4 => {
            let per_byte = 8 / bits as usize;
            let mask = (1u8 << bits) - 1;
            for i in 0..len {
                codes.push((packed[i / per_byte] >> (bits as usize * (i % per_byte))) & mask);
            }
        }
        3 => {
            for i in 0..len {
                let base = (i / 8) * 3;
                let word =
                    u32::from_le_bytes([packed[base], packed[base + 1], packed[base + 2], 0]);
                codes.push(((word >> (3 * (i % 8))) & 0b111) as u8);
            }
        }
        8 => codes.extend_from_slice(&packed[..len]),
        _ => unreachable!(),
    }
    Ok(codes)
}

/// A quantized vector: packed codes plus one `(alpha, beta)` pair per group.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    spec: QuantSpec,
    packed: Vec<u8>,
    scales: Vec<f32>,
    zeros: Vec<f32>,
    len: usize,
}

impl QuantizedBlock {
    /// Assembles a block from raw parts. Consistency is checked on decode.
    pub fn from_parts(
        spec: QuantSpec,
        packed: Vec<u8>,
        scales: Vec<f32>,
        zeros: Vec<f32>,
        len: usize,
    ) -> Self {
        Self {
            spec,
            packed,
            scales,
            zeros,
            len,
        }
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.packed, self.spec.bits, self.len)
    }

    /// Bytes of packed codes.
    pub fn code_bytes(&self) -> usize {
        self.packed.len()
    }

    /// Bytes of scales and zeros, accounted at 16 bits each.
    pub fn param_bytes(&self) -> usize {
        (self.scales.len() + self.zeros.len()) * PARAM_BITS as usize / 8
    }
}

pub fn quantize(x: &[f32], spec: QuantSpec) -> Result<QuantizedBlock> {
    if x.is_empty() {
        return Err(Error::invalid("cannot quantize an empty vector"));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite value {} at index {pos}",
            x[pos]
        )));
    }
    let groups = spec.num_groups(x.len());
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);
    let mut codes = Vec::with_capacity(x.len());
    let max_code = spec.max_code();

    for group in x.chunks(spec.group_size) {
        let (lo, hi) = group
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let alpha = ((f64::from(hi) - f64::from(lo)) / spec.levels()) as f32;
        scales.push(alpha);
        zeros.push(lo);
        if alpha == 0.0 {
            codes.extend(std::iter::repeat_n(0, group.len()));
            continue;
        }
        let (a, b) = (f64::from(alpha), f64::from(lo));
        codes.extend(group.iter().map(|&v| {
            let q = ((f64::from(v) - b) / a).round_ties_even();
            q.clamp(0.0, f64::from(max_code)) as u8
        }));
    }

    Ok(QuantizedBlock {
        spec,
        packed: pack_codes(&codes, spec.bits)?,
        scales,
        zeros,
        len: x.len(),
    })
}

pub fn dequantize(block: &QuantizedBlock) -> Result<Vec<f32>> {
    let codes = block.codes()?;
    let groups = block.spec.num_groups(block.len);
    if block.scales.len() != groups || block.zeros.len() != groups {
        return Err(Error::format(
            0,
            format!(
                "block of {} elements needs {groups} scale/zero pairs, found {}/{}",
                block.len,
                block.scales.len(),
                block.zeros.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(block.len);
    for (g, chunk) in codes.chunks(block.spec.group_size).enumerate() {
        let (a, b) = (f64::from(block.scales[g]), f64::from(block.zeros[g]));
        out.extend(chunk.iter().map(|&c| (a * f64::from(c) + b) as f32));
    }
    Ok(out)
}

/// Quantize then dequantize without keeping the packed form.
pub fn fake_quantize(x: &[f32], spec: QuantSpec) -> Result<Vec<f32>> {
    dequantize(&quantize(x, spec)?)
}

/// Simulated per-channel key quantization.
///
/// Every column of `rows` (tokens x head_dim) is quantized along the sequence
/// axis in token groups of [`CHANNEL_GROUP`]. Nothing is packed or reordered;
/// the result only measures what per-channel grouping would cost in error.
pub fn simulate_per_channel(rows: &[Vec<f32>], bits: u8) -> Result<Vec<Vec<f32>>> {
    check_bits(bits)?;
    let Some(first) = rows.first() else {
        return Err(Error::invalid(
            "per-channel simulation needs at least one token",
        ));
    };
    let dim = first.len();
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::invalid(format!(
            "row {bad} has {} channels, expected {dim}",
            rows[bad].len()
        )));
    }
    let mut out = rows.to_vec();
    let mut column = Vec::with_capacity(CHANNEL_GROUP);
    for start in (0..rows.len()).step_by(CHANNEL_GROUP) {
        let end = (start + CHANNEL_GROUP).min(rows.len());
        let spec = QuantSpec::new(bits, end - start)?;
        for c in 0..dim {
            column.clear();
            column.extend(rows[start..end].iter().map(|r| r[c]));
            let restored = fake_quantize(&column, spec)?;
            for (row, v) in out[start..end].iter_mut().zip(restored) {
                row[c] = v;
            }
        }
    }
    Ok(out)
}

/// Per-token reference path for comparing against [`simulate_per_channel`].
pub fn simulate_per_token(rows: &[Vec<f32>], spec: QuantSpec) -> Result<Vec<Vec<f32>>> {
    rows.iter().map(|r| fake_quantize(r, spec)).collect()
}
