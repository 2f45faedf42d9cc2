//! Blockwise symmetric integer quantization.
//!
//! Every block of `block_size` contiguous elements gets its own scale
//! `max|x| / (2^(b-1) - 1)`, stored as a half-precision number. Codes are
//! rounded ties-to-even and clamped to `±(2^(b-1) - 1)`, so the most negative
//! two's-complement code is never emitted.

mod wire;

pub use wire::HEADER_LEN;

use half::f16;

use crate::error::{ensure, Error, Result};

/// Width of one scale on the wire.
pub const SCALE_BYTES: usize = 2;

/// Elements per quantization block must be a multiple of this.
pub const BLOCK_ALIGN: usize = 8;

/// Default block size for weight all-gathers.
pub const DEFAULT_WEIGHT_BLOCK: usize = 2048;
/// Default block size for gradient reduce-scatters.
pub const DEFAULT_GRAD_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitWidth {
    Int4,
    Int8,
}

impl BitWidth {
    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            4 => Ok(BitWidth::Int4),
            8 => Ok(BitWidth::Int8),
            other => Err(Error::Config(format!("bit width must be 4 or 8, got {other}"))),
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            BitWidth::Int4 => 4,
            BitWidth::Int8 => 8,
        }
    }

    /// Largest representable magnitude, `2^(b-1) - 1`.
    pub fn qmax(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    /// Packed byte count for `n` codes.
    pub fn packed_len(self, n: usize) -> usize {
        (n * self.bits() as usize).div_ceil(8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// Independent scale per `block_size` elements.
    Blocked,
    /// One scale for the whole tensor.
    FullTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    pub bit_width: BitWidth,
    /// Ignored in [`QuantMode::FullTensor`].
    pub block_size: usize,
    pub mode: QuantMode,
}

impl QuantConfig {
    pub fn new(bits: u8, block_size: usize, mode: QuantMode) -> Result<Self> {
        let cfg = QuantConfig {
            bit_width: BitWidth::from_bits(bits)?,
            block_size,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn blocked(bits: u8, block_size: usize) -> Result<Self> {
        Self::new(bits, block_size, QuantMode::Blocked)
    }

    pub fn full_tensor(bits: u8) -> Result<Self> {
        Self::new(bits, BLOCK_ALIGN, QuantMode::FullTensor)
    }

    /// INT8 with the default weight block size.
    pub fn weights_default() -> Self {
        QuantConfig {
            bit_width: BitWidth::Int8,
            block_size: DEFAULT_WEIGHT_BLOCK,
            mode: QuantMode::Blocked,
        }
    }

    /// INT4 with the default gradient block size.
    pub fn gradients_default() -> Self {
        QuantConfig {
            bit_width: BitWidth::Int4,
            block_size: DEFAULT_GRAD_BLOCK,
            mode: QuantMode::Blocked,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.block_size >= BLOCK_ALIGN && self.block_size.is_multiple_of(BLOCK_ALIGN),
            Config,
            "block size must be a positive multiple of {BLOCK_ALIGN}, got {}",
            self.block_size
        );
        Ok(())
    }

    /// Block size actually used for a tensor of `len` elements.
    pub fn effective_block(&self, len: usize) -> usize {
        match self.mode {
            QuantMode::Blocked => self.block_size,
            QuantMode::FullTensor => len.div_ceil(BLOCK_ALIGN).max(1) * BLOCK_ALIGN,
        }
    }

    /// Granularity that slice boundaries must respect so blocks never straddle them.
    pub fn alignment(&self) -> usize {
        match self.mode {
            QuantMode::Blocked => self.block_size,
            QuantMode::FullTensor => BLOCK_ALIGN,
        }
    }

    /// Ratio of FP16 wire bytes to code bytes (ignoring scales).
    pub fn compression_ratio(&self) -> f64 {
        16.0 / self.bit_width.bits() as f64
    }
}

/// Bytes per element for an unquantized tensor on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WireWidth {
    Half,
    Single,
}

impl WireWidth {
    pub fn bytes(self) -> usize {
        match self {
            WireWidth::Half => 2,
            WireWidth::Single => 4,
        }
    }
}

/// A flat sequence of finite values plus the width they occupy on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTensor {
    values: Vec<f32>,
    wire: WireWidth,
}

impl FlatTensor {
    pub fn new(values: Vec<f32>, wire: WireWidth) -> Result<Self> {
        check_finite(&values)?;
        Ok(FlatTensor { values, wire })
    }

    /// Half-precision wire payload.
    pub fn half(values: Vec<f32>) -> Result<Self> {
        Self::new(values, WireWidth::Half)
    }

    pub fn zeros(len: usize) -> Self {
        FlatTensor {
            values: vec![0.0; len],
            wire: WireWidth::Half,
        }
    }

    pub(crate) fn from_trusted(values: Vec<f32>, wire: WireWidth) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FlatTensor { values, wire }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn wire(&self) -> WireWidth {
        self.wire
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn wire_bytes(&self) -> usize {
        self.values.len() * self.wire.bytes()
    }
}

pub(crate) fn check_finite(values: &[f32]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// Packed codes, one scale per block, and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    scales: Vec<f16>,
    original_len: usize,
    config: QuantConfig,
    block: usize,
}

impl QuantizedTensor {
    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn bit_width(&self) -> BitWidth {
        self.config.bit_width
    }

    /// Block size in effect (equals the tensor length padded to 8 in full-tensor mode).
    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn scales(&self) -> &[f16] {
        &self.scales
    }

    pub fn scale_of(&self, element: usize) -> f32 {
        self.scales[element / self.block].to_f32()
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> i32 {
        match self.config.bit_width {
            BitWidth::Int8 => self.codes[i] as i8 as i32,
            BitWidth::Int4 => {
                let byte = self.codes[i / 2];
                let nibble = if i.is_multiple_of(2) {
                    byte & 0x0f
                } else {
                    byte >> 4
                };
                (((nibble << 4) as i8) >> 4) as i32
            }
        }
    }

    pub fn codes(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.original_len).map(|i| self.code(i))
    }

    pub fn code_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn scale_bytes(&self) -> usize {
        self.scales.len() * SCALE_BYTES
    }

    /// Codes plus scales; the serialized form adds [`HEADER_LEN`] on top.
    pub fn wire_bytes(&self) -> usize {
        self.code_bytes() + self.scale_bytes()
    }

    fn same_layout(&self, other: &QuantizedTensor) -> bool {
        self.original_len == other.original_len
            && self.config.bit_width == other.config.bit_width
            && self.block == other.block
    }

    fn check_integrity(&self) -> Result<()> {
        let qmax = self.config.bit_width.qmax();
        for (b, scale) in self.scales.iter().enumerate() {
            let s = scale.to_f32();
            ensure!(
                s.is_finite() && s >= 0.0,
                Integrity,
                "block {b} has invalid scale {s}"
            );
            let range = b * self.block..((b + 1) * self.block).min(self.original_len);
            for i in range {
                let c = self.code(i);
                ensure!(
                    c.abs() <= qmax,
                    Integrity,
                    "code {c} at {i} outside symmetric range ±{qmax}"
                );
                ensure!(
                    s != 0.0 || c == 0,
                    Integrity,
                    "non-zero code at {i} in zero-scale block {b}"
                );
            }
        }
        Ok(())
    }
}

/// Half-precision scale for a block whose largest magnitude is `max_abs`.
///
/// Nearest half to `max_abs / qmax`, moved one step up when the rounded value
/// would push the largest element past `qmax + 1/2` (subnormal range).
fn block_scale(max_abs: f32, qmax: i32) -> Result<f16> {
    let exact = max_abs as f64 / qmax as f64;
    let mut h = f16::from_f64(exact);
    if h.to_f64() == 0.0 || max_abs as f64 / h.to_f64() >= qmax as f64 + 0.5 {
        h = f16::from_bits(h.to_bits() + 1);
    }
    ensure!(
        h.is_finite(),
        Validation,
        "block scale {exact} exceeds the half-precision range"
    );
    Ok(h)
}

struct Packer<'a> {
    out: &'a mut Vec<u8>,
    bits: BitWidth,
    pending: Option<u8>,
}

impl<'a> Packer<'a> {
    fn new(out: &'a mut Vec<u8>, bits: BitWidth) -> Self {
        Packer {
            out,
            bits,
            pending: None,
        }
    }

    fn push(&mut self, code: i32) {
        match self.bits {
            BitWidth::Int8 => self.out.push(code as i8 as u8),
            BitWidth::Int4 => {
                let nibble = (code as u8) & 0x0f;
                match self.pending.take() {
                    None => self.pending = Some(nibble),
                    Some(lo) => self.out.push(lo | (nibble << 4)),
                }
            }
        }
    }

    fn finish(self) {
        if let Some(lo) = self.pending {
            self.out.push(lo);
        }
    }
}

/// Quantizes one block, appending its codes and returning the scale.
fn quantize_block(block: &[f32], bits: BitWidth, packer: &mut Packer<'_>) -> Result<f16> {
    let max_abs = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let qmax = bits.qmax();
    if max_abs == 0.0 {
        for _ in block {
            packer.push(0);
        }
        return Ok(f16::ZERO);
    }
    let scale = block_scale(max_abs, qmax)?;
    let s = scale.to_f64();
    for &x in block {
        let c = (x as f64 / s).round_ties_even() as i32;
        packer.push(c.clamp(-qmax, qmax));
    }
    Ok(scale)
}

pub(crate) fn quantize_values(values: &[f32], cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    check_finite(values)?;
    let block = cfg.effective_block(values.len());
    let mut codes = Vec::with_capacity(cfg.bit_width.packed_len(values.len()));
    let mut scales = Vec::with_capacity(values.len().div_ceil(block));
    let mut packer = Packer::new(&mut codes, cfg.bit_width);
    for chunk in values.chunks(block) {
        scales.push(quantize_block(chunk, cfg.bit_width, &mut packer)?);
    }
    packer.finish();
    Ok(QuantizedTensor {
        codes,
        scales,
        original_len: values.len(),
        config: *cfg,
        block,
    })
}

/// Blockwise symmetric quantization of `t`.
pub fn quantize(t: &FlatTensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    quantize_values(t.values(), cfg)
}

/// Calls `f(i, value)` for every dequantized element without allocating.
pub(crate) fn for_each_dequantized(q: &QuantizedTensor, mut f: impl FnMut(usize, f32)) {
    for (b, scale) in q.scales.iter().enumerate() {
        let s = scale.to_f32();
        let start = b * q.block;
        let end = (start + q.block).min(q.original_len);
        for i in start..end {
            f(i, q.code(i) as f32 * s);
        }
    }
}

pub(crate) fn dequantize_values(q: &QuantizedTensor) -> Result<Vec<f32>> {
    q.check_integrity()?;
    let mut out = vec![0.0f32; q.original_len];
    for_each_dequantized(q, |i, v| out[i] = v);
    Ok(out)
}

/// `code * scale` per element.
pub fn dequantize(q: &QuantizedTensor) -> Result<FlatTensor> {
    Ok(FlatTensor::from_trusted(dequantize_values(q)?, WireWidth::Half))
}

/// Dequantizes each input, sums them left to right in `f32`, and requantizes,
/// one output block at a time.
pub fn fused_dequant_reduce_quant(
    inputs: &[QuantizedTensor],
    out_cfg: &QuantConfig,
) -> Result<QuantizedTensor> {
    out_cfg.validate()?;
    let first = inputs
        .first()
        .ok_or_else(|| Error::Validation("fused reduction needs at least one input".into()))?;
    for (k, q) in inputs.iter().enumerate() {
        ensure!(
            q.same_layout(first),
            Validation,
            "input {k} does not match the length/config of input 0"
        );
        q.check_integrity()?;
    }
    let len = first.original_len;
    let block = out_cfg.effective_block(len);
    let mut codes = Vec::with_capacity(out_cfg.bit_width.packed_len(len));
    let mut scales = Vec::with_capacity(len.div_ceil(block));
    let mut packer = Packer::new(&mut codes, out_cfg.bit_width);
    let mut acc = vec![0.0f32; block.min(len)];
    let mut start = 0;
    while start < len {
        let end = (start + block).min(len);
        let buf = &mut acc[..end - start];
        for (j, slot) in buf.iter_mut().enumerate() {
            let i = start + j;
            let mut sum = first.code(i) as f32 * first.scale_of(i);
            for q in &inputs[1..] {
                sum += q.code(i) as f32 * q.scale_of(i);
            }
            *slot = sum;
        }
        scales.push(quantize_block(buf, out_cfg.bit_width, &mut packer)?);
        start = end;
    }
    packer.finish();
    Ok(QuantizedTensor {
        codes,
        scales,
        original_len: len,
        config: *out_cfg,
        block,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantErrorStats {
    pub rmse: f64,
    pub max_abs_error: f64,
    /// Elements whose round-trip error exceeds half their block's scale. Always 0.
    pub per_block_bound_violations: usize,
}

/// Round-trip error of `dequantize(quantize(t, cfg))` against `t`.
pub fn quant_error_stats(t: &FlatTensor, cfg: &QuantConfig) -> Result<QuantErrorStats> {
    let q = quantize(t, cfg)?;
    let mut sq = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut violations = 0;
    for_each_dequantized(&q, |i, v| {
        let err = (v as f64 - t.values()[i] as f64).abs();
        sq += err * err;
        max_abs_error = max_abs_error.max(err);
        if err > q.scale_of(i) as f64 / 2.0 {
            violations += 1;
        }
    });
    let n = t.len().max(1) as f64;
    Ok(QuantErrorStats {
        rmse: (sq / n).sqrt(),
        max_abs_error,
        per_block_bound_violations: violations,
    })
}
