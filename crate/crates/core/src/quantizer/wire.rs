//! Byte layout of a [`QuantizedTensor`]:
//!
//! ```text
//! original_len : u64 LE
//! bit_width    : u8   (4 or 8)
//! block_size   : u32 LE (effective block)
//! scales       : [f16 LE; ceil(original_len / block_size)]
//! codes        : INT8 as i8 bytes, INT4 two's-complement nibbles, low nibble first
//! ```

use half::f16;

use super::{BitWidth, QuantConfig, QuantMode, QuantizedTensor, BLOCK_ALIGN, SCALE_BYTES};
use crate::error::{ensure, Error, Result};

pub const HEADER_LEN: usize = 8 + 1 + 4;

impl QuantizedTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.wire_bytes());
        out.extend_from_slice(&(self.original_len as u64).to_le_bytes());
        out.push(self.config.bit_width.bits());
        out.extend_from_slice(&(self.block as u32).to_le_bytes());
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.codes);
        out
    }

    /// Parses the layout written by [`QuantizedTensor::to_bytes`]. Code ranges
    /// are checked lazily by `dequantize`.
    ///
    /// The decoded config is always [`QuantMode::Blocked`] with the effective block.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= HEADER_LEN,
            Integrity,
            "payload of {} bytes is shorter than the header",
            bytes.len()
        );
        let original_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let original_len = usize::try_from(original_len)
            .map_err(|_| Error::Integrity("original_len overflows usize".into()))?;
        let bit_width = BitWidth::from_bits(bytes[8]).map_err(|e| Error::Integrity(e.to_string()))?;
        let block = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        ensure!(
            block >= BLOCK_ALIGN && block.is_multiple_of(BLOCK_ALIGN),
            Integrity,
            "block size {block} is not a positive multiple of {BLOCK_ALIGN}"
        );
        let n_scales = original_len.div_ceil(block);
        let code_len = bit_width.packed_len(original_len);
        let expected = HEADER_LEN + n_scales * SCALE_BYTES + code_len;
        ensure!(
            bytes.len() == expected,
            Integrity,
            "expected {expected} bytes, got {}",
            bytes.len()
        );
        let body = &bytes[HEADER_LEN..];
        let scales = body[..n_scales * SCALE_BYTES]
            .chunks_exact(SCALE_BYTES)
            .map(|c| f16::from_le_bytes([c[0], c[1]]))
            .collect();
        let codes = body[n_scales * SCALE_BYTES..].to_vec();
        Ok(QuantizedTensor {
            codes,
            scales,
            original_len,
            config: QuantConfig {
                bit_width,
                block_size: block,
                mode: QuantMode::Blocked,
            },
            block,
        })
    }
}
