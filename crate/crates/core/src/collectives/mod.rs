//! Collective algorithms built on [`SimNet`](crate::simnet::SimNet).
//!
//! Full-precision partial sums travel as `f64` and are charged at the wire
//! width of the input tensors, so ring and all-to-all reductions of values
//! that are exactly representable in half precision agree bit for bit
//! regardless of the order in which each algorithm adds them.

mod gather;
mod qgz;
mod reduce_scatter;
mod reorder;

use std::sync::Arc;

pub use gather::{all_gather_baseline, all_gather_grouped, all_gather_qwz};
pub use qgz::{qgz_1hop, qgz_2hop, QgzOptions};
pub use reduce_scatter::{reduce_scatter_ring, reduce_scatter_ring_naive_quant};
pub use reorder::{reorder_mapping, ReorderPermutation};

use crate::error::{ensure, Result};
use crate::quantizer::{self, FlatTensor, QuantConfig, QuantizedTensor, WireWidth, HEADER_LEN};
use crate::simnet::WireSize;
use crate::topology::{ByteCount, CollectiveTrace};

pub const FWD_ALLGATHER: &str = "fwd_allgather";
pub const BWD_ALLGATHER: &str = "bwd_allgather";
pub const GRAD_REDUCE_SCATTER: &str = "grad_reduce_scatter";

/// How a collective encodes what it puts on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    /// Values travel unmodified; charged at the tensor's wire width.
    Passthrough,
    Quantized(QuantConfig),
}

impl Codec {
    /// Slice boundaries must be multiples of this.
    pub fn alignment(&self) -> usize {
        match self {
            Codec::Passthrough => 1,
            Codec::Quantized(cfg) => cfg.alignment(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Codec::Quantized(_))
    }

    fn encode(&self, values: &[f32], real: usize, wire: WireWidth) -> Result<Part> {
        let body = match self {
            Codec::Passthrough => Body::Raw(values.iter().map(|&v| v as f64).collect()),
            Codec::Quantized(cfg) => Body::Quant(Arc::new(quantizer::quantize_values(values, cfg)?)),
        };
        Ok(Part { body, real, wire })
    }

    fn encode_wide(&self, values: Vec<f64>, real: usize, wire: WireWidth) -> Result<Part> {
        match self {
            Codec::Passthrough => Ok(Part {
                body: Body::Raw(values.into()),
                real,
                wire,
            }),
            Codec::Quantized(_) => {
                let narrow: Vec<f32> = values.iter().map(|&v| v as f32).collect();
                self.encode(&narrow, real, wire)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Raw(Arc<[f64]>),
    Quant(Arc<QuantizedTensor>),
}

/// One tensor slice on the wire.
#[derive(Debug, Clone)]
struct Part {
    body: Body,
    /// Leading elements that are real data; the rest is zero padding.
    real: usize,
    wire: WireWidth,
}

impl Part {
    fn len(&self) -> usize {
        match &self.body {
            Body::Raw(v) => v.len(),
            Body::Quant(q) => q.original_len(),
        }
    }

    fn quantized(&self) -> Option<&QuantizedTensor> {
        match &self.body {
            Body::Quant(q) => Some(q),
            Body::Raw(_) => None,
        }
    }

    /// Scale of the block holding element `i`, zero when unquantized.
    fn scale_of(&self, i: usize) -> f32 {
        self.quantized().map_or(0.0, |q| q.scale_of(i))
    }

    /// Adds the decoded values into `acc`.
    fn accumulate(&self, acc: &mut [f64]) -> Result<()> {
        ensure!(
            acc.len() == self.len(),
            Validation,
            "slice of {} elements accumulated into {}",
            self.len(),
            acc.len()
        );
        match &self.body {
            Body::Raw(v) => acc.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += x),
            Body::Quant(q) => {
                let vals = quantizer::dequantize_values(q)?;
                acc.iter_mut().zip(vals).for_each(|(a, x)| *a += x as f64);
            }
        }
        Ok(())
    }

    fn decode_f32(&self) -> Result<Vec<f32>> {
        match &self.body {
            Body::Raw(v) => Ok(v.iter().map(|&x| x as f32).collect()),
            Body::Quant(q) => quantizer::dequantize_values(q),
        }
    }

    fn bytes(&self) -> ByteCount {
        match &self.body {
            Body::Raw(v) => {
                let w = self.wire.bytes() as u64;
                ByteCount {
                    payload: self.real as u64 * w,
                    metadata: 0,
                    padding: (v.len() - self.real) as u64 * w,
                }
            }
            Body::Quant(q) => {
                let bits = q.bit_width();
                let codes = q.code_bytes() as u64;
                let payload = bits.packed_len(self.real) as u64;
                ByteCount {
                    payload,
                    metadata: (q.scale_bytes() + HEADER_LEN) as u64,
                    padding: codes - payload,
                }
            }
        }
    }
}

/// Message of the gather and ring collectives: one slice plus how many
/// quantize passes its values have been through.
#[derive(Debug, Clone)]
struct Packet {
    part: Part,
    depth: u32,
}

impl WireSize for Packet {
    fn wire_bytes(&self) -> ByteCount {
        self.part.bytes()
    }
}

/// Per-element record of the largest block scales met on the way through a
/// two-hop reduction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScaleProbe {
    /// Largest first-hop (intra-node) scale over the contributing blocks.
    pub intra: f32,
    /// Largest second-hop (inter-node) scale over the contributing blocks.
    pub inter: f32,
}

/// Result of one collective.
#[derive(Debug, Clone)]
pub struct CollectiveOutput {
    /// One tensor per rank.
    pub outputs: Vec<FlatTensor>,
    pub trace: CollectiveTrace,
    /// Largest number of sequential quantize passes any output element went through.
    pub quantize_passes: u32,
    /// Per rank, per output element; only filled by the two-hop reduction.
    pub scale_probe: Option<Vec<Vec<ScaleProbe>>>,
}

fn common_len(inputs: &[FlatTensor], what: &str) -> Result<(usize, WireWidth)> {
    let first = inputs
        .first()
        .ok_or_else(|| crate::Error::Validation(format!("{what}: no inputs")))?;
    for (r, t) in inputs.iter().enumerate() {
        ensure!(
            t.len() == first.len(),
            Validation,
            "{what}: rank {r} has {} elements, rank 0 has {}",
            t.len(),
            first.len()
        );
    }
    Ok((first.len(), first.wire()))
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
