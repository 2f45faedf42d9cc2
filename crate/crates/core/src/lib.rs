//! Deterministic multi-rank cluster simulator with the collectives of a
//! sharded data-parallel training step: ring all-gather and reduce-scatter,
//! blockwise-quantized weight all-gather, hierarchical secondary-partition
//! all-gather, and the two-hop quantized all-to-all gradient reduce-scatter.
//!
//! Traffic is accounted byte-exactly per link class, latency is estimated
//! with an alpha-beta model, and a small training engine ties everything
//! together on a toy regression model.

pub mod collectives;
pub mod engine;
pub mod error;
pub mod partitioner;
pub mod quantizer;
pub mod simnet;
pub mod topology;

pub use collectives::{Codec, CollectiveOutput, QgzOptions};
pub use engine::{train_toy, Engine, ModelShape, StepRecord, ToyConfig, TrainRecord, ZeroConfig};
pub use error::{Error, Result};
pub use partitioner::{build_partitions, memory_per_device, MemoryMode, MemoryModel, PartitionSpec};
pub use quantizer::{
    dequantize, fused_dequant_reduce_quant, quant_error_stats, quantize, BitWidth, FlatTensor, QuantConfig,
    QuantErrorStats, QuantMode, QuantizedTensor, WireWidth,
};
pub use topology::{
    ByteCount, ClusterTopology, CollectiveTrace, LatencyEstimate, LinkClass, LinkCost, LinkParams, Rank,
    TrafficLedger,
};
