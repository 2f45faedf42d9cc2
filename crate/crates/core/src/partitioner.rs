//! Primary (world-wide) and secondary (per-group) ownership of a flat
//! parameter vector, and the per-device memory model.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::topology::{ClusterTopology, Rank};

/// Contiguous equal shards at two levels: every rank owns `len / world`
/// elements of the primary partition, and inside each group of `group`
/// consecutive ranks every rank holds `len / group` elements of a secondary
/// copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    len: usize,
    world: usize,
    group: usize,
}

/// Partitions `len` parameters over `topo` with secondary groups of `group` ranks.
pub fn build_partitions(len: usize, topo: &ClusterTopology, group: usize) -> Result<PartitionSpec> {
    PartitionSpec::new(len, topo.world(), group)
}

impl PartitionSpec {
    pub fn new(len: usize, world: usize, group: usize) -> Result<Self> {
        ensure!(world >= 1, Validation, "world must be >= 1");
        ensure!(
            group >= 1 && world.is_multiple_of(group),
            Validation,
            "secondary group size {group} does not divide world {world}"
        );
        ensure!(
            len.is_multiple_of(world),
            Validation,
            "{len} parameters do not split evenly over {world} ranks"
        );
        Ok(PartitionSpec { len, world, group })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn group_size(&self) -> usize {
        self.group
    }

    /// Number of secondary replicas, `world / group`.
    pub fn replicas(&self) -> usize {
        self.world / self.group
    }

    pub fn primary_shard_len(&self) -> usize {
        self.len / self.world
    }

    pub fn secondary_shard_len(&self) -> usize {
        self.len / self.group
    }

    pub fn primary_range(&self, rank: Rank) -> Range<usize> {
        let n = self.primary_shard_len();
        rank * n..(rank + 1) * n
    }

    pub fn primary_owner(&self, index: usize) -> Rank {
        index / self.primary_shard_len()
    }

    pub fn group_of(&self, rank: Rank) -> usize {
        rank / self.group
    }

    /// Ranks of secondary group `g`.
    pub fn group_ranks(&self, g: usize) -> Range<Rank> {
        g * self.group..(g + 1) * self.group
    }

    pub fn secondary_range(&self, rank: Rank) -> Range<usize> {
        let n = self.secondary_shard_len();
        let pos = rank % self.group;
        pos * n..(pos + 1) * n
    }

    /// Rank of secondary group `g` holding element `index` of the secondary copy.
    pub fn secondary_owner(&self, index: usize, g: usize) -> Rank {
        g * self.group + index / self.secondary_shard_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemoryMode {
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "ZeRO3")]
    Zero3,
    #[serde(rename = "hpZ")]
    Hpz,
    #[serde(rename = "MiCS")]
    Mics,
}

impl MemoryMode {
    pub const ALL: [MemoryMode; 4] = [
        MemoryMode::Dp,
        MemoryMode::Zero3,
        MemoryMode::Hpz,
        MemoryMode::Mics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryMode::Dp => "DP",
            MemoryMode::Zero3 => "ZeRO3",
            MemoryMode::Hpz => "hpZ",
            MemoryMode::Mics => "MiCS",
        }
    }
}

/// Inputs of the per-device memory formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Trainable parameters.
    pub params: f64,
    /// Optimizer-state bytes per parameter on top of FP16 weights and gradients.
    pub k: f64,
    /// Devices.
    pub world: u64,
    /// Secondary groups (replicas).
    pub alpha: u64,
}

impl MemoryModel {
    pub const DEFAULT_K: f64 = 12.0;

    pub fn new(params: f64, world: u64, alpha: u64) -> Result<Self> {
        let m = MemoryModel {
            params,
            k: Self::DEFAULT_K,
            world,
            alpha,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.params.is_finite() && self.params >= 1.0,
            Validation,
            "parameter count must be >= 1"
        );
        ensure!(self.k.is_finite() && self.k >= 0.0, Validation, "K must be >= 0");
        ensure!(self.world >= 1, Validation, "world must be >= 1");
        ensure!(
            self.alpha >= 1 && self.world.is_multiple_of(self.alpha),
            Validation,
            "group size world/alpha is not an integer (world {}, alpha {})",
            self.world,
            self.alpha
        );
        Ok(())
    }

    /// Bytes per parameter held by every ZeRO-style mode: FP16 weights,
    /// FP16 gradients and the optimizer states.
    fn state_bytes(&self) -> f64 {
        (2.0 + 2.0 + self.k) * self.params
    }
}

/// Per-device bytes of model states under `mode`.
pub fn memory_per_device(mode: MemoryMode, model: &MemoryModel) -> Result<f64> {
    model.validate()?;
    let p = model.world as f64;
    let a = model.alpha as f64;
    let full = model.state_bytes();
    Ok(match mode {
        MemoryMode::Dp => full,
        MemoryMode::Zero3 => full / p,
        MemoryMode::Hpz => full / p + 2.0 * model.params * a / p,
        MemoryMode::Mics => full * a / p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryRow {
    pub mode: MemoryMode,
    #[serde(rename = "M")]
    pub params: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "P")]
    pub world: u64,
    pub alpha: u64,
    pub bytes: f64,
    #[serde(rename = "ratio_vs_ZeRO3")]
    pub ratio_vs_zero3: f64,
}

/// One row per mode, with each mode's footprint relative to ZeRO-3.
pub fn memory_report(model: &MemoryModel) -> Result<Vec<MemoryRow>> {
    let zero3 = memory_per_device(MemoryMode::Zero3, model)?;
    MemoryMode::ALL
        .iter()
        .map(|&mode| {
            let bytes = memory_per_device(mode, model)?;
            Ok(MemoryRow {
                mode,
                params: model.params,
                k: model.k,
                world: model.world,
                alpha: model.alpha,
                bytes,
                ratio_vs_zero3: bytes / zero3,
            })
        })
        .collect()
}
