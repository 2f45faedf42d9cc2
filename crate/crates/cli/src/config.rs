//! Run configuration: built-in defaults, then an optional TOML file, then
//! `--override key=value` edits, then strict deserialization and validation.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zeropp_core::engine::AdamParams;
use zeropp_core::partitioner::MemoryModel;
use zeropp_core::{BitWidth, ClusterTopology, LinkCost, LinkParams, ModelShape, QuantConfig, ZeroConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Training steps per variant.
    pub steps: usize,
    /// Output directory for CSV and JSON reports.
    pub out: PathBuf,
    /// Parameter count of the simulated communication iteration.
    pub params: usize,
    pub topology: TopologyConfig,
    pub links: LinksConfig,
    pub zero: ZeroSection,
    pub train: TrainSection,
    pub quant_bench: QuantBenchSection,
    pub latency: LatencySection,
    pub memory: MemorySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            steps: 500,
            out: PathBuf::from("out"),
            params: 1 << 20,
            topology: TopologyConfig {
                nodes: 4,
                gpus_per_node: 8,
            },
            links: LinksConfig::default(),
            zero: ZeroSection::default(),
            train: TrainSection::default(),
            quant_bench: QuantBenchSection::default(),
            latency: LatencySection::default(),
            memory: MemorySection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: usize,
    pub gpus_per_node: usize,
}

impl TopologyConfig {
    pub fn build(&self) -> Result<ClusterTopology> {
        Ok(ClusterTopology::new(self.nodes, self.gpus_per_node)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Seconds per message.
    pub alpha: f64,
    /// Bytes per second.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinksConfig {
    pub intra: CostConfig,
    pub inter: CostConfig,
    /// Codec throughput in elements per second; absent means free.
    pub codec_rate: Option<f64>,
}

impl Default for LinksConfig {
    fn default() -> Self {
        let d = LinkParams::dgx_like();
        LinksConfig {
            intra: CostConfig {
                alpha: d.intra.alpha,
                beta: d.intra.beta,
            },
            inter: CostConfig {
                alpha: d.inter.alpha,
                beta: d.inter.beta,
            },
            codec_rate: d.codec_rate,
        }
    }
}

impl LinksConfig {
    pub fn build(&self) -> Result<LinkParams> {
        let cost = |c: CostConfig| LinkCost {
            alpha: c.alpha,
            beta: c.beta,
        };
        let p = LinkParams {
            intra: cost(self.intra),
            inter: cost(self.inter),
            codec_rate: self.codec_rate,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroSection {
    pub qwz: bool,
    pub hpz: bool,
    pub qgz: bool,
    pub weight_bits: u8,
    pub weight_block: usize,
    pub grad_bits: u8,
    pub grad_block: usize,
    /// Bit width of the intra-node gradient hop; defaults to `grad_bits`.
    pub intra_grad_bits: Option<u8>,
    /// One scale per tensor instead of per block.
    pub full_tensor: bool,
    pub passthrough: bool,
    pub stages: usize,
    pub secondary_group: Option<usize>,
    pub qgz_fraction: f64,
}

impl Default for ZeroSection {
    fn default() -> Self {
        let z = ZeroConfig::zeropp();
        ZeroSection {
            qwz: z.qwz,
            hpz: z.hpz,
            qgz: z.qgz,
            weight_bits: z.weight_quant.bit_width.bits(),
            weight_block: z.weight_quant.block_size,
            grad_bits: z.grad_quant.bit_width.bits(),
            grad_block: z.grad_quant.block_size,
            intra_grad_bits: None,
            full_tensor: false,
            passthrough: z.passthrough,
            stages: z.stages,
            secondary_group: z.secondary_group,
            qgz_fraction: z.qgz_fraction,
        }
    }
}

impl ZeroSection {
    pub fn build(&self) -> Result<ZeroConfig> {
        let cfg = ZeroConfig {
            qwz: self.qwz,
            hpz: self.hpz,
            qgz: self.qgz,
            weight_quant: QuantConfig::blocked(self.weight_bits, self.weight_block)?,
            grad_quant: QuantConfig::blocked(self.grad_bits, self.grad_block)?,
            intra_grad_quant: self
                .intra_grad_bits
                .map(|b| QuantConfig::blocked(b, self.grad_block))
                .transpose()?,
            passthrough: self.passthrough,
            stages: self.stages,
            secondary_group: self.secondary_group,
            qgz_fraction: self.qgz_fraction,
        };
        Ok(if self.full_tensor { cfg.full_tensor()? } else { cfg })
    }
}

/// Names accepted in `train.variants`.
pub const TRAIN_VARIANTS: [&str; 5] = ["baseline", "zeropp", "full-tensor", "interleaved", "qgz-off"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Training runs on its own, smaller cluster so the default run stays fast.
    pub topology: TopologyConfig,
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub batch_rows: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub noise: f64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub loss_scale: f32,
    /// qgZ fraction of the `interleaved` variant.
    pub interleave_fraction: f64,
    pub variants: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamParams::default();
        TrainSection {
            topology: TopologyConfig {
                nodes: 2,
                gpus_per_node: 2,
            },
            dims: ModelShape::toy().dims().to_vec(),
            batch_rows: 16,
            train_rows: 4096,
            val_rows: 1024,
            noise: 0.1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            loss_scale: 1024.0,
            interleave_fraction: 0.5,
            variants: TRAIN_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TrainSection {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantBenchSection {
    pub elements: usize,
    pub bits: Vec<u8>,
    pub block_sizes: Vec<usize>,
}

impl Default for QuantBenchSection {
    fn default() -> Self {
        QuantBenchSection {
            elements: 1 << 16,
            bits: vec![4, 8],
            block_sizes: vec![64, 256, 512, 2048],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub max_stages: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection { max_stages: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub params: f64,
    /// Optimizer bytes per parameter.
    pub k: f64,
    pub world: u64,
    /// Number of secondary partition groups.
    pub alpha: u64,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            params: 100e9,
            k: MemoryModel::DEFAULT_K,
            world: 1024,
            alpha: 64,
        }
    }
}

impl MemorySection {
    pub fn build(&self) -> Result<MemoryModel> {
        let m = MemoryModel {
            params: self.params,
            k: self.k,
            world: self.world,
            alpha: self.alpha,
        };
        m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(m)
    }
}

impl RunConfig {
    /// Layers `path` over the defaults, applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: CliError| match e {
            CliError::Core(c) => CliError::Config(c.to_string()),
            other => other,
        };
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(msg.into()))
            }
        };
        check(self.steps >= 1, "steps must be >= 1")?;
        check(self.params >= 1, "params must be >= 1")?;
        let topo = self.topology.build().map_err(config)?;
        self.links.build().map_err(config)?;
        self.zero
            .build()
            .and_then(|z| Ok(z.validate(&topo)?))
            .map_err(config)?;

        let t = &self.train;
        let train_topo = t.topology.build().map_err(config)?;
        self.zero
            .build()
            .and_then(|z| Ok(z.validate(&train_topo)?))
            .map_err(config)?;
        ModelShape::new(t.dims.clone()).map_err(|e| config(e.into()))?;
        check(
            t.batch_rows >= 1 && t.train_rows >= 1 && t.val_rows >= 1,
            "train row counts must be >= 1",
        )?;
        check(t.noise.is_finite() && t.noise >= 0.0, "train.noise must be >= 0")?;
        check(t.lr.is_finite() && t.lr >= 0.0, "train.lr must be >= 0")?;
        check(
            t.loss_scale.is_finite() && t.loss_scale > 0.0,
            "train.loss_scale must be > 0",
        )?;
        check(
            (0.0..=1.0).contains(&t.interleave_fraction),
            "train.interleave_fraction must be in [0, 1]",
        )?;
        check(!t.variants.is_empty(), "train.variants is empty")?;
        for v in &t.variants {
            check(
                TRAIN_VARIANTS.contains(&v.as_str()),
                &format!("unknown train variant {v:?}; expected one of {TRAIN_VARIANTS:?}"),
            )?;
        }

        let q = &self.quant_bench;
        check(q.elements >= 1, "quant_bench.elements must be >= 1")?;
        check(
            !q.bits.is_empty() && !q.block_sizes.is_empty(),
            "quant_bench needs bits and block sizes",
        )?;
        for &b in &q.bits {
            BitWidth::from_bits(b).map_err(|e| config(e.into()))?;
            for &s in &q.block_sizes {
                QuantConfig::blocked(b, s).map_err(|e| config(e.into()))?;
            }
        }
        check(self.latency.max_stages >= 1, "latency.max_stages must be >= 1")?;
        self.memory.build()?;
        Ok(())
    }
}

/// Copies `top` into `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets the dotted `key` of `doc` to `value`, parsed as a TOML value when
/// possible and as a bare string otherwise.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override {spec:?} has an empty key segment"
        )));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {spec:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
