//! The sharded training step over the simulator: forward all-gather,
//! forward, backward all-gather, backward, gradient reduce-scatter and an
//! Adam update on each rank's primary shard.
//!
//! Weights and gradients are rounded to half precision wherever they cross
//! a partition or communication boundary; all arithmetic runs in `f64`
//! (model) or `f32` (master weights and optimizer moments).

mod model;

use std::io::{self, Write};

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

pub use model::{gradient_check, Batch, ModelShape, SyntheticTask};

use crate::collectives::{
    all_gather_grouped, qgz_2hop, reduce_scatter_ring, Codec, CollectiveOutput, QgzOptions, BWD_ALLGATHER,
    FWD_ALLGATHER, GRAD_REDUCE_SCATTER,
};
use crate::error::{ensure, Result};
use crate::partitioner::PartitionSpec;
use crate::quantizer::{FlatTensor, QuantConfig};
use crate::simnet::SimNet;
use crate::topology::{
    estimate_latency, ClusterTopology, CollectiveTrace, LinkClass, LinkParams, TrafficLedger,
};

/// Which communication optimizations a run uses and how they are configured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroConfig {
    /// Quantized forward (and, without hpZ, backward) weight all-gather.
    pub qwz: bool,
    /// Secondary weight copy so the backward all-gather stays in the group.
    pub hpz: bool,
    /// Two-hop quantized gradient reduce-scatter.
    pub qgz: bool,
    pub weight_quant: QuantConfig,
    pub grad_quant: QuantConfig,
    /// Codec of the intra-node gradient hop; defaults to `grad_quant`.
    pub intra_grad_quant: Option<QuantConfig>,
    /// Replace every codec by the identity, leaving only routing changes.
    pub passthrough: bool,
    /// Pipeline stages of the gradient reduce-scatter.
    pub stages: usize,
    /// Ranks per secondary group; defaults to the GPUs of one node.
    pub secondary_group: Option<usize>,
    /// Fraction of the run, from step 0, during which qgZ is on.
    pub qgz_fraction: f64,
}

impl Default for ZeroConfig {
    fn default() -> Self {
        ZeroConfig::zeropp()
    }
}

impl ZeroConfig {
    /// All three optimizations with the default INT8 weight and INT4 gradient codecs.
    pub fn zeropp() -> Self {
        ZeroConfig {
            qwz: true,
            hpz: true,
            qgz: true,
            weight_quant: QuantConfig::weights_default(),
            grad_quant: QuantConfig::gradients_default(),
            intra_grad_quant: None,
            passthrough: false,
            stages: 1,
            secondary_group: None,
            qgz_fraction: 1.0,
        }
    }

    /// Plain ZeRO-3 communication.
    pub fn baseline() -> Self {
        ZeroConfig {
            qwz: false,
            hpz: false,
            qgz: false,
            ..Self::zeropp()
        }
    }

    pub fn with_toggles(mut self, qwz: bool, hpz: bool, qgz: bool) -> Self {
        self.qwz = qwz;
        self.hpz = hpz;
        self.qgz = qgz;
        self
    }

    /// One scale per tensor (per slice for the gradient all-to-all) instead
    /// of per block, for weights and gradients alike.
    pub fn full_tensor(mut self) -> Result<Self> {
        self.weight_quant = QuantConfig::full_tensor(self.weight_quant.bit_width.bits())?;
        self.grad_quant = QuantConfig::full_tensor(self.grad_quant.bit_width.bits())?;
        if let Some(q) = self.intra_grad_quant {
            self.intra_grad_quant = Some(QuantConfig::full_tensor(q.bit_width.bits())?);
        }
        Ok(self)
    }

    pub fn validate(&self, topo: &ClusterTopology) -> Result<()> {
        self.weight_quant.validate()?;
        self.grad_quant.validate()?;
        if let Some(q) = &self.intra_grad_quant {
            q.validate()?;
        }
        ensure!(self.stages >= 1, Config, "pipeline stages must be >= 1");
        ensure!(
            (0.0..=1.0).contains(&self.qgz_fraction),
            Config,
            "qgZ schedule fraction {} is outside [0, 1]",
            self.qgz_fraction
        );
        let g = self.group(topo);
        ensure!(
            g >= 1 && topo.world().is_multiple_of(g),
            Config,
            "secondary group size {g} does not divide world {}",
            topo.world()
        );
        Ok(())
    }

    pub fn group(&self, topo: &ClusterTopology) -> usize {
        self.secondary_group.unwrap_or(topo.gpus_per_node())
    }

    fn codec(&self, q: QuantConfig) -> Codec {
        if self.passthrough {
            Codec::Passthrough
        } else {
            Codec::Quantized(q)
        }
    }

    pub fn weight_codec(&self) -> Codec {
        self.codec(self.weight_quant)
    }

    pub fn qgz_options(&self) -> QgzOptions {
        QgzOptions {
            codec: self.codec(self.grad_quant),
            intra_codec: self.intra_grad_quant.map(|q| self.codec(q)),
            stages: self.stages,
            reorder: true,
        }
    }

    /// Whether qgZ runs at `step` of a `total`-step run (always, without a total).
    pub fn qgz_active(&self, step: usize, total: Option<usize>) -> bool {
        self.qgz
            && match total {
                None => true,
                Some(t) => (step as f64) < (self.qgz_fraction * t as f64).round(),
            }
    }

    /// Parameter count after zero padding so that every collective splits evenly.
    pub fn padded_len(&self, params: usize, world: usize) -> usize {
        let g = QgzOptions {
            codec: Codec::Quantized(self.grad_quant),
            ..self.qgz_options()
        }
        .granularity(world)
        .max(world);
        params.div_ceil(g) * g
    }
}

/// Toggles in effect for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Toggles {
    pub qwz: bool,
    pub hpz: bool,
    pub qgz: bool,
}

/// Normalized inter-node volume per collective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VolumeRow {
    pub fwd: f64,
    pub bwd: f64,
    pub rs: f64,
}

impl VolumeRow {
    pub fn total(&self) -> f64 {
        self.fwd + self.bwd + self.rs
    }

    fn from_ledger(ledger: &TrafficLedger, m: u64, wire: bool) -> Self {
        let v = |label| {
            if wire {
                ledger.normalized_wire_volume(label, LinkClass::Inter, m)
            } else {
                ledger.normalized_volume(label, LinkClass::Inter, m)
            }
        };
        VolumeRow {
            fwd: v(FWD_ALLGATHER),
            bwd: v(BWD_ALLGATHER),
            rs: v(GRAD_REDUCE_SCATTER),
        }
    }
}

fn round_half(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

fn half_tensor(values: impl IntoIterator<Item = f32>) -> Result<FlatTensor> {
    FlatTensor::half(values.into_iter().map(round_half).collect())
}

fn forward_gather(
    net: &mut SimNet,
    cfg: &ZeroConfig,
    on: Toggles,
    shards: &[FlatTensor],
) -> Result<CollectiveOutput> {
    let world = net.topology().world();
    let codec = if on.qwz {
        cfg.weight_codec()
    } else {
        Codec::Passthrough
    };
    dequantized_to_half(all_gather_grouped(net, FWD_ALLGATHER, shards, world, codec)?)
}

/// With hpZ the secondary shard is cut from the weights gathered for the
/// forward pass and re-gathered inside the group; otherwise the primary
/// shards are gathered world-wide again.
fn backward_gather(
    net: &mut SimNet,
    cfg: &ZeroConfig,
    on: Toggles,
    spec: &PartitionSpec,
    primary: &[FlatTensor],
    forward: &[FlatTensor],
) -> Result<CollectiveOutput> {
    if on.hpz {
        let secondary = forward
            .iter()
            .enumerate()
            .map(|(r, w)| FlatTensor::half(w.values()[spec.secondary_range(r)].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        all_gather_grouped(
            net,
            BWD_ALLGATHER,
            &secondary,
            spec.group_size(),
            Codec::Passthrough,
        )
    } else {
        let codec = if on.qwz {
            cfg.weight_codec()
        } else {
            Codec::Passthrough
        };
        let world = spec.world();
        dequantized_to_half(all_gather_grouped(net, BWD_ALLGATHER, primary, world, codec)?)
    }
}

fn dequantized_to_half(mut out: CollectiveOutput) -> Result<CollectiveOutput> {
    out.outputs = out
        .outputs
        .into_iter()
        .map(|t| half_tensor(t.into_values()))
        .collect::<Result<_>>()?;
    Ok(out)
}

fn reduce_gradients(
    net: &mut SimNet,
    cfg: &ZeroConfig,
    on: Toggles,
    grads: &[FlatTensor],
) -> Result<CollectiveOutput> {
    if on.qgz {
        qgz_2hop(net, GRAD_REDUCE_SCATTER, grads, &cfg.qgz_options())
    } else {
        reduce_scatter_ring(net, GRAD_REDUCE_SCATTER, grads)
    }
}

/// Traffic of one iteration's three collectives on random weights and gradients.
#[derive(Debug, Clone)]
pub struct CommIteration {
    pub params: usize,
    pub padded_len: usize,
    pub ledger: TrafficLedger,
    pub traces: Vec<CollectiveTrace>,
    /// Payload volume against the unpadded parameter count.
    pub volumes: VolumeRow,
    /// Payload plus padding against the padded parameter count.
    pub wire_volumes: VolumeRow,
}

impl CommIteration {
    /// Largest metadata-to-payload ratio over collectives and link classes.
    pub fn max_metadata_ratio(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for label in [FWD_ALLGATHER, BWD_ALLGATHER, GRAD_REDUCE_SCATTER] {
            for class in LinkClass::ALL {
                worst = worst.max(self.ledger.metadata_ratio(label, class));
            }
        }
        worst
    }
}

/// Runs the forward all-gather, backward all-gather and gradient
/// reduce-scatter of one iteration over `params` parameters.
pub fn simulate_comm_iteration(
    topo: ClusterTopology,
    cfg: &ZeroConfig,
    params: usize,
    seed: u64,
) -> Result<CommIteration> {
    cfg.validate(&topo)?;
    let world = topo.world();
    let padded = cfg.padded_len(params, world);
    let spec = PartitionSpec::new(padded, world, cfg.group(&topo))?;
    let mut net = SimNet::new(topo);
    net.logical_len = Some(params);
    let on = Toggles {
        qwz: cfg.qwz,
        hpz: cfg.hpz,
        qgz: cfg.qgz,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight_dist = Normal::new(0.0f32, 0.02).expect("valid normal");
    let grad_dist = Normal::new(0.0f32, 1e-2).expect("valid normal");
    let mut sample = |len: usize, offset: usize, dist: &Normal<f32>| {
        half_tensor((0..len).map(|i| {
            let v = dist.sample(&mut rng);
            if offset + i < params {
                v
            } else {
                0.0
            }
        }))
    };
    let primary = (0..world)
        .map(|r| {
            sample(
                spec.primary_shard_len(),
                spec.primary_range(r).start,
                &weight_dist,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = (0..world)
        .map(|_| sample(padded, 0, &grad_dist))
        .collect::<Result<Vec<_>>>()?;

    let fwd = forward_gather(&mut net, cfg, on, &primary)?;
    let bwd = backward_gather(&mut net, cfg, on, &spec, &primary, &fwd.outputs)?;
    let rs = reduce_gradients(&mut net, cfg, on, &grads)?;
    let ledger = net.take_ledger();
    Ok(CommIteration {
        params,
        padded_len: padded,
        volumes: VolumeRow::from_ledger(&ledger, params as u64, false),
        wire_volumes: VolumeRow::from_ledger(&ledger, padded as u64, true),
        ledger,
        traces: vec![fwd.trace, bwd.trace, rs.trace],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// FP32 master weights and Adam moments of one rank's primary shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardState {
    pub master: Vec<f32>,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
}

impl ShardState {
    fn new(master: Vec<f32>) -> Self {
        let n = master.len();
        ShardState {
            master,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }

    /// Bias-corrected Adam update; `t` counts from 1.
    fn adam(&mut self, grad: &[f32], p: &AdamParams, t: i32) {
        let c1 = 1.0 - p.beta1.powi(t);
        let c2 = 1.0 - p.beta2.powi(t);
        let state = self
            .master
            .iter_mut()
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()));
        for (&g, (w, (m, v))) in grad.iter().zip(state) {
            *m = p.beta1 * *m + (1.0 - p.beta1) * g;
            *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
            *w -= p.lr * (*m / c1) / ((*v / c2).sqrt() + p.eps);
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub fwd_vol: f64,
    pub bwd_ag_vol: f64,
    pub rs_vol: f64,
    pub est_latency_s: f64,
    #[serde(rename = "qwZ")]
    pub qwz: bool,
    #[serde(rename = "hpZ")]
    pub hpz: bool,
    #[serde(rename = "qgZ")]
    pub qgz: bool,
}

/// What one training step did besides its trace row.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: StepRecord,
    /// Weights used by every rank's backward pass equal those of its forward pass.
    pub temporally_consistent: bool,
    /// Loss or gradients were non-finite; no update was applied.
    pub non_finite: bool,
    pub ledger: TrafficLedger,
}

/// Sharded data-parallel trainer for a [`ModelShape`] over a simulated cluster.
#[derive(Debug, Clone)]
pub struct Engine {
    topo: ClusterTopology,
    links: LinkParams,
    cfg: ZeroConfig,
    shape: ModelShape,
    spec: PartitionSpec,
    shards: Vec<ShardState>,
    pub adam: AdamParams,
    /// Static loss scale applied before gradients are rounded to half precision.
    pub loss_scale: f32,
    /// Run length the qgZ schedule refers to.
    pub total_steps: Option<usize>,
    step: usize,
    net: SimNet,
}

impl Engine {
    pub fn new(
        topo: ClusterTopology,
        links: LinkParams,
        cfg: ZeroConfig,
        shape: ModelShape,
        init: &[f64],
    ) -> Result<Self> {
        cfg.validate(&topo)?;
        links.validate()?;
        let m = shape.param_count();
        ensure!(
            init.len() == m,
            Validation,
            "{} initial values for a model of {m} parameters",
            init.len()
        );
        let world = topo.world();
        let padded = cfg.padded_len(m, world);
        let spec = PartitionSpec::new(padded, world, cfg.group(&topo))?;
        let shards = (0..world)
            .map(|r| {
                ShardState::new(
                    spec.primary_range(r)
                        .map(|i| init.get(i).map_or(0.0, |&v| v as f32))
                        .collect(),
                )
            })
            .collect();
        let mut net = SimNet::new(topo);
        net.logical_len = Some(m);
        Ok(Engine {
            topo,
            links,
            cfg,
            shape,
            spec,
            shards,
            adam: AdamParams::default(),
            loss_scale: 1024.0,
            total_steps: None,
            step: 0,
            net,
        })
    }

    pub fn config(&self) -> &ZeroConfig {
        &self.cfg
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn shards(&self) -> &[ShardState] {
        &self.shards
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// FP32 master weights of the unpadded model, in parameter order.
    pub fn master_params(&self) -> Vec<f32> {
        let mut v: Vec<f32> = self
            .shards
            .iter()
            .flat_map(|s| s.master.iter().copied())
            .collect();
        v.truncate(self.shape.param_count());
        v
    }

    /// Loss of the current master weights on `batch`.
    pub fn evaluate(&self, batch: &Batch) -> f64 {
        let p: Vec<f64> = self.master_params().iter().map(|&v| v as f64).collect();
        self.shape.loss(&p, &batch.x, &batch.y, batch.rows)
    }

    /// A plain ZeRO-3 step regardless of the configured toggles.
    pub fn zero3_step(&mut self, batches: &[Batch]) -> Result<StepOutcome> {
        self.run_step(batches, Toggles::default())
    }

    /// A step with the configured optimizations, qgZ following the schedule.
    pub fn zeropp_step(&mut self, batches: &[Batch]) -> Result<StepOutcome> {
        let on = Toggles {
            qwz: self.cfg.qwz,
            hpz: self.cfg.hpz,
            qgz: self.cfg.qgz_active(self.step, self.total_steps),
        };
        self.run_step(batches, on)
    }

    fn run_step(&mut self, batches: &[Batch], on: Toggles) -> Result<StepOutcome> {
        let world = self.topo.world();
        ensure!(
            batches.len() == world,
            Validation,
            "{} batches for a world of {world}",
            batches.len()
        );
        for b in batches {
            ensure!(
                b.x.len() == b.rows * self.shape.input_dim() && b.y.len() == b.rows * self.shape.output_dim(),
                Validation,
                "batch does not match the model's input/output widths"
            );
        }
        let m = self.shape.param_count();
        let padded = self.spec.len();
        let primary = self
            .shards
            .iter()
            .map(|s| half_tensor(s.master.iter().copied()))
            .collect::<Result<Vec<_>>>()?;

        let fwd = forward_gather(&mut self.net, &self.cfg, on, &primary)?;
        let shape = &self.shape;
        let forward: Vec<(f64, Vec<Vec<f64>>)> = fwd
            .outputs
            .par_iter()
            .zip(batches)
            .map(|(w, b)| {
                let p: Vec<f64> = w.values()[..m].iter().map(|&v| v as f64).collect();
                let acts = shape.forward(&p, &b.x, b.rows);
                let pred = acts.last().unwrap();
                let loss =
                    pred.iter().zip(&b.y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
                (loss, acts)
            })
            .collect();
        let loss = forward.iter().map(|(l, _)| l).sum::<f64>() / world as f64;

        let bwd = backward_gather(&mut self.net, &self.cfg, on, &self.spec, &primary, &fwd.outputs)?;
        let temporally_consistent = fwd.outputs == bwd.outputs;
        let scale = self.loss_scale;
        let grads: Vec<Vec<f32>> = bwd
            .outputs
            .par_iter()
            .zip(&forward)
            .zip(batches)
            .map(|((w, (_, acts)), b)| {
                let p: Vec<f64> = w.values()[..m].iter().map(|&v| v as f64).collect();
                let g = shape.backward(&p, acts, &b.y, b.rows);
                let mut out = vec![0.0f32; padded];
                for (o, v) in out.iter_mut().zip(g) {
                    *o = round_half((v * scale as f64) as f32);
                }
                out
            })
            .collect();

        let non_finite = !loss.is_finite() || grads.iter().flatten().any(|v| !v.is_finite());
        let mut traces = vec![fwd.trace, bwd.trace];
        if !non_finite {
            let grads = grads
                .into_iter()
                .map(FlatTensor::half)
                .collect::<Result<Vec<_>>>()?;
            let rs = reduce_gradients(&mut self.net, &self.cfg, on, &grads)?;
            let denom = world as f32 * scale;
            let t = (self.step + 1) as i32;
            let adam = self.adam;
            self.shards.par_iter_mut().zip(&rs.outputs).for_each(|(s, g)| {
                let g: Vec<f32> = g.values().iter().map(|v| v / denom).collect();
                s.adam(&g, &adam, t);
            });
            traces.push(rs.trace);
        }
        let ledger = self.net.take_ledger();
        let vols = VolumeRow::from_ledger(&ledger, padded as u64, true);
        let est_latency_s = traces
            .iter()
            .map(|t| estimate_latency(t, &self.links, t.stages.max(1), true).map(|e| e.total_s))
            .sum::<Result<f64>>()?;
        let record = StepRecord {
            step: self.step,
            loss,
            fwd_vol: vols.fwd,
            bwd_ag_vol: vols.bwd,
            rs_vol: vols.rs,
            est_latency_s,
            qwz: on.qwz,
            hpz: on.hpz,
            qgz: on.qgz,
        };
        self.step += 1;
        Ok(StepOutcome {
            record,
            temporally_consistent,
            non_finite,
            ledger,
        })
    }
}

/// Settings of a toy training run.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub topo: ClusterTopology,
    pub links: LinkParams,
    pub zero: ZeroConfig,
    pub shape: ModelShape,
    /// Rows per rank per step.
    pub batch_rows: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    /// Standard deviation of the label noise.
    pub noise: f64,
    pub adam: AdamParams,
    pub loss_scale: f32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            topo: ClusterTopology::new(2, 2).expect("valid topology"),
            links: LinkParams::dgx_like(),
            zero: ZeroConfig::zeropp(),
            shape: ModelShape::toy(),
            batch_rows: 16,
            train_rows: 4096,
            val_rows: 1024,
            noise: 0.1,
            adam: AdamParams::default(),
            loss_scale: 1024.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

/// Full trace of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub rows: Vec<StepRecord>,
    /// Mean validation loss over the last [`EVAL_WINDOW_FRACTION`] of the
    /// steps; averaging removes the step-to-step jitter of a single snapshot.
    /// NaN after divergence.
    pub final_val_loss: f64,
    /// Validation loss of the final master weights (NaN after divergence).
    pub last_val_loss: f64,
    pub diverged: Option<Divergence>,
}

impl TrainRecord {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,loss,fwd_vol,bwd_ag_vol,rs_vol,est_latency_s,qwZ,hpZ,qgZ")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.step, r.loss, r.fwd_vol, r.bwd_ag_vol, r.rs_vol, r.est_latency_s, r.qwz, r.hpz, r.qgz
            )?;
        }
        Ok(())
    }
}

/// Loss above this multiple of the first step's loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Share of a run, at its end, over which the final validation loss is averaged.
pub const EVAL_WINDOW_FRACTION: f64 = 0.1;

/// Trains the toy model for `steps` steps with `cfg.zero`, checking the
/// analytic gradient first. A diverging run stops early and is reported in
/// the record rather than as an error.
pub fn train_toy(cfg: &ToyConfig, steps: usize, seed: u64) -> Result<TrainRecord> {
    let worst = gradient_check(&cfg.shape, 16, seed);
    ensure!(
        worst <= 1e-4,
        Validation,
        "analytic gradient disagrees with finite differences (relative error {worst:e})"
    );
    let task = SyntheticTask::generate(&cfg.shape, cfg.train_rows, cfg.val_rows, cfg.noise, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let init = cfg.shape.init(&mut rng);
    let mut engine = Engine::new(cfg.topo, cfg.links, cfg.zero, cfg.shape.clone(), &init)?;
    engine.adam = cfg.adam;
    engine.loss_scale = cfg.loss_scale;
    engine.total_steps = Some(steps);
    let world = cfg.topo.world();

    let window = ((steps as f64 * EVAL_WINDOW_FRACTION).round() as usize).clamp(1, steps.max(1));
    let mut rows = Vec::with_capacity(steps);
    let mut diverged = None;
    let mut initial = None;
    let mut tail = Vec::with_capacity(window);
    for step in 0..steps {
        let batches: Vec<Batch> = (0..world)
            .map(|r| task.batch(step, r, world, cfg.batch_rows))
            .collect();
        let out = engine.zeropp_step(&batches)?;
        let loss = out.record.loss;
        rows.push(out.record);
        let first = *initial.get_or_insert(loss);
        if out.non_finite || !loss.is_finite() || loss > DIVERGENCE_FACTOR * first {
            diverged = Some(Divergence { step, loss });
            break;
        }
        if step + window >= steps {
            tail.push(engine.evaluate(&task.validation));
        }
    }
    let (final_val_loss, last_val_loss) = match (diverged, tail.last()) {
        (None, Some(&last)) => (tail.iter().sum::<f64>() / tail.len() as f64, last),
        _ => (f64::NAN, f64::NAN),
    };
    Ok(TrainRecord {
        rows,
        final_val_loss,
        last_val_loss,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ClusterTopology, ModelShape, Vec<f64>, SyntheticTask) {
        let topo = ClusterTopology::new(2, 2).unwrap();
        let shape = ModelShape::new(vec![4, 8, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = shape.init(&mut rng);
        let task = SyntheticTask::generate(&shape, 64, 16, 0.1, 9);
        (topo, shape, init, task)
    }

    fn batches(task: &SyntheticTask, step: usize, world: usize) -> Vec<Batch> {
        (0..world).map(|r| task.batch(step, r, world, 4)).collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (topo, shape, init, task) = tiny();
        let mut e = Engine::new(topo, LinkParams::dgx_like(), ZeroConfig::baseline(), shape, &init).unwrap();
        e.adam.lr = 0.0;
        let before = e.master_params();
        e.zero3_step(&batches(&task, 0, 4)).unwrap();
        assert_eq!(before, e.master_params());
    }

    #[test]
    fn single_rank_matches_local_training() {
        let topo = ClusterTopology::new(1, 1).unwrap();
        let shape = ModelShape::new(vec![4, 8, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = shape.init(&mut rng);
        let task = SyntheticTask::generate(&shape, 64, 16, 0.1, 9);
        let mut e = Engine::new(
            topo,
            LinkParams::dgx_like(),
            ZeroConfig::baseline(),
            shape.clone(),
            &init,
        )
        .unwrap();
        let b = task.batch(0, 0, 1, 4);
        e.zero3_step(std::slice::from_ref(&b)).unwrap();

        // Local step with the same rounding and optimizer.
        let w: Vec<f64> = init.iter().map(|&v| round_half(v as f32) as f64).collect();
        let (_, g) = shape.loss_and_grad(&w, &b.x, &b.y, b.rows);
        let g: Vec<f32> = g
            .iter()
            .map(|&v| round_half((v * 1024.0) as f32) / 1024.0)
            .collect();
        let mut s = ShardState::new(init.iter().map(|&v| v as f32).collect());
        s.adam(&g, &AdamParams::default(), 1);
        assert_eq!(e.master_params(), s.master);
    }

    #[test]
    fn baseline_step_volume_is_three() {
        let (topo, shape, init, task) = tiny();
        let mut e = Engine::new(topo, LinkParams::dgx_like(), ZeroConfig::baseline(), shape, &init).unwrap();
        let out = e.zero3_step(&batches(&task, 0, 4)).unwrap();
        let r = out.record;
        assert_eq!((r.fwd_vol, r.bwd_ag_vol, r.rs_vol), (1.0, 1.0, 1.0));
        assert!(out.temporally_consistent);
    }

    #[test]
    fn schedule_counts_from_step_zero() {
        let c = ZeroConfig {
            qgz_fraction: 0.5,
            ..ZeroConfig::zeropp()
        };
        assert!(c.qgz_active(0, Some(10)));
        assert!(c.qgz_active(4, Some(10)));
        assert!(!c.qgz_active(5, Some(10)));
        assert!(c.qgz_active(99, None));
        assert!(!ZeroConfig::baseline().qgz_active(0, None));
    }

    #[test]
    fn invalid_configs() {
        let topo = ClusterTopology::new(2, 4).unwrap();
        let bad_frac = ZeroConfig {
            qgz_fraction: 1.5,
            ..ZeroConfig::zeropp()
        };
        assert!(bad_frac.validate(&topo).is_err());
        let bad_group = ZeroConfig {
            secondary_group: Some(3),
            ..ZeroConfig::zeropp()
        };
        assert!(bad_group.validate(&topo).is_err());
    }

    #[test]
    fn padding_is_zero_and_stays_zero() {
        let (topo, shape, init, task) = tiny();
        let mut e = Engine::new(
            topo,
            LinkParams::dgx_like(),
            ZeroConfig::zeropp(),
            shape.clone(),
            &init,
        )
        .unwrap();
        assert_eq!(e.partition().len() % (4 * 512), 0);
        for s in 0..3 {
            e.zeropp_step(&batches(&task, s, 4)).unwrap();
        }
        let all: Vec<f32> = e.shards().iter().flat_map(|s| s.master.clone()).collect();
        assert!(all[shape.param_count()..].iter().all(|&v| v == 0.0));
    }
}
