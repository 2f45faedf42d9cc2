//! All-to-all based quantized reduce-scatter, in one hop and in the
//! hierarchical two-hop form with slice reordering and pipeline stages.
//!
//! The padded gradient of length `n` is viewed as `S * T` slices of
//! `L = n / (S * T)` elements, `T = X * Y`. Slice `(s, p)` is stage `s` of
//! partition `p` and covers `[p*S*L + s*L, p*S*L + (s+1)*L)`, so rank `p`
//! ends up with the contiguous range `[p*S*L, (p+1)*S*L)`, the same shard a
//! ring reduce-scatter would leave there.

use std::sync::Arc;

use super::{common_len, lcm, reorder_mapping, Body, Codec, CollectiveOutput, Part, ScaleProbe};
use crate::error::{ensure, Result};
use crate::quantizer::{self, FlatTensor, QuantizedTensor, WireWidth};
use crate::simnet::{Delivery, Outgoing, RankProgram, SimNet, WireSize};
use crate::topology::{ByteCount, Rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QgzOptions {
    /// Codec of the inter-node hop (and of the whole exchange when `intra_codec` is unset).
    pub codec: Codec,
    /// Codec of the intra-node hop; defaults to `codec`.
    pub intra_codec: Option<Codec>,
    /// Pipeline stages `S`.
    pub stages: usize,
    /// Apply the slice reordering; disabling it reproduces gradient misplacement.
    pub reorder: bool,
}

impl QgzOptions {
    pub fn new(codec: Codec) -> Self {
        QgzOptions {
            codec,
            intra_codec: None,
            stages: 1,
            reorder: true,
        }
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn intra(&self) -> Codec {
        self.intra_codec.unwrap_or(self.codec)
    }

    /// Element count the padded input must be a multiple of on `world` ranks.
    pub fn granularity(&self, world: usize) -> usize {
        self.stages * world * lcm(self.intra().alignment(), self.codec.alignment())
    }
}

/// A set of slices travelling together, plus the largest first-hop scale per
/// element of each slice (empty on the first hop).
#[derive(Debug, Clone)]
struct Bundle {
    parts: Vec<Part>,
    intra_max: Vec<Arc<[f32]>>,
    depth: u32,
}

impl WireSize for Bundle {
    fn wire_bytes(&self) -> ByteCount {
        let mut b = ByteCount::default();
        for p in &self.parts {
            b += p.bytes();
        }
        b
    }
}

struct QgzState {
    input: Vec<f32>,
    out: Vec<f32>,
    probe: Vec<ScaleProbe>,
    depth: u32,
    codec_elements: u64,
}

impl QgzState {
    fn new(input: &FlatTensor, out_len: usize) -> Self {
        QgzState {
            input: input.values().to_vec(),
            out: vec![0.0; out_len],
            probe: vec![ScaleProbe::default(); out_len],
            depth: 0,
            codec_elements: 0,
        }
    }
}

struct TwoHop {
    gpus_per_node: usize,
    nodes: usize,
    stages: usize,
    slice: usize,
    intra: Codec,
    inter: Codec,
    wire: WireWidth,
    /// `order[j]` is the partition whose slice sits at position `j` of a stage block.
    order: Vec<usize>,
    /// Real element count of slice `(s, p)` at index `s * T + p`.
    real: Vec<usize>,
}

impl TwoHop {
    fn blocks(&self) -> usize {
        self.gpus_per_node * self.nodes
    }

    fn slice_start(&self, stage: usize, partition: usize) -> usize {
        partition * self.stages * self.slice + stage * self.slice
    }

    fn send_intra(&self, stage: usize, rank: Rank, st: &mut QgzState) -> Result<Vec<Outgoing<Bundle>>> {
        let (x, y) = (self.gpus_per_node, self.nodes);
        let node = rank / x;
        let depth = u32::from(self.intra.is_quantized());
        let mut out = Vec::with_capacity(x);
        for c in 0..x {
            let mut parts = Vec::with_capacity(y);
            for i in 0..y {
                let p = self.order[c * y + i];
                let start = self.slice_start(stage, p);
                let vals = &st.input[start..start + self.slice];
                parts.push(
                    self.intra
                        .encode(vals, self.real[stage * self.blocks() + p], self.wire)?,
                );
            }
            out.push(Outgoing::new(
                node * x + c,
                Bundle {
                    parts,
                    intra_max: Vec::new(),
                    depth,
                },
            ));
        }
        if self.intra.is_quantized() {
            st.codec_elements += (self.blocks() * self.slice) as u64;
        }
        Ok(out)
    }

    /// Reduces the `X` intra-node contributions to each of the `Y` slices and
    /// sends slice `i` to the same local rank on node `i`.
    fn reduce_intra(
        &self,
        rank: Rank,
        st: &mut QgzState,
        inbox: Vec<Delivery<Bundle>>,
    ) -> Result<Vec<Outgoing<Bundle>>> {
        let (x, y) = (self.gpus_per_node, self.nodes);
        ensure!(
            inbox.len() == x,
            Protocol,
            "rank {rank} got {} intra-node bundles, expected {x}",
            inbox.len()
        );
        let depth =
            inbox.iter().map(|d| d.msg.depth).max().unwrap_or(0) + u32::from(self.inter.is_quantized());
        let mut out = Vec::with_capacity(y);
        for i in 0..y {
            let inputs: Vec<&Part> = inbox.iter().map(|d| &d.msg.parts[i]).collect();
            let intra_max: Arc<[f32]> = (0..self.slice)
                .map(|e| inputs.iter().map(|p| p.scale_of(e)).fold(0.0f32, f32::max))
                .collect();
            let reduced = reduce_parts(&inputs, self.inter, self.wire)?;
            out.push(Outgoing::new(
                i * x + rank % x,
                Bundle {
                    parts: vec![reduced],
                    intra_max: vec![intra_max],
                    depth,
                },
            ));
        }
        if self.intra.is_quantized() {
            st.codec_elements += (x * y * self.slice) as u64;
        }
        if self.inter.is_quantized() {
            st.codec_elements += (y * self.slice) as u64;
        }
        Ok(out)
    }

    fn absorb_inter(
        &self,
        stage: usize,
        rank: Rank,
        st: &mut QgzState,
        inbox: Vec<Delivery<Bundle>>,
    ) -> Result<()> {
        ensure!(
            inbox.len() == self.nodes,
            Protocol,
            "rank {rank} got {} inter-node bundles, expected {}",
            inbox.len(),
            self.nodes
        );
        let mut acc = vec![0.0f64; self.slice];
        let base = stage * self.slice;
        for d in &inbox {
            let part = &d.msg.parts[0];
            part.accumulate(&mut acc)?;
            st.depth = st.depth.max(d.msg.depth);
            for e in 0..self.slice {
                let pr = &mut st.probe[base + e];
                pr.intra = pr.intra.max(d.msg.intra_max[0][e]);
                pr.inter = pr.inter.max(part.scale_of(e));
            }
        }
        for (o, a) in st.out[base..base + self.slice].iter_mut().zip(acc) {
            *o = a as f32;
        }
        if self.inter.is_quantized() {
            st.codec_elements += (self.nodes * self.slice) as u64;
        }
        Ok(())
    }
}

/// Sums the parts in order and re-encodes with `codec`. All-quantized inputs
/// with a quantized output take the fused dequantize-reduce-quantize path.
fn reduce_parts(inputs: &[&Part], codec: Codec, wire: WireWidth) -> Result<Part> {
    let real = inputs[0].real;
    if let Codec::Quantized(cfg) = codec {
        let qs: Option<Vec<QuantizedTensor>> = inputs.iter().map(|p| p.quantized().cloned()).collect();
        if let Some(qs) = qs {
            let fused = quantizer::fused_dequant_reduce_quant(&qs, &cfg)?;
            return Ok(Part {
                body: Body::Quant(Arc::new(fused)),
                real,
                wire,
            });
        }
    }
    let mut acc = vec![0.0f64; inputs[0].len()];
    for p in inputs {
        p.accumulate(&mut acc)?;
    }
    codec.encode_wide(acc, real, wire)
}

impl RankProgram for TwoHop {
    type State = QgzState;
    type Msg = Bundle;

    fn phase_count(&self, _rank: Rank) -> usize {
        2 * self.stages
    }

    fn step(
        &self,
        phase: usize,
        rank: Rank,
        st: &mut QgzState,
        inbox: Vec<Delivery<Bundle>>,
    ) -> Result<Vec<Outgoing<Bundle>>> {
        if phase.is_multiple_of(2) {
            let stage = phase / 2;
            if stage > 0 {
                self.absorb_inter(stage - 1, rank, st, inbox)?;
            }
            self.send_intra(stage, rank, st)
        } else {
            self.reduce_intra(rank, st, inbox)
        }
    }

    fn finish(&self, rank: Rank, st: &mut QgzState, inbox: Vec<Delivery<Bundle>>) -> Result<()> {
        self.absorb_inter(self.stages - 1, rank, st, inbox)
    }

    fn codec_elements(&self, _rank: Rank, st: &QgzState) -> u64 {
        st.codec_elements
    }
}

/// Hierarchical quantized reduce-scatter: per pipeline stage, reorder slices,
/// quantize, intra-node all-to-all, fused dequantize-reduce-quantize,
/// inter-node all-to-all, dequantize and reduce in full precision.
pub fn qgz_2hop(
    net: &mut SimNet,
    label: &str,
    inputs: &[FlatTensor],
    opts: &QgzOptions,
) -> Result<CollectiveOutput> {
    let topo = *net.topology();
    let world = topo.world();
    ensure!(
        opts.stages >= 1,
        Validation,
        "qgZ needs at least one pipeline stage"
    );
    ensure!(
        inputs.len() == world,
        Validation,
        "qgZ: {} inputs for a world of {world}",
        inputs.len()
    );
    let (len, wire) = common_len(inputs, "qgZ")?;
    let gran = opts.granularity(world);
    ensure!(
        len % gran == 0,
        Validation,
        "qgZ: length {len} is not a multiple of stages * world * block alignment = {gran}"
    );
    let (x, y) = (topo.gpus_per_node(), topo.nodes());
    let slice = len / (opts.stages * world);
    let perm = reorder_mapping(x, y, 1)?;
    let order: Vec<usize> = if opts.reorder {
        perm.new_position_order().to_vec()
    } else {
        (0..world).collect()
    };
    let mut program = TwoHop {
        gpus_per_node: x,
        nodes: y,
        stages: opts.stages,
        slice,
        intra: opts.intra(),
        inter: opts.codec,
        wire,
        order,
        real: Vec::new(),
    };
    program.real = (0..opts.stages)
        .flat_map(|s| (0..world).map(move |p| (s, p)))
        .map(|(s, p)| net.real_elements(program.slice_start(s, p), slice))
        .collect();
    let out_len = len / world;
    let mut states: Vec<QgzState> = inputs.iter().map(|t| QgzState::new(t, out_len)).collect();
    net.ledger_mut().set_participants(label, y);
    let trace = net.run_collective(label, &program, &mut states, opts.stages)?;
    finish_output(states, trace, wire, true)
}

fn finish_output(
    states: Vec<QgzState>,
    trace: crate::topology::CollectiveTrace,
    wire: WireWidth,
    with_probe: bool,
) -> Result<CollectiveOutput> {
    let quantize_passes = states.iter().map(|s| s.depth).max().unwrap_or(0);
    let mut outputs = Vec::with_capacity(states.len());
    let mut probes = Vec::with_capacity(states.len());
    for s in states {
        outputs.push(FlatTensor::new(s.out, wire)?);
        probes.push(s.probe);
    }
    Ok(CollectiveOutput {
        outputs,
        trace,
        quantize_passes,
        scale_probe: with_probe.then_some(probes),
    })
}

struct OneHop {
    world: usize,
    slice: usize,
    codec: Codec,
    wire: WireWidth,
    real: Vec<usize>,
}

impl RankProgram for OneHop {
    type State = QgzState;
    type Msg = Bundle;

    fn phase_count(&self, _rank: Rank) -> usize {
        1
    }

    fn step(
        &self,
        _phase: usize,
        _rank: Rank,
        st: &mut QgzState,
        _inbox: Vec<Delivery<Bundle>>,
    ) -> Result<Vec<Outgoing<Bundle>>> {
        let depth = u32::from(self.codec.is_quantized());
        if self.codec.is_quantized() {
            st.codec_elements += (self.world * self.slice) as u64;
        }
        (0..self.world)
            .map(|d| {
                let vals = &st.input[d * self.slice..(d + 1) * self.slice];
                let part = self.codec.encode(vals, self.real[d], self.wire)?;
                Ok(Outgoing::new(
                    d,
                    Bundle {
                        parts: vec![part],
                        intra_max: Vec::new(),
                        depth,
                    },
                ))
            })
            .collect()
    }

    fn finish(&self, _rank: Rank, st: &mut QgzState, inbox: Vec<Delivery<Bundle>>) -> Result<()> {
        let mut acc = vec![0.0f64; self.slice];
        for d in &inbox {
            let part = &d.msg.parts[0];
            part.accumulate(&mut acc)?;
            st.depth = st.depth.max(d.msg.depth);
            for (e, pr) in st.probe.iter_mut().enumerate() {
                pr.inter = pr.inter.max(part.scale_of(e));
            }
        }
        st.out = acc.into_iter().map(|a| a as f32).collect();
        if self.codec.is_quantized() {
            st.codec_elements += (self.world * self.slice) as u64;
        }
        Ok(())
    }

    fn codec_elements(&self, _rank: Rank, st: &QgzState) -> u64 {
        st.codec_elements
    }
}

/// Quantize once, one world-wide all-to-all, dequantize and reduce.
pub fn qgz_1hop(
    net: &mut SimNet,
    label: &str,
    inputs: &[FlatTensor],
    codec: Codec,
) -> Result<CollectiveOutput> {
    let topo = *net.topology();
    let world = topo.world();
    ensure!(
        inputs.len() == world,
        Validation,
        "qgZ 1-hop: {} inputs for a world of {world}",
        inputs.len()
    );
    let (len, wire) = common_len(inputs, "qgZ 1-hop")?;
    let gran = world * codec.alignment();
    ensure!(
        len % gran == 0,
        Validation,
        "qgZ 1-hop: length {len} is not a multiple of {gran}"
    );
    let slice = len / world;
    let program = OneHop {
        world,
        slice,
        codec,
        wire,
        real: (0..world).map(|d| net.real_elements(d * slice, slice)).collect(),
    };
    let mut states: Vec<QgzState> = inputs.iter().map(|t| QgzState::new(t, slice)).collect();
    net.ledger_mut().set_participants(label, topo.nodes());
    let trace = net.run_collective(label, &program, &mut states, 1)?;
    finish_output(states, trace, wire, false)
}
