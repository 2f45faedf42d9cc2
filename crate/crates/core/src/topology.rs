//! Cluster shape, link classification, byte accounting and the alpha-beta
//! latency model.
//!
//! Normalized volumes follow the bus-bandwidth convention: the cross-node
//! payload moved per machine is divided by `2 * M * (n - 1) / n`, where `n`
//! is the number of participants whose data has to cross (ranks in a ring,
//! nodes in an all-to-all). A full-precision ring all-gather of `M` FP16
//! values therefore reads exactly `1.0` on any cluster with more than one node.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::ops::AddAssign;

use serde::Serialize;

use crate::error::{ensure, Result};

pub type Rank = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClusterTopology {
    nodes: usize,
    gpus_per_node: usize,
}

impl ClusterTopology {
    pub fn new(nodes: usize, gpus_per_node: usize) -> Result<Self> {
        ensure!(nodes >= 1, Config, "cluster needs at least one node");
        ensure!(gpus_per_node >= 1, Config, "nodes need at least one GPU");
        Ok(ClusterTopology { nodes, gpus_per_node })
    }

    /// Y in the hierarchical collectives.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// X in the hierarchical collectives.
    pub fn gpus_per_node(&self) -> usize {
        self.gpus_per_node
    }

    pub fn world(&self) -> usize {
        self.nodes * self.gpus_per_node
    }

    pub fn node_of(&self, rank: Rank) -> usize {
        rank / self.gpus_per_node
    }

    pub fn local_of(&self, rank: Rank) -> usize {
        rank % self.gpus_per_node
    }

    pub fn rank_at(&self, node: usize, local: usize) -> Rank {
        node * self.gpus_per_node + local
    }

    pub fn check_rank(&self, rank: Rank) -> Result<()> {
        ensure!(
            rank < self.world(),
            Validation,
            "rank {rank} out of range for world {}",
            self.world()
        );
        Ok(())
    }

    pub fn classify_link(&self, src: Rank, dst: Rank) -> Result<LinkClass> {
        self.check_rank(src)?;
        self.check_rank(dst)?;
        Ok(if self.node_of(src) == self.node_of(dst) {
            LinkClass::Intra
        } else {
            LinkClass::Inter
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkClass {
    Intra,
    Inter,
}

impl LinkClass {
    pub const ALL: [LinkClass; 2] = [LinkClass::Intra, LinkClass::Inter];

    pub fn as_str(self) -> &'static str {
        match self {
            LinkClass::Intra => "intra",
            LinkClass::Inter => "inter",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cost of one link class: `alpha` seconds per message plus `bytes / beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkCost {
    pub alpha: f64,
    pub beta: f64,
}

impl LinkCost {
    pub fn time(&self, messages: f64, bytes: f64) -> f64 {
        self.alpha * messages + bytes / self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub intra: LinkCost,
    pub inter: LinkCost,
    /// Elements per second for quantize/dequantize work; `None` treats codecs as free.
    pub codec_rate: Option<f64>,
}

impl LinkParams {
    pub fn new(intra: LinkCost, inter: LinkCost) -> Result<Self> {
        let p = LinkParams {
            intra,
            inter,
            codec_rate: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("intra", self.intra), ("inter", self.inter)] {
            ensure!(c.alpha >= 0.0, Config, "{name} alpha must be >= 0");
            ensure!(c.beta > 0.0, Config, "{name} beta must be > 0");
        }
        if let Some(r) = self.codec_rate {
            ensure!(r > 0.0, Config, "codec rate must be > 0");
        }
        Ok(())
    }

    /// NVSwitch-class intra-node and 100 Gb/s InfiniBand inter-node links.
    pub fn dgx_like() -> Self {
        LinkParams {
            intra: LinkCost {
                alpha: 5e-6,
                beta: 150e9,
            },
            inter: LinkCost {
                alpha: 10e-6,
                beta: 12.5e9,
            },
            codec_rate: None,
        }
    }

    pub fn cost(&self, class: LinkClass) -> LinkCost {
        match class {
            LinkClass::Intra => self.intra,
            LinkClass::Inter => self.inter,
        }
    }
}

/// Bytes of one transfer split by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ByteCount {
    /// Codes or values of real (unpadded) elements.
    pub payload: u64,
    /// Scales and headers.
    pub metadata: u64,
    /// Codes or values of zero padding.
    pub padding: u64,
}

impl ByteCount {
    pub fn total(&self) -> u64 {
        self.payload + self.metadata + self.padding
    }
}

impl AddAssign for ByteCount {
    fn add_assign(&mut self, rhs: Self) {
        self.payload += rhs.payload;
        self.metadata += rhs.metadata;
        self.padding += rhs.padding;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkCounters {
    pub bytes: ByteCount,
    pub messages: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RankTotals {
    pub sent: u64,
    pub received: u64,
}

/// Per-collective, per-link-class byte counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLedger {
    topo: ClusterTopology,
    links: BTreeMap<(String, LinkClass), LinkCounters>,
    ranks: BTreeMap<String, Vec<RankTotals>>,
    participants: BTreeMap<String, usize>,
}

impl TrafficLedger {
    pub fn new(topo: ClusterTopology) -> Self {
        TrafficLedger {
            topo,
            links: BTreeMap::new(),
            ranks: BTreeMap::new(),
            participants: BTreeMap::new(),
        }
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.topo
    }

    /// Records one transfer. Self-copies never touch a link and are ignored.
    pub fn record(&mut self, label: &str, src: Rank, dst: Rank, bytes: ByteCount) -> Result<()> {
        let class = self.topo.classify_link(src, dst)?;
        if src == dst {
            return Ok(());
        }
        let c = self.links.entry((label.to_string(), class)).or_default();
        c.bytes += bytes;
        c.messages += 1;
        let world = self.topo.world();
        let ranks = self
            .ranks
            .entry(label.to_string())
            .or_insert_with(|| vec![RankTotals::default(); world]);
        ranks[src].sent += bytes.total();
        ranks[dst].received += bytes.total();
        Ok(())
    }

    /// Declares how many participants the bus-bandwidth normalization of
    /// `label` should assume.
    pub fn set_participants(&mut self, label: &str, n: usize) {
        self.participants.insert(label.to_string(), n);
    }

    pub fn participants(&self, label: &str) -> Option<usize> {
        self.participants.get(label).copied()
    }

    pub fn labels(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .links
            .keys()
            .map(|(l, _)| l.clone())
            .chain(self.participants.keys().cloned())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn counters(&self, label: &str, class: LinkClass) -> LinkCounters {
        self.links
            .get(&(label.to_string(), class))
            .copied()
            .unwrap_or_default()
    }

    pub fn rank_totals(&self, label: &str) -> Vec<RankTotals> {
        self.ranks
            .get(label)
            .cloned()
            .unwrap_or_else(|| vec![RankTotals::default(); self.topo.world()])
    }

    /// Sum of bytes sent equals sum of bytes received for `label`.
    pub fn is_conserved(&self, label: &str) -> bool {
        let t = self.rank_totals(label);
        let sent: u64 = t.iter().map(|r| r.sent).sum();
        let recv: u64 = t.iter().map(|r| r.received).sum();
        let links: u64 = LinkClass::ALL
            .iter()
            .map(|c| self.counters(label, *c).bytes.total())
            .sum();
        sent == recv && sent == links
    }

    fn normalize(&self, label: &str, bytes: u64, m: u64) -> f64 {
        let n = self.participants(label).unwrap_or(self.topo.world()) as u128;
        if bytes == 0 || n <= 1 || m == 0 {
            return 0.0;
        }
        let num = bytes as u128 * n;
        let den = self.topo.nodes() as u128 * 2 * m as u128 * (n - 1);
        num as f64 / den as f64
    }

    /// Payload per machine in FP16-model-equivalents of `m` elements, padding
    /// and metadata excluded.
    pub fn normalized_volume(&self, label: &str, class: LinkClass, m: u64) -> f64 {
        self.normalize(label, self.counters(label, class).bytes.payload, m)
    }

    /// Like [`normalized_volume`](Self::normalized_volume) but counts padding
    /// as payload, against the padded length.
    pub fn normalized_wire_volume(&self, label: &str, class: LinkClass, padded_m: u64) -> f64 {
        let b = self.counters(label, class).bytes;
        self.normalize(label, b.payload + b.padding, padded_m)
    }

    pub fn metadata_ratio(&self, label: &str, class: LinkClass) -> f64 {
        let b = self.counters(label, class).bytes;
        if b.payload == 0 {
            0.0
        } else {
            b.metadata as f64 / b.payload as f64
        }
    }

    /// Adds every counter of `other` into `self`.
    pub fn merge(&mut self, other: &TrafficLedger) {
        for (k, v) in &other.links {
            let c = self.links.entry(k.clone()).or_default();
            c.bytes += v.bytes;
            c.messages += v.messages;
        }
        for (label, totals) in &other.ranks {
            let mine = self
                .ranks
                .entry(label.clone())
                .or_insert_with(|| vec![RankTotals::default(); totals.len()]);
            for (a, b) in mine.iter_mut().zip(totals) {
                a.sent += b.sent;
                a.received += b.received;
            }
        }
        for (k, v) in &other.participants {
            self.participants.insert(k.clone(), *v);
        }
    }

    /// CSV with columns
    /// `collective,link_class,payload_bytes,metadata_bytes,padding_bytes,normalized_volume`.
    pub fn write_csv<W: Write>(&self, mut w: W, m: u64) -> io::Result<()> {
        writeln!(
            w,
            "collective,link_class,payload_bytes,metadata_bytes,padding_bytes,normalized_volume"
        )?;
        for label in self.labels() {
            for class in LinkClass::ALL {
                let b = self.counters(&label, class).bytes;
                writeln!(
                    w,
                    "{label},{class},{},{},{},{}",
                    b.payload,
                    b.metadata,
                    b.padding,
                    self.normalized_volume(&label, class, m)
                )?;
            }
        }
        Ok(())
    }
}

/// Sum over collectives of the normalized inter-node payload for an
/// iteration over `m` parameters.
pub fn normalized_cross_node_volume(ledger: &TrafficLedger, m: u64) -> f64 {
    ledger
        .labels()
        .iter()
        .map(|l| ledger.normalized_volume(l, LinkClass::Inter, m))
        .sum()
}

/// Critical-path load of one link class during one phase: the maxima over
/// sending ranks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseLoad {
    pub bytes: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseRecord {
    pub intra: PhaseLoad,
    pub inter: PhaseLoad,
}

impl PhaseRecord {
    pub fn load(&self, class: LinkClass) -> PhaseLoad {
        match class {
            LinkClass::Intra => self.intra,
            LinkClass::Inter => self.inter,
        }
    }

    pub(crate) fn from_sends(world: usize, sends: &[(Rank, LinkClass, u64)]) -> Self {
        let mut per = vec![[PhaseLoad::default(); 2]; world];
        for &(src, class, bytes) in sends {
            let l = &mut per[src][class.index()];
            l.bytes += bytes;
            l.messages += 1;
        }
        let mut rec = PhaseRecord::default();
        for p in &per {
            for class in LinkClass::ALL {
                let slot = match class {
                    LinkClass::Intra => &mut rec.intra,
                    LinkClass::Inter => &mut rec.inter,
                };
                let l = p[class.index()];
                slot.bytes = slot.bytes.max(l.bytes);
                slot.messages = slot.messages.max(l.messages);
            }
        }
        rec
    }
}

/// One delivered message, as written to the JSON-lines event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferEvent {
    pub phase: usize,
    pub src: Rank,
    pub dst: Rank,
    pub bytes: u64,
    pub class: LinkClass,
}

/// Phase-by-phase record of one collective, consumed by [`estimate_latency`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollectiveTrace {
    pub label: String,
    /// Pipeline stages the collective was executed with.
    pub stages: usize,
    pub phases: Vec<PhaseRecord>,
    pub events: Vec<TransferEvent>,
    /// Largest number of elements any single rank quantized or dequantized.
    pub codec_elements: u64,
}

impl CollectiveTrace {
    pub fn bytes(&self, class: LinkClass) -> u64 {
        self.phases.iter().map(|p| p.load(class).bytes).sum()
    }

    pub fn messages(&self, class: LinkClass) -> u64 {
        self.phases.iter().map(|p| p.load(class).messages).sum()
    }

    pub fn write_event_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyEstimate {
    pub label: String,
    pub total_s: f64,
    pub intra_s: f64,
    pub inter_s: f64,
    pub compute_s: f64,
    pub stages: usize,
}

/// `S`-stage pipeline of two dependent phases:
/// `(a + b) / S + (S - 1) * max(a, b) / S`.
pub fn pipelined_time(intra_s: f64, inter_s: f64, stages: usize) -> f64 {
    let s = stages as f64;
    (intra_s + inter_s) / s + (s - 1.0) * intra_s.max(inter_s) / s
}

/// Estimates the wall time of `trace` re-run with `stages` pipeline stages.
///
/// Each class costs `alpha * messages + bytes / beta` over the whole tensor,
/// where splitting into `S` stages multiplies the message count by `S`. With
/// `overlap` the two classes are pipelined via [`pipelined_time`]; otherwise
/// they run back to back. Codec compute is added serially.
pub fn estimate_latency(
    trace: &CollectiveTrace,
    links: &LinkParams,
    stages: usize,
    overlap: bool,
) -> Result<LatencyEstimate> {
    ensure!(stages >= 1, Validation, "pipeline stages must be >= 1");
    links.validate()?;
    let recorded = trace.stages.max(1) as f64;
    let class_time = |class: LinkClass| {
        let per_stage_msgs = trace.messages(class) as f64 / recorded;
        links
            .cost(class)
            .time(stages as f64 * per_stage_msgs, trace.bytes(class) as f64)
    };
    let intra_s = class_time(LinkClass::Intra);
    let inter_s = class_time(LinkClass::Inter);
    let comm = if overlap {
        pipelined_time(intra_s, inter_s, stages)
    } else {
        intra_s + inter_s
    };
    let compute_s = links
        .codec_rate
        .map(|r| trace.codec_elements as f64 / r)
        .unwrap_or(0.0);
    Ok(LatencyEstimate {
        label: trace.label.clone(),
        total_s: comm + compute_s,
        intra_s,
        inter_s,
        compute_s,
        stages,
    })
}

/// Estimates for `S = 1..=max_stages` plus the stage count with the lowest total
/// (the smallest such `S` on ties).
pub fn latency_sweep(
    trace: &CollectiveTrace,
    links: &LinkParams,
    max_stages: usize,
) -> Result<(Vec<LatencyEstimate>, usize)> {
    ensure!(max_stages >= 1, Validation, "need at least one stage count");
    let rows = (1..=max_stages)
        .map(|s| estimate_latency(trace, links, s, true))
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .min_by(|a, b| a.total_s.total_cmp(&b.total_s))
        .map(|r| r.stages)
        .unwrap_or(1);
    Ok((rows, best))
}
