//! Lockstep execution substrate.
//!
//! Ranks run bulk-synchronous phases: every rank computes on what it received
//! in the previous phase and emits messages, then one [`ExchangePlan`] carries
//! all of them at once. Inboxes are ordered by source rank, which pins every
//! floating-point reduction order downstream.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::topology::{
    ByteCount, ClusterTopology, CollectiveTrace, PhaseRecord, Rank, TrafficLedger, TransferEvent,
};

pub type Tag = u32;

/// Anything that can be put on a simulated link.
pub trait WireSize {
    fn wire_bytes(&self) -> ByteCount;
}

/// All transfers of one phase, keyed by `(src, dst, tag)`.
#[derive(Debug)]
pub struct ExchangePlan<M> {
    entries: BTreeMap<(Rank, Rank, Tag), M>,
}

impl<M> Default for ExchangePlan<M> {
    fn default() -> Self {
        ExchangePlan {
            entries: BTreeMap::new(),
        }
    }
}

impl<M> ExchangePlan<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, src: Rank, dst: Rank, tag: Tag, msg: M) -> Result<()> {
        if self.entries.contains_key(&(src, dst, tag)) {
            return Err(Error::Plan(format!(
                "duplicate transfer {src} -> {dst} with tag {tag}"
            )));
        }
        self.entries.insert((src, dst, tag), msg);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery<M> {
    pub src: Rank,
    pub tag: Tag,
    pub msg: M,
}

#[derive(Debug)]
pub struct PhaseOutcome<M> {
    /// Indexed by destination rank, each sorted by `(src, tag)`.
    pub inboxes: Vec<Vec<Delivery<M>>>,
    pub record: PhaseRecord,
    pub events: Vec<TransferEvent>,
}

/// Delivers every entry of `plan` and charges the ledger under `label`.
pub fn run_phase<M: WireSize>(
    plan: ExchangePlan<M>,
    topo: &ClusterTopology,
    ledger: &mut TrafficLedger,
    label: &str,
    phase: usize,
) -> Result<PhaseOutcome<M>> {
    for &(src, dst, _) in plan.entries.keys() {
        topo.classify_link(src, dst)?;
    }
    let world = topo.world();
    let mut inboxes: Vec<Vec<Delivery<M>>> = (0..world).map(|_| Vec::new()).collect();
    let mut sends = Vec::with_capacity(plan.len());
    let mut events = Vec::with_capacity(plan.len());
    for ((src, dst, tag), msg) in plan.entries {
        let class = topo.classify_link(src, dst)?;
        let bytes = if src == dst {
            0
        } else {
            let b = msg.wire_bytes();
            ledger.record(label, src, dst, b)?;
            sends.push((src, class, b.total()));
            b.total()
        };
        events.push(TransferEvent {
            phase,
            src,
            dst,
            bytes,
            class,
        });
        inboxes[dst].push(Delivery { src, tag, msg });
    }
    Ok(PhaseOutcome {
        inboxes,
        record: PhaseRecord::from_sends(world, &sends),
        events,
    })
}

pub struct Outgoing<M> {
    pub dst: Rank,
    pub tag: Tag,
    pub msg: M,
}

impl<M> Outgoing<M> {
    pub fn new(dst: Rank, msg: M) -> Self {
        Outgoing { dst, tag: 0, msg }
    }
}

/// A per-rank program with a fixed number of exchange phases.
///
/// Phase `k` runs `step(k, ..)` on every rank with the messages delivered in
/// phase `k - 1` (nothing for `k = 0`); after the last phase `finish` consumes
/// the final deliveries.
pub trait RankProgram: Sync {
    type State: Send;
    type Msg: WireSize + Send;

    fn phase_count(&self, rank: Rank) -> usize;

    fn step(
        &self,
        phase: usize,
        rank: Rank,
        state: &mut Self::State,
        inbox: Vec<Delivery<Self::Msg>>,
    ) -> Result<Vec<Outgoing<Self::Msg>>>;

    fn finish(&self, rank: Rank, state: &mut Self::State, inbox: Vec<Delivery<Self::Msg>>) -> Result<()>;

    /// Elements this program quantized or dequantized on `rank`.
    fn codec_elements(&self, _rank: Rank, _state: &Self::State) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    /// Round-robin over ranks on the calling thread.
    #[default]
    Sequential,
    /// Ranks of a phase run on the rayon pool.
    Parallel,
}

/// Simulated cluster: topology, the traffic ledger and execution options.
#[derive(Debug, Clone)]
pub struct SimNet {
    topo: ClusterTopology,
    ledger: TrafficLedger,
    pub scheduler: Scheduler,
    /// Keep per-transfer events in traces.
    pub record_events: bool,
    /// Elements at global index `>= logical_len` are counted as padding.
    pub logical_len: Option<usize>,
}

impl SimNet {
    pub fn new(topo: ClusterTopology) -> Self {
        SimNet {
            topo,
            ledger: TrafficLedger::new(topo),
            scheduler: Scheduler::Sequential,
            record_events: false,
            logical_len: None,
        }
    }

    pub fn with_scheduler(mut self, scheduler: Scheduler) -> Self {
        self.scheduler = scheduler;
        self
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.topo
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut TrafficLedger {
        &mut self.ledger
    }

    /// Returns the ledger accumulated so far and starts a fresh one.
    pub fn take_ledger(&mut self) -> TrafficLedger {
        std::mem::replace(&mut self.ledger, TrafficLedger::new(self.topo))
    }

    /// Number of real (unpadded) elements in the global range `[start, start + len)`.
    pub fn real_elements(&self, start: usize, len: usize) -> usize {
        match self.logical_len {
            None => len,
            Some(l) => l.saturating_sub(start).min(len),
        }
    }

    /// Runs `program` to completion over `states` (one per rank).
    pub fn run_collective<P: RankProgram>(
        &mut self,
        label: &str,
        program: &P,
        states: &mut [P::State],
        stages: usize,
    ) -> Result<CollectiveTrace> {
        let world = self.topo.world();
        ensure!(
            states.len() == world,
            Validation,
            "{} rank states for a world of {world}",
            states.len()
        );
        let phases = program.phase_count(0);
        for r in 1..world {
            let n = program.phase_count(r);
            ensure!(
                n == phases,
                Protocol,
                "rank {r} runs {n} phases but rank 0 runs {phases}"
            );
        }
        let mut trace = CollectiveTrace {
            label: label.to_string(),
            stages,
            ..Default::default()
        };
        let mut inboxes: Vec<Vec<Delivery<P::Msg>>> = (0..world).map(|_| Vec::new()).collect();
        for phase in 0..phases {
            let taken = std::mem::take(&mut inboxes);
            let outs: Vec<Result<Vec<Outgoing<P::Msg>>>> = match self.scheduler {
                Scheduler::Sequential => states
                    .iter_mut()
                    .zip(taken)
                    .enumerate()
                    .map(|(r, (s, inbox))| program.step(phase, r, s, inbox))
                    .collect(),
                Scheduler::Parallel => states
                    .par_iter_mut()
                    .zip(taken.into_par_iter())
                    .enumerate()
                    .map(|(r, (s, inbox))| program.step(phase, r, s, inbox))
                    .collect(),
            };
            let mut plan = ExchangePlan::new();
            for (src, out) in outs.into_iter().enumerate() {
                for o in out? {
                    plan.send(src, o.dst, o.tag, o.msg)?;
                }
            }
            let outcome = run_phase(plan, &self.topo, &mut self.ledger, label, phase)?;
            trace.phases.push(outcome.record);
            if self.record_events {
                trace.events.extend(outcome.events);
            }
            inboxes = outcome.inboxes;
        }
        let done: Vec<Result<()>> = match self.scheduler {
            Scheduler::Sequential => states
                .iter_mut()
                .zip(inboxes)
                .enumerate()
                .map(|(r, (s, inbox))| program.finish(r, s, inbox))
                .collect(),
            Scheduler::Parallel => states
                .par_iter_mut()
                .zip(inboxes.into_par_iter())
                .enumerate()
                .map(|(r, (s, inbox))| program.finish(r, s, inbox))
                .collect(),
        };
        done.into_iter().collect::<Result<()>>()?;
        trace.codec_elements = states
            .iter()
            .enumerate()
            .map(|(r, s)| program.codec_elements(r, s))
            .max()
            .unwrap_or(0);
        Ok(trace)
    }
}
