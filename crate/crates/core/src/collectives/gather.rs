use super::{common_len, Codec, CollectiveOutput, Packet, Part};
use crate::error::{ensure, Result};
use crate::quantizer::{FlatTensor, QuantConfig, WireWidth};
use crate::simnet::{Delivery, Outgoing, RankProgram, SimNet};
use crate::topology::Rank;

/// Ring all-gather run independently inside contiguous groups of `group` ranks.
struct RingGather {
    group: usize,
    shard_len: usize,
    codec: Codec,
    wire: WireWidth,
    /// Real element count per group position.
    real: Vec<usize>,
}

struct GatherState {
    own: Vec<f32>,
    parts: Vec<Option<Part>>,
    out: Vec<f32>,
    depth: u32,
    codec_elements: u64,
}

impl RingGather {
    fn pos(&self, rank: Rank) -> usize {
        rank % self.group
    }

    fn next(&self, rank: Rank) -> Rank {
        rank - self.pos(rank) + (self.pos(rank) + 1) % self.group
    }

    fn store(&self, st: &mut GatherState, pos: usize, p: Packet) {
        st.depth = st.depth.max(p.depth);
        st.parts[pos] = Some(p.part);
    }
}

impl RankProgram for RingGather {
    type State = GatherState;
    type Msg = Packet;

    fn phase_count(&self, _rank: Rank) -> usize {
        self.group - 1
    }

    fn step(
        &self,
        phase: usize,
        rank: Rank,
        st: &mut GatherState,
        inbox: Vec<Delivery<Packet>>,
    ) -> Result<Vec<Outgoing<Packet>>> {
        let g = self.group;
        let me = self.pos(rank);
        let forward = if phase == 0 {
            let part = self.codec.encode(&st.own, self.real[me], self.wire)?;
            if self.codec.is_quantized() {
                st.codec_elements += self.shard_len as u64;
            }
            let depth = u32::from(self.codec.is_quantized());
            st.parts[me] = Some(part.clone());
            st.depth = depth;
            Packet { part, depth }
        } else {
            let d = inbox.into_iter().next().expect("ring step delivers one shard");
            let pos = (me + g - phase) % g;
            let fwd = d.msg.clone();
            self.store(st, pos, d.msg);
            fwd
        };
        Ok(vec![Outgoing::new(self.next(rank), forward)])
    }

    fn finish(&self, rank: Rank, st: &mut GatherState, inbox: Vec<Delivery<Packet>>) -> Result<()> {
        let g = self.group;
        let me = self.pos(rank);
        if g == 1 {
            let part = self.codec.encode(&st.own, self.real[0], self.wire)?;
            st.depth = u32::from(self.codec.is_quantized());
            st.parts[0] = Some(part);
        }
        for d in inbox {
            self.store(st, (me + 1) % g, d.msg);
        }
        let mut out = Vec::with_capacity(g * self.shard_len);
        for part in &st.parts {
            let part = part.as_ref().expect("every shard arrives");
            out.extend(part.decode_f32()?);
        }
        if self.codec.is_quantized() {
            st.codec_elements += out.len() as u64;
        }
        st.out = out;
        Ok(())
    }

    fn codec_elements(&self, _rank: Rank, st: &GatherState) -> u64 {
        st.codec_elements
    }
}

/// Gathers `shards[r]` from every rank of each group of `group` consecutive
/// ranks; every rank ends with its group's shards concatenated in rank order.
pub fn all_gather_grouped(
    net: &mut SimNet,
    label: &str,
    shards: &[FlatTensor],
    group: usize,
    codec: Codec,
) -> Result<CollectiveOutput> {
    let world = net.topology().world();
    ensure!(
        shards.len() == world,
        Validation,
        "all-gather: {} shards for a world of {world}",
        shards.len()
    );
    ensure!(
        group >= 1 && world.is_multiple_of(group),
        Validation,
        "all-gather group size {group} does not divide world {world}"
    );
    let (shard_len, wire) = common_len(shards, "all-gather")?;
    let program = RingGather {
        group,
        shard_len,
        codec,
        wire,
        real: (0..group)
            .map(|p| net.real_elements(p * shard_len, shard_len))
            .collect(),
    };
    let mut states: Vec<GatherState> = shards
        .iter()
        .map(|s| GatherState {
            own: s.values().to_vec(),
            parts: vec![None; group],
            out: Vec::new(),
            depth: 0,
            codec_elements: 0,
        })
        .collect();
    net.ledger_mut().set_participants(label, group);
    let trace = net.run_collective(label, &program, &mut states, 1)?;
    let quantize_passes = states.iter().map(|s| s.depth).max().unwrap_or(0);
    Ok(CollectiveOutput {
        outputs: states
            .into_iter()
            .map(|s| FlatTensor::from_trusted(s.out, wire))
            .collect(),
        trace,
        quantize_passes,
        scale_probe: None,
    })
}

/// World-wide ring all-gather at the shards' wire width.
pub fn all_gather_baseline(net: &mut SimNet, label: &str, shards: &[FlatTensor]) -> Result<CollectiveOutput> {
    let world = net.topology().world();
    all_gather_grouped(net, label, shards, world, Codec::Passthrough)
}

/// World-wide ring all-gather of blockwise-quantized shards. Each rank
/// quantizes its own shard once; receivers dequantize.
pub fn all_gather_qwz(
    net: &mut SimNet,
    label: &str,
    shards: &[FlatTensor],
    cfg: &QuantConfig,
) -> Result<CollectiveOutput> {
    cfg.validate()?;
    let world = net.topology().world();
    all_gather_grouped(net, label, shards, world, Codec::Quantized(*cfg))
}
