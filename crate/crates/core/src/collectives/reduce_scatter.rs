use super::{common_len, Codec, CollectiveOutput, Packet, Part};
use crate::error::{ensure, Result};
use crate::quantizer::{FlatTensor, QuantConfig, WireWidth};
use crate::simnet::{Delivery, Outgoing, RankProgram, SimNet};
use crate::topology::Rank;

/// Ring reduce-scatter. In phase `k` rank `r` forwards the partial sum of
/// chunk `(r - k - 1) mod P` to `r + 1`, so chunk `c` finishes on rank `c`.
///
/// With [`Codec::Passthrough`] partial sums are carried in `f64`. With a
/// quantized codec every hop dequantizes, adds its own chunk in `f32` and
/// requantizes, which is `P - 1` sequential quantize passes.
struct RingReduceScatter {
    world: usize,
    chunk: usize,
    codec: Codec,
    wire: WireWidth,
    real: Vec<usize>,
}

struct RsState {
    input: Vec<f32>,
    out: Vec<f32>,
    depth: u32,
    codec_elements: u64,
}

impl RingReduceScatter {
    fn own_chunk<'a>(&self, st: &'a RsState, c: usize) -> &'a [f32] {
        &st.input[c * self.chunk..(c + 1) * self.chunk]
    }

    /// Incoming partial sum plus this rank's contribution to chunk `c`.
    fn combine(&self, st: &mut RsState, c: usize, incoming: Option<Packet>) -> Result<(Part, u32)> {
        let real = self.real[c];
        let own = self.own_chunk(st, c);
        match (self.codec, incoming) {
            (_, None) => {
                let part = self.codec.encode(own, real, self.wire)?;
                let q = u32::from(self.codec.is_quantized());
                st.codec_elements += q as u64 * self.chunk as u64;
                Ok((part, q))
            }
            (Codec::Passthrough, Some(p)) => {
                let mut acc = vec![0.0f64; self.chunk];
                p.part.accumulate(&mut acc)?;
                acc.iter_mut().zip(own).for_each(|(a, &x)| *a += x as f64);
                Ok((self.codec.encode_wide(acc, real, self.wire)?, p.depth))
            }
            (Codec::Quantized(_), Some(p)) => {
                let mut acc = p.part.decode_f32()?;
                acc.iter_mut().zip(own).for_each(|(a, &x)| *a += x);
                st.codec_elements += 2 * self.chunk as u64;
                Ok((self.codec.encode(&acc, real, self.wire)?, p.depth + 1))
            }
        }
    }
}

impl RankProgram for RingReduceScatter {
    type State = RsState;
    type Msg = Packet;

    fn phase_count(&self, _rank: Rank) -> usize {
        self.world - 1
    }

    fn step(
        &self,
        phase: usize,
        rank: Rank,
        st: &mut RsState,
        inbox: Vec<Delivery<Packet>>,
    ) -> Result<Vec<Outgoing<Packet>>> {
        let p = self.world;
        let c = (rank + 2 * p - phase - 1) % p;
        let incoming = inbox.into_iter().next().map(|d| d.msg);
        let (part, depth) = self.combine(st, c, incoming)?;
        Ok(vec![Outgoing::new((rank + 1) % p, Packet { part, depth })])
    }

    fn finish(&self, rank: Rank, st: &mut RsState, inbox: Vec<Delivery<Packet>>) -> Result<()> {
        let own = self.own_chunk(st, rank).to_vec();
        match inbox.into_iter().next() {
            None => {
                st.out = own;
                st.depth = 0;
            }
            Some(d) => {
                st.depth = d.msg.depth;
                st.out = match self.codec {
                    Codec::Passthrough => {
                        let mut acc = vec![0.0f64; self.chunk];
                        d.msg.part.accumulate(&mut acc)?;
                        acc.iter()
                            .zip(&own)
                            .map(|(a, &x)| (a + x as f64) as f32)
                            .collect()
                    }
                    Codec::Quantized(_) => {
                        st.codec_elements += self.chunk as u64;
                        let mut acc = d.msg.part.decode_f32()?;
                        acc.iter_mut().zip(&own).for_each(|(a, &x)| *a += x);
                        acc
                    }
                };
            }
        }
        Ok(())
    }

    fn codec_elements(&self, _rank: Rank, st: &RsState) -> u64 {
        st.codec_elements
    }
}

fn run_ring(net: &mut SimNet, label: &str, inputs: &[FlatTensor], codec: Codec) -> Result<CollectiveOutput> {
    let world = net.topology().world();
    ensure!(
        inputs.len() == world,
        Validation,
        "reduce-scatter: {} inputs for a world of {world}",
        inputs.len()
    );
    let (len, wire) = common_len(inputs, "reduce-scatter")?;
    ensure!(
        len % world == 0,
        Validation,
        "reduce-scatter: length {len} is not divisible by world {world}"
    );
    let chunk = len / world;
    let program = RingReduceScatter {
        world,
        chunk,
        codec,
        wire,
        real: (0..world).map(|c| net.real_elements(c * chunk, chunk)).collect(),
    };
    let mut states: Vec<RsState> = inputs
        .iter()
        .map(|t| RsState {
            input: t.values().to_vec(),
            out: Vec::new(),
            depth: 0,
            codec_elements: 0,
        })
        .collect();
    net.ledger_mut().set_participants(label, world);
    let trace = net.run_collective(label, &program, &mut states, 1)?;
    let quantize_passes = states.iter().map(|s| s.depth).max().unwrap_or(0);
    let outputs = states
        .into_iter()
        .map(|s| FlatTensor::new(s.out, wire))
        .collect::<Result<Vec<_>>>()?;
    Ok(CollectiveOutput {
        outputs,
        trace,
        quantize_passes,
        scale_probe: None,
    })
}

/// Full-precision ring reduce-scatter: rank `r` ends with the sum over ranks
/// of chunk `r`.
pub fn reduce_scatter_ring(net: &mut SimNet, label: &str, inputs: &[FlatTensor]) -> Result<CollectiveOutput> {
    run_ring(net, label, inputs, Codec::Passthrough)
}

/// Ring reduce-scatter that requantizes at every hop.
pub fn reduce_scatter_ring_naive_quant(
    net: &mut SimNet,
    label: &str,
    inputs: &[FlatTensor],
    cfg: &QuantConfig,
) -> Result<CollectiveOutput> {
    cfg.validate()?;
    run_ring(net, label, inputs, Codec::Quantized(*cfg))
}
