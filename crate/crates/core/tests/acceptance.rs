//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use zeropp_core::collectives::{
    qgz_2hop, reduce_scatter_ring, reduce_scatter_ring_naive_quant, reorder_mapping, Codec, QgzOptions,
    BWD_ALLGATHER,
};
use zeropp_core::engine::{simulate_comm_iteration, train_toy, Batch, Engine, SyntheticTask, ToyConfig};
use zeropp_core::partitioner::{memory_per_device, MemoryMode, MemoryModel};
use zeropp_core::quantizer::{dequantize, fused_dequant_reduce_quant, quant_error_stats, quantize};
use zeropp_core::simnet::SimNet;
use zeropp_core::topology::{
    estimate_latency, latency_sweep, CollectiveTrace, LinkCost, LinkParams, PhaseLoad, PhaseRecord,
};
use zeropp_core::{ClusterTopology, FlatTensor, LinkClass, ModelShape, QuantConfig, ZeroConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($arg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)*));
        }
    };
}

const SEED: u64 = 42;

fn half_ints(rng: &mut ChaCha8Rng, len: usize, range: i32) -> FlatTensor {
    FlatTensor::half((0..len).map(|_| rng.gen_range(-range..=range) as f32).collect()).unwrap()
}

fn normal_tensor(rng: &mut ChaCha8Rng, len: usize, sd: f32) -> FlatTensor {
    let d = Normal::new(0.0f32, sd).unwrap();
    FlatTensor::half(
        (0..len)
            .map(|_| half::f16::from_f32(d.sample(rng)).to_f32())
            .collect(),
    )
    .unwrap()
}

fn volume_table() -> Outcome {
    let topo = ClusterTopology::new(4, 8).unwrap();
    let m = 1 << 20;
    let start = Instant::now();
    let base = simulate_comm_iteration(topo, &ZeroConfig::baseline(), m, SEED).map_err(|e| e.to_string())?;
    let zpp = simulate_comm_iteration(topo, &ZeroConfig::zeropp(), m, SEED).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let b = base.volumes;
    let z = zpp.volumes;
    check!((b.fwd, b.bwd, b.rs) == (1.0, 1.0, 1.0), "baseline row {b:?}");
    check!((z.fwd, z.bwd, z.rs) == (0.5, 0.0, 0.25), "ZeRO++ row {z:?}");
    let meta = zpp.max_metadata_ratio();
    check!(meta < 0.02, "metadata ratio {meta}");
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "baseline ({}, {}, {}) total {}, ZeRO++ ({}, {}, {}) total {}, metadata {:.3}% of payload, {:.2?}",
        b.fwd,
        b.bwd,
        b.rs,
        b.total(),
        z.fwd,
        z.bwd,
        z.rs,
        z.total(),
        100.0 * meta,
        elapsed
    ))
}

fn qgz_placement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut cases = 0;
    for x in [2, 4] {
        for y in [2, 3] {
            for s in [1, 2, 4] {
                let topo = ClusterTopology::new(y, x).unwrap();
                let world = topo.world();
                let len = 3 * s * world;
                let inputs: Vec<FlatTensor> = (0..world).map(|_| half_ints(&mut rng, len, 64)).collect();
                let mut net = SimNet::new(topo);
                let ring = reduce_scatter_ring(&mut net, "ring", &inputs).map_err(|e| e.to_string())?;
                let opts = QgzOptions::new(Codec::Passthrough).with_stages(s);
                let qgz = qgz_2hop(&mut net, "qgz", &inputs, &opts).map_err(|e| e.to_string())?;
                for r in 0..world {
                    let a: Vec<u32> = ring.outputs[r].values().iter().map(|v| v.to_bits()).collect();
                    let b: Vec<u32> = qgz.outputs[r].values().iter().map(|v| v.to_bits()).collect();
                    check!(a == b, "X={x} Y={y} S={s}: rank {r} differs from the ring oracle");
                }
                cases += 1;
            }
        }
    }
    // Without reordering, ranks 1 and 2 of a 2x2 cluster swap partitions.
    let topo = ClusterTopology::new(2, 2).unwrap();
    let inputs: Vec<FlatTensor> = (0..4).map(|_| half_ints(&mut rng, 8, 64)).collect();
    let mut net = SimNet::new(topo);
    let ring = reduce_scatter_ring(&mut net, "ring", &inputs).map_err(|e| e.to_string())?;
    let mut opts = QgzOptions::new(Codec::Passthrough);
    opts.reorder = false;
    let bad = qgz_2hop(&mut net, "qgz", &inputs, &opts).map_err(|e| e.to_string())?;
    check!(
        bad.outputs[1] == ring.outputs[2] && bad.outputs[2] == ring.outputs[1],
        "misplacement not reproduced"
    );
    check!(
        bad.outputs[0] == ring.outputs[0] && bad.outputs[3] == ring.outputs[3],
        "unexpected misplacement of ranks 0 and 3"
    );
    Ok(format!(
        "{cases} (X, Y, S) cases bit-exact; unordered 2x2 swaps ranks 1 and 2"
    ))
}

fn reorder_closed_form() -> Outcome {
    let m = reorder_mapping(2, 2, 1).map_err(|e| e.to_string())?;
    check!(
        m.new_position_order() == [0, 2, 1, 3],
        "2x2 order {:?}",
        m.new_position_order()
    );
    let mut cases = 0;
    for x in 1..=4 {
        for y in 1..=3 {
            for s in [1, 2, 4] {
                let m = reorder_mapping(x, y, s).map_err(|e| e.to_string())?;
                let t = x * y;
                let mut seen = vec![false; t * s];
                for p in 0..t * s {
                    let j = m.f(p);
                    check!(j < t * s && !seen[j], "X={x} Y={y} S={s}: not a bijection at {p}");
                    seen[j] = true;
                    check!(
                        j / t == p / t,
                        "X={x} Y={y} S={s}: slice {p} leaves its stage block"
                    );
                    check!(m.g(j) == p, "X={x} Y={y} S={s}: g(f({p})) != {p}");
                    check!(m.f(m.g(p)) == p, "X={x} Y={y} S={s}: f(g({p})) != {p}");
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "[0, 2, 1, 3] for 2x2; bijection, block preservation and inverse over {cases} shapes"
    ))
}

fn quantization_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut totals = Vec::new();
    for bits in [4u8, 8] {
        let (mut elements, mut violations) = (0usize, 0usize);
        for (i, block) in [64usize, 512, 2048, 100_000].iter().cycle().take(16).enumerate() {
            let scale = 10f32.powi(i as i32 % 7 - 3);
            let t = normal_tensor(&mut rng, 62_500, scale);
            let cfg = if *block == 100_000 {
                QuantConfig::full_tensor(bits)
            } else {
                QuantConfig::blocked(bits, *block)
            }
            .unwrap();
            let stats = quant_error_stats(&t, &cfg).map_err(|e| e.to_string())?;
            elements += t.len();
            violations += stats.per_block_bound_violations;
        }
        check!(elements >= 1_000_000, "only {elements} elements");
        check!(violations == 0, "INT{bits}: {violations} bound violations");
        totals.push(elements);
    }
    let mut fused_cases = 0;
    for _ in 0..1000 {
        let bits = if rng.gen_bool(0.5) { 4 } else { 8 };
        let block = [8usize, 16, 64, 256][rng.gen_range(0..4)];
        let cfg = QuantConfig::blocked(bits, block).unwrap();
        let len = rng.gen_range(1..400);
        let n = rng.gen_range(1..6);
        let sd = 10f32.powi(rng.gen_range(-3..3));
        let qs = (0..n)
            .map(|_| quantize(&normal_tensor(&mut rng, len, sd), &cfg))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let fused = fused_dequant_reduce_quant(&qs, &cfg).map_err(|e| e.to_string())?;
        let mut sum = vec![0.0f32; len];
        for q in &qs {
            let d = dequantize(q).map_err(|e| e.to_string())?;
            sum.iter_mut().zip(d.values()).for_each(|(a, b)| *a += b);
        }
        let unfused = quantize(&FlatTensor::half(sum).unwrap(), &cfg).map_err(|e| e.to_string())?;
        check!(
            fused.to_bytes() == unfused.to_bytes(),
            "fused result differs (len {len}, n {n})"
        );
        fused_cases += 1;
    }
    Ok(format!(
        "0 violations over {} INT4 and {} INT8 elements; fused == unfused in {fused_cases} cases",
        totals[0], totals[1]
    ))
}

fn rmse(a: &[f32], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn codec_passes() -> Outcome {
    let cfg = QuantConfig::blocked(4, 512).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worlds = Vec::new();
    for (y, x) in [(1, 1), (1, 2), (2, 2), (2, 4), (3, 2), (4, 4), (2, 8)] {
        let topo = ClusterTopology::new(y, x).unwrap();
        let world = topo.world();
        let len = world * 512 * 2;
        let inputs: Vec<FlatTensor> = (0..world).map(|_| normal_tensor(&mut rng, len, 1.0)).collect();
        let mut net = SimNet::new(topo);
        let two = qgz_2hop(&mut net, "qgz", &inputs, &QgzOptions::new(Codec::Quantized(cfg)))
            .map_err(|e| e.to_string())?;
        check!(
            two.quantize_passes == 2,
            "world {world}: qgZ made {} passes",
            two.quantize_passes
        );
        let naive =
            reduce_scatter_ring_naive_quant(&mut net, "ring", &inputs, &cfg).map_err(|e| e.to_string())?;
        check!(
            naive.quantize_passes as usize == world - 1,
            "world {world}: naive ring made {} passes",
            naive.quantize_passes
        );
        worlds.push(world);
    }

    let topo = ClusterTopology::new(4, 4).unwrap();
    let len = 16 * 512 * 4;
    let inputs: Vec<FlatTensor> = (0..16).map(|_| normal_tensor(&mut rng, len, 1.0)).collect();
    let mut oracle = vec![0.0f64; len];
    for t in &inputs {
        oracle
            .iter_mut()
            .zip(t.values())
            .for_each(|(a, b)| *a += *b as f64);
    }
    let mut net = SimNet::new(topo);
    let two = qgz_2hop(&mut net, "qgz", &inputs, &QgzOptions::new(Codec::Quantized(cfg)))
        .map_err(|e| e.to_string())?;
    let naive =
        reduce_scatter_ring_naive_quant(&mut net, "ring", &inputs, &cfg).map_err(|e| e.to_string())?;
    let shard = len / 16;
    let flat = |o: &[FlatTensor]| o.iter().flat_map(|t| t.values().to_vec()).collect::<Vec<f32>>();
    let e_qgz = rmse(&flat(&two.outputs), &oracle);
    let e_naive = rmse(&flat(&naive.outputs), &oracle);
    assert_eq!(shard * 16, len);
    check!(e_naive > e_qgz, "naive ring rmse {e_naive} <= qgZ rmse {e_qgz}");
    Ok(format!(
        "2 passes for qgZ and world-1 for the ring at worlds {worlds:?}; world 16 INT4 rmse ring {e_naive:.4} > qgZ {e_qgz:.4}"
    ))
}

fn memory_model() -> Outcome {
    let m = MemoryModel::new(100e9, 1024, 64).map_err(|e| e.to_string())?;
    let get = |mode| memory_per_device(mode, &m).unwrap();
    let hpz_ratio = get(MemoryMode::Hpz) / get(MemoryMode::Zero3);
    let dp_ratio = get(MemoryMode::Dp) / get(MemoryMode::Hpz);
    check!((hpz_ratio - 8.9).abs() / 8.9 <= 0.05, "hpZ/ZeRO-3 = {hpz_ratio}");
    check!((dp_ratio - 114.0).abs() / 114.0 <= 0.05, "DP/hpZ = {dp_ratio}");
    Ok(format!(
        "hpZ/ZeRO-3 = {hpz_ratio:.2}x (8.9x), DP/hpZ = {dp_ratio:.1}x (114x)"
    ))
}

fn hpz_isolation() -> Outcome {
    let mut shapes = Vec::new();
    for (y, x) in [(2, 1), (2, 2), (3, 2), (2, 4), (4, 8)] {
        let topo = ClusterTopology::new(y, x).unwrap();
        for cfg in [
            ZeroConfig::baseline().with_toggles(false, true, false),
            ZeroConfig::zeropp(),
        ] {
            let it =
                simulate_comm_iteration(topo, &cfg, 2048 * topo.world(), SEED).map_err(|e| e.to_string())?;
            let c = it.ledger.counters(BWD_ALLGATHER, LinkClass::Inter);
            check!(
                c.bytes.total() == 0 && c.messages == 0,
                "{y}x{x}: {} inter-node bytes in the backward all-gather",
                c.bytes.total()
            );
            check!(
                it.ledger.counters(BWD_ALLGATHER, LinkClass::Intra).bytes.total() > 0 || x == 1,
                "{y}x{x}: backward all-gather moved nothing"
            );
        }
        shapes.push(format!("{y}x{x}"));
    }
    Ok(format!(
        "0 inter-node backward all-gather bytes on {}",
        shapes.join(", ")
    ))
}

fn routing_equivalence() -> Outcome {
    let topo = ClusterTopology::new(2, 4).unwrap();
    let shape = ModelShape::toy();
    let cfg = ZeroConfig {
        passthrough: true,
        stages: 2,
        ..ZeroConfig::zeropp()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let init = shape.init(&mut rng);
    let task = SyntheticTask::generate(&shape, 2048, 16, 0.1, SEED);
    let links = LinkParams::dgx_like();
    let mut a = Engine::new(topo, links, cfg, shape.clone(), &init).map_err(|e| e.to_string())?;
    let mut b = a.clone();
    let world = topo.world();
    for step in 0..100 {
        let batches: Vec<Batch> = (0..world).map(|r| task.batch(step, r, world, 8)).collect();
        let ra = a.zero3_step(&batches).map_err(|e| e.to_string())?;
        let rb = b.zeropp_step(&batches).map_err(|e| e.to_string())?;
        check!(
            rb.record.qgz && rb.record.hpz && rb.record.qwz,
            "step {step}: toggles not active"
        );
        check!(
            rb.temporally_consistent,
            "step {step}: backward weights differ from forward weights"
        );
        check!(
            ra.record.loss.to_bits() == rb.record.loss.to_bits(),
            "step {step}: losses differ"
        );
        check!(a.shards() == b.shards(), "step {step}: shard states differ");
    }
    let bits = |e: &Engine| e.master_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check!(bits(&a) == bits(&b), "master weights differ");
    Ok(format!(
        "100 steps on {}x{}, {} parameters, bit-identical",
        2,
        4,
        shape.param_count()
    ))
}

fn convergence() -> Outcome {
    let steps = 500;
    let base = ToyConfig::default();
    let variants = [
        ("baseline", ZeroConfig::baseline()),
        ("ZeRO++", ZeroConfig::zeropp()),
        ("full-tensor", ZeroConfig::zeropp().full_tensor().unwrap()),
        (
            "interleaved",
            ZeroConfig {
                qgz_fraction: 0.5,
                ..ZeroConfig::zeropp()
            },
        ),
        ("qgZ off", ZeroConfig::zeropp().with_toggles(true, true, false)),
    ];
    let start = Instant::now();
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|(_, z)| {
                let cfg = ToyConfig {
                    zero: *z,
                    ..base.clone()
                };
                s.spawn(move || train_toy(&cfg, steps, SEED))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let loss: Vec<f64> = runs.iter().map(|r| r.final_val_loss).collect();
    let summary = variants
        .iter()
        .zip(&loss)
        .map(|((n, _), l)| format!("{n} {l:.5}"))
        .collect::<Vec<_>>()
        .join(", ");
    for ((name, _), r) in variants.iter().zip(&runs) {
        if *name != "full-tensor" {
            check!(r.diverged.is_none(), "{name} diverged at {:?}", r.diverged);
        }
    }
    let gap = (loss[1] - loss[0]).abs() / loss[0];
    check!(
        gap <= 0.05,
        "ZeRO++ vs baseline gap {:.2}% ({summary})",
        100.0 * gap
    );
    let full_worse = runs[2].diverged.is_some() || loss[2] > loss[1];
    check!(full_worse, "full-tensor not worse than blocked ({summary})");
    let (lo, hi) = (loss[1].min(loss[4]), loss[1].max(loss[4]));
    check!(
        (lo..=hi).contains(&loss[3]),
        "interleaved outside [{lo}, {hi}] ({summary})"
    );
    check!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{summary}; gap {:.2}%; {elapsed:.1?}", 100.0 * gap))
}

fn latency_model() -> Outcome {
    // S = 1 equals the unpipelined sum, checked against the recorded phases.
    let topo = ClusterTopology::new(2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let inputs: Vec<FlatTensor> = (0..8).map(|_| normal_tensor(&mut rng, 8 * 512, 1.0)).collect();
    let mut net = SimNet::new(topo);
    let cfg = QuantConfig::blocked(4, 512).unwrap();
    let out = qgz_2hop(&mut net, "qgz", &inputs, &QgzOptions::new(Codec::Quantized(cfg)))
        .map_err(|e| e.to_string())?;
    let links = LinkParams::dgx_like();
    let mut unpipelined = 0.0;
    for p in &out.trace.phases {
        for (load, cost) in [(p.intra, links.intra), (p.inter, links.inter)] {
            unpipelined += cost.alpha * load.messages as f64 + load.bytes as f64 / cost.beta;
        }
    }
    let t1 = estimate_latency(&out.trace, &links, 1, true)
        .map_err(|e| e.to_string())?
        .total_s;
    check!(
        (t1 - unpipelined).abs() <= 1e-12 * unpipelined,
        "T(1) = {t1}, unpipelined sum = {unpipelined}"
    );

    // Equal phase costs, zero alpha: two stages save a quarter.
    let trace = |intra: u64, inter: u64, msgs: u64| CollectiveTrace {
        label: "synthetic".into(),
        stages: 1,
        phases: vec![PhaseRecord {
            intra: PhaseLoad {
                bytes: intra,
                messages: msgs,
            },
            inter: PhaseLoad {
                bytes: inter,
                messages: msgs,
            },
        }],
        events: Vec::new(),
        codec_elements: 0,
    };
    let free = LinkParams::new(
        LinkCost {
            alpha: 0.0,
            beta: 100e9,
        },
        LinkCost {
            alpha: 0.0,
            beta: 10e9,
        },
    )
    .unwrap();
    let sym = trace(1_000_000, 100_000, 1);
    let s1 = estimate_latency(&sym, &free, 1, true).unwrap().total_s;
    let s2 = estimate_latency(&sym, &free, 2, true).unwrap().total_s;
    check!((s2 - 0.75 * s1).abs() <= 1e-12 * s1, "T(2) = {s2}, T(1) = {s1}");

    // alpha > 0: the reported argmin agrees with brute force over S = 1..8.
    let costly = LinkParams::new(
        LinkCost {
            alpha: 2e-5,
            beta: 1e9,
        },
        LinkCost {
            alpha: 2e-5,
            beta: 1e9,
        },
    )
    .unwrap();
    let tr = trace(1_000_000, 1_000_000, 1);
    let (_, best) = latency_sweep(&tr, &costly, 8).map_err(|e| e.to_string())?;
    let formula = |s: usize| {
        let s = s as f64;
        let a = s * 2e-5 + 1e-3;
        let b = s * 2e-5 + 1e-3;
        (a + b) / s + (s - 1.0) * a.max(b) / s
    };
    let brute = (1..=8)
        .min_by(|&x, &y| formula(x).total_cmp(&formula(y)))
        .unwrap();
    check!(best == brute, "sweep argmin {best}, brute force {brute}");
    check!(best > 1 && best < 8, "argmin {best} is not interior");
    Ok(format!(
        "T(1) = unpipelined = {:.3} us; T(2)/T(1) = {:.4}; argmin S = {best} (brute force {brute})",
        t1 * 1e6,
        s2 / s1
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("volume table", volume_table),
        ("qgZ placement", qgz_placement),
        ("reorder closed form", reorder_closed_form),
        ("quantization error bound", quantization_bound),
        ("codec-pass count", codec_passes),
        ("memory model", memory_model),
        ("hpZ isolation", hpz_isolation),
        ("routing-only equivalence", routing_equivalence),
        ("convergence", convergence),
        ("latency model", latency_model),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
