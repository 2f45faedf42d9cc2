use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zeropp_core::engine::{
    simulate_comm_iteration, train_toy, AdamParams, Batch, Engine, SyntheticTask, ToyConfig,
};
use zeropp_core::partitioner::{build_partitions, memory_per_device, memory_report, MemoryMode, MemoryModel};
use zeropp_core::{ClusterTopology, LinkParams, ModelShape, ZeroConfig};

fn row(topo: ClusterTopology, cfg: ZeroConfig) -> (f64, f64, f64) {
    let v = simulate_comm_iteration(topo, &cfg, 4096 * topo.world(), 1)
        .unwrap()
        .volumes;
    (v.fwd, v.bwd, v.rs)
}

#[test]
fn single_toggle_volume_rows() {
    let topo = ClusterTopology::new(4, 4).unwrap();
    let off = ZeroConfig::baseline();
    assert_eq!(row(topo, off.with_toggles(false, true, false)), (1.0, 0.0, 1.0));
    assert_eq!(row(topo, off.with_toggles(true, false, false)), (0.5, 0.5, 1.0));
    assert_eq!(row(topo, off.with_toggles(false, false, true)), (1.0, 1.0, 0.25));
    assert_eq!(row(topo, ZeroConfig::zeropp()), (0.5, 0.0, 0.25));
}

#[test]
fn single_node_has_no_cross_node_volume() {
    let topo = ClusterTopology::new(1, 8).unwrap();
    for cfg in [ZeroConfig::baseline(), ZeroConfig::zeropp()] {
        assert_eq!(row(topo, cfg), (0.0, 0.0, 0.0));
    }
}

#[test]
fn padded_models_report_exact_wire_volumes() {
    let topo = ClusterTopology::new(2, 4).unwrap();
    let it = simulate_comm_iteration(topo, &ZeroConfig::zeropp(), 10_001, 3).unwrap();
    assert!(it.padded_len > 10_001);
    let w = it.wire_volumes;
    assert_eq!((w.fwd, w.bwd, w.rs), (0.5, 0.0, 0.25));
}

fn engines(cfg: ZeroConfig, topo: ClusterTopology) -> (Engine, SyntheticTask) {
    let shape = ModelShape::new(vec![6, 16, 16, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = shape.init(&mut rng);
    let task = SyntheticTask::generate(&shape, 256, 16, 0.1, 4);
    (
        Engine::new(topo, LinkParams::dgx_like(), cfg, shape, &init).unwrap(),
        task,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn passthrough_routing_matches_zero3(
        qwz in any::<bool>(),
        hpz in any::<bool>(),
        qgz in any::<bool>(),
        stages in 1usize..3,
        nodes in 1usize..3,
        gpus in 1usize..4,
    ) {
        let topo = ClusterTopology::new(nodes, gpus).unwrap();
        let cfg = ZeroConfig { passthrough: true, stages, ..ZeroConfig::baseline().with_toggles(qwz, hpz, qgz) };
        let (mut a, task) = engines(cfg, topo);
        let mut b = a.clone();
        let world = topo.world();
        for step in 0..8 {
            let batches: Vec<Batch> = (0..world).map(|r| task.batch(step, r, world, 4)).collect();
            a.zero3_step(&batches).unwrap();
            let out = b.zeropp_step(&batches).unwrap();
            prop_assert!(out.temporally_consistent);
        }
        prop_assert_eq!(a.shards(), b.shards());
    }
}

#[test]
fn quantized_backward_weights_match_forward_weights() {
    let topo = ClusterTopology::new(2, 2).unwrap();
    for cfg in [
        ZeroConfig::zeropp(),
        ZeroConfig::zeropp().with_toggles(true, false, true),
    ] {
        let (mut e, task) = engines(cfg, topo);
        let batches: Vec<Batch> = (0..4).map(|r| task.batch(0, r, 4, 4)).collect();
        assert!(e.zeropp_step(&batches).unwrap().temporally_consistent);
    }
}

#[test]
fn optimizer_state_is_sharded_by_primary_partition() {
    let topo = ClusterTopology::new(2, 2).unwrap();
    let (mut e, task) = engines(ZeroConfig::zeropp(), topo);
    let batches: Vec<Batch> = (0..4).map(|r| task.batch(0, r, 4, 4)).collect();
    e.zeropp_step(&batches).unwrap();
    let spec = *e.partition();
    for (r, s) in e.shards().iter().enumerate() {
        let n = spec.primary_range(r).len();
        assert_eq!(s.master.len(), n);
        assert_eq!(s.first_moment.len(), n);
        assert_eq!(s.second_moment.len(), n);
    }
}

#[test]
fn step_ledger_is_the_sum_of_its_collectives() {
    let topo = ClusterTopology::new(2, 2).unwrap();
    let (mut e, task) = engines(ZeroConfig::zeropp(), topo);
    let batches: Vec<Batch> = (0..4).map(|r| task.batch(0, r, 4, 4)).collect();
    let out = e.zeropp_step(&batches).unwrap();
    let labels = out.ledger.labels();
    assert_eq!(labels, ["bwd_allgather", "fwd_allgather", "grad_reduce_scatter"]);
    let r = out.record;
    assert_eq!((r.fwd_vol, r.bwd_ag_vol, r.rs_vol), (0.5, 0.0, 0.25));
    for l in &labels {
        assert!(out.ledger.is_conserved(l));
    }
}

#[test]
fn training_reduces_loss_and_exports_csv() {
    let cfg = ToyConfig {
        shape: ModelShape::new(vec![8, 32, 32, 2]).unwrap(),
        train_rows: 512,
        val_rows: 128,
        ..ToyConfig::default()
    };
    let rec = train_toy(&cfg, 60, 7).unwrap();
    assert!(rec.diverged.is_none());
    assert_eq!(rec.rows.len(), 60);
    assert!(rec.rows.last().unwrap().loss < rec.rows[0].loss);
    assert!(rec.final_val_loss.is_finite());
    let mut buf = Vec::new();
    rec.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,fwd_vol,bwd_ag_vol,rs_vol,est_latency_s,qwZ,hpZ,qgZ"
    );
    assert_eq!(lines.count(), 60);
    // same seed, same trace
    assert_eq!(train_toy(&cfg, 60, 7).unwrap(), rec);
}

#[test]
fn divergence_is_recorded_not_raised() {
    let cfg = ToyConfig {
        shape: ModelShape::new(vec![8, 32, 2]).unwrap(),
        train_rows: 256,
        val_rows: 32,
        adam: AdamParams {
            lr: 1e4,
            ..AdamParams::default()
        },
        ..ToyConfig::default()
    };
    let rec = train_toy(&cfg, 200, 1).unwrap();
    let d = rec.diverged.expect("a huge learning rate diverges");
    assert!(d.step < 199);
    assert_eq!(rec.rows.len(), d.step + 1);
    assert!(rec.final_val_loss.is_nan());
}

#[test]
fn interleaved_schedule_switches_qgz_off() {
    let cfg = ToyConfig {
        shape: ModelShape::new(vec![8, 16, 2]).unwrap(),
        train_rows: 256,
        val_rows: 32,
        zero: ZeroConfig {
            qgz_fraction: 0.5,
            ..ZeroConfig::zeropp()
        },
        ..ToyConfig::default()
    };
    let rec = train_toy(&cfg, 20, 2).unwrap();
    let on: Vec<bool> = rec.rows.iter().map(|r| r.qgz).collect();
    assert!(on[..10].iter().all(|&b| b));
    assert!(on[10..].iter().all(|&b| !b));
    assert!(rec.rows[..10].iter().all(|r| r.rs_vol == 0.25));
    assert!(rec.rows[10..].iter().all(|r| r.rs_vol == 1.0));
}

proptest! {
    #[test]
    fn secondary_shards_cover_every_group(
        shard in 1usize..20,
        nodes in 1usize..5,
        gpus in 1usize..5,
        group_pick in 0usize..4,
    ) {
        let topo = ClusterTopology::new(nodes, gpus).unwrap();
        let world = topo.world();
        let divisors: Vec<usize> = (1..=world).filter(|d| world.is_multiple_of(*d)).collect();
        let group = divisors[group_pick % divisors.len()];
        let m = shard * world;
        let spec = build_partitions(m, &topo, group).unwrap();
        let mut owners = vec![0usize; m];
        for r in 0..world {
            for i in spec.primary_range(r) {
                owners[i] += 1;
                prop_assert_eq!(spec.primary_owner(i), r);
            }
        }
        prop_assert!(owners.iter().all(|&c| c == 1));
        for g in 0..spec.replicas() {
            let mut seen = vec![0usize; m];
            for r in spec.group_ranks(g) {
                for i in spec.secondary_range(r) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn memory_identities(params in 1.0f64..1e12, k in 0.0f64..32.0, p_exp in 0u32..11, a_exp in 0u32..11) {
        let world = 1u64 << p_exp;
        let alpha = 1u64 << a_exp.min(p_exp);
        let m = MemoryModel { params, k, world, alpha };
        let dp = memory_per_device(MemoryMode::Dp, &m).unwrap();
        let z3 = memory_per_device(MemoryMode::Zero3, &m).unwrap();
        let hpz = memory_per_device(MemoryMode::Hpz, &m).unwrap();
        prop_assert!((z3 * world as f64 - dp).abs() <= 1e-9 * dp);
        prop_assert!(hpz >= z3);
        prop_assert!(memory_report(&m).unwrap().iter().all(|r| r.bytes >= 0.0));
    }
}

#[test]
fn single_device_memory_collapses_to_dp() {
    let m = MemoryModel::new(1e9, 1, 1).unwrap();
    let dp = memory_per_device(MemoryMode::Dp, &m).unwrap();
    assert_eq!(memory_per_device(MemoryMode::Zero3, &m).unwrap(), dp);
    assert_eq!(memory_per_device(MemoryMode::Mics, &m).unwrap(), dp);
    // the secondary copy is still counted
    assert_eq!(memory_per_device(MemoryMode::Hpz, &m).unwrap(), dp + 2e9);
}
