use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use zeropp_core::collectives::{
    qgz_2hop, reduce_scatter_ring, reduce_scatter_ring_naive_quant, Codec, QgzOptions,
};
use zeropp_core::engine::simulate_comm_iteration;
use zeropp_core::quantizer::{fused_dequant_reduce_quant, quantize, FlatTensor, QuantConfig};
use zeropp_core::simnet::SimNet;
use zeropp_core::{ClusterTopology, ZeroConfig};

fn tensor(rng: &mut ChaCha8Rng, len: usize) -> FlatTensor {
    let d = Normal::new(0.0f32, 1.0).unwrap();
    FlatTensor::half((0..len).map(|_| f16::from_f32(d.sample(rng)).to_f32()).collect()).unwrap()
}

fn codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1 << 20;
    let t = tensor(&mut rng, n);
    let mut g = c.benchmark_group("quantize");
    g.throughput(Throughput::Elements(n as u64));
    for (bits, block) in [(8u8, 2048usize), (4, 512)] {
        let cfg = QuantConfig::blocked(bits, block).unwrap();
        g.bench_with_input(BenchmarkId::new(format!("int{bits}"), block), &cfg, |b, cfg| {
            b.iter(|| quantize(black_box(&t), cfg).unwrap())
        });
    }
    g.finish();

    let cfg = QuantConfig::blocked(4, 512).unwrap();
    let parts: Vec<_> = (0..8)
        .map(|_| quantize(&tensor(&mut rng, 1 << 17), &cfg).unwrap())
        .collect();
    let mut g = c.benchmark_group("fused_dequant_reduce_quant");
    g.throughput(Throughput::Elements(8 << 17));
    g.bench_function("8x131072_int4", |b| {
        b.iter(|| fused_dequant_reduce_quant(black_box(&parts), &cfg).unwrap())
    });
    g.finish();
}

fn reduce_scatter(c: &mut Criterion) {
    let topo = ClusterTopology::new(2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let len = 1 << 16;
    let inputs: Vec<_> = (0..topo.world()).map(|_| tensor(&mut rng, len)).collect();
    let cfg = QuantConfig::blocked(4, 512).unwrap();
    let mut g = c.benchmark_group("reduce_scatter_2x4");
    g.throughput(Throughput::Elements((len * topo.world()) as u64));
    g.sample_size(20);
    g.bench_function("ring_fp16", |b| {
        b.iter(|| reduce_scatter_ring(&mut SimNet::new(topo), "rs", black_box(&inputs)).unwrap())
    });
    g.bench_function("ring_int4", |b| {
        b.iter(|| {
            reduce_scatter_ring_naive_quant(&mut SimNet::new(topo), "rs", black_box(&inputs), &cfg).unwrap()
        })
    });
    for stages in [1usize, 4] {
        let opts = QgzOptions::new(Codec::Quantized(cfg)).with_stages(stages);
        g.bench_with_input(BenchmarkId::new("qgz_2hop_int4", stages), &opts, |b, opts| {
            b.iter(|| qgz_2hop(&mut SimNet::new(topo), "rs", black_box(&inputs), opts).unwrap())
        });
    }
    g.finish();
}

fn iteration(c: &mut Criterion) {
    let topo = ClusterTopology::new(2, 4).unwrap();
    let mut g = c.benchmark_group("comm_iteration_2x4_2^18");
    g.sample_size(10);
    for (name, cfg) in [
        ("baseline", ZeroConfig::baseline()),
        ("zeropp", ZeroConfig::zeropp()),
    ] {
        g.bench_function(name, |b| {
            b.iter(|| simulate_comm_iteration(topo, &cfg, 1 << 18, 3).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, codec, reduce_scatter, iteration);
criterion_main!(benches);
