use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use otfs_isac::autodiff::Tape;
use otfs_isac::channel::{dd_channel, path_derivatives, PathKind, PathParams, PathTaps};
use otfs_isac::crlb::{crlb, fim, SensingRefs};
use otfs_isac::otfs::FrameConfig;
use otfs_isac::preeq::{batch_loss, Instance, LossWeights, PreEqNet, PreEqNetConfig};
use otfs_isac::CMatrix;

fn paths(c: &FrameConfig) -> (Vec<PathParams>, Vec<PathParams>) {
    let comm = vec![PathParams::from_taps(
        PathTaps { h: Complex64::new(0.8, -0.3), l: 0.12, k: 0.2 },
        PathKind::Communication,
        c,
    )];
    let sensing = vec![PathParams::from_taps(
        PathTaps { h: Complex64::new(-0.4, 0.9), l: 0.245, k: 0.4 },
        PathKind::Sensing,
        c,
    )];
    (comm, sensing)
}

fn channel(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("channel");
    for side in [4usize, 8, 16] {
        let c = FrameConfig::with_grid(side, side, 1);
        let (comm, sensing) = paths(&c);
        g.bench_with_input(BenchmarkId::new("dd_channel", side * side), &c, |b, c| {
            b.iter(|| dd_channel(black_box(&comm), c).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("path_derivatives", side * side), &c, |b, c| {
            b.iter(|| path_derivatives(black_box(&sensing[0]), c).unwrap())
        });
    }
    g.finish();
}

fn bound(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("crlb");
    for side in [4usize, 8, 16] {
        let c = FrameConfig::with_grid(side, side, 1);
        let (_, sensing) = paths(&c);
        let p = CMatrix::identity(c.mn(), c.mn());
        g.bench_with_input(BenchmarkId::new("fim_and_inverse", side * side), &c, |b, c| {
            b.iter(|| crlb(&fim(black_box(&sensing), &p, c).unwrap(), 0.0, c).unwrap())
        });
    }
    g.finish();
}

fn network(cr: &mut Criterion) {
    let c = FrameConfig::desk();
    let (comm, sensing) = paths(&c);
    let inst = Instance::new(&comm, &sensing, &comm, &sensing, &c, &SensingRefs::default()).unwrap();
    let batch: Vec<&Instance> = std::iter::repeat_n(&inst, 16).collect();
    let net = PreEqNet::random(PreEqNetConfig::new(c.mn(), 1), 1);
    let weights = LossWeights { rho_c: 0.5, rho_l: 1e-6 };
    let refs = SensingRefs::default();
    let mut g = cr.benchmark_group("preeq_mn16_batch16");
    g.sample_size(20);
    g.bench_function("forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let nodes = net.bind(&mut tape, false);
            batch_loss(&net, &mut tape, &nodes, &batch, &c, &weights, &refs, None).unwrap()
        })
    });
    g.bench_function("forward_backward", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            let mut tape = Tape::new();
            let nodes = net.bind(&mut tape, true);
            let loss = batch_loss(&net, &mut tape, &nodes, &batch, &c, &weights, &refs, Some(&mut rng)).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, channel, bound, network);
criterion_main!(benches);
