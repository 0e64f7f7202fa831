use criterion::{criterion_group, criterion_main, Criterion};
use prcl_core::negatives::generate_vn;
use prcl_core::network::{backward, forward, ModelParams, NetShape};
use prcl_core::prob_embed::{fuse, mls, mls_grad};
use prcl_core::prototypes::gdp_update;
use prcl_core::{GlobalPrototype, ProbRepr, VnScale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const D: usize = 16;

fn repr(rng: &mut ChaCha8Rng) -> ProbRepr {
    ProbRepr::new(
        (0..D).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..D).map(|_| rng.random_range(0.1..2.0)).collect(),
    )
    .unwrap()
}

fn embedding_algebra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = repr(&mut rng);
    let b = repr(&mut rng);
    c.bench_function("mls_d16", |bch| bch.iter(|| mls(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("mls_grad_d16", |bch| bch.iter(|| mls_grad(black_box(&a), black_box(&b)).unwrap()));

    let batch: Vec<ProbRepr> = (0..256).map(|_| repr(&mut rng)).collect();
    c.bench_function("fuse_256_d16", |bch| bch.iter(|| fuse(black_box(&batch)).unwrap()));

    let gdp = gdp_update(&GlobalPrototype::empty(0, D), &a).unwrap();
    c.bench_function("gdp_update_d16", |bch| bch.iter(|| gdp_update(black_box(&gdp), black_box(&b)).unwrap()));

    let mut vn_rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("generate_vn_4_d16", |bch| {
        bch.iter(|| generate_vn(black_box(&gdp), 1.0, 4, VnScale::Variance, &mut vn_rng).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let shape = NetShape { features: 8, hidden: 32, classes: 6, embed: D };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init(shape, &mut rng);
    let pixels: Vec<f64> = (0..512 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    c.bench_function("forward_512px", |bch| bch.iter(|| forward(black_box(&params), black_box(&pixels)).unwrap()));
    let out = forward(&params, &pixels).unwrap();
    let gl = vec![0.01; 512 * 6];
    let gm = vec![0.01; 512 * D];
    c.bench_function("backward_512px", |bch| bch.iter(|| backward(&params, &out.cache, &gl, &gm, &gm).unwrap()));
}

criterion_group!(benches, embedding_algebra, network);
criterion_main!(benches);
