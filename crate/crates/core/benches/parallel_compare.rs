//! Parallel vs sequential timings for the three hot paths: the chunked
//! matrix multiply behind every encoder, Monte-Carlo bound margins, and
//! the full bound-verification report. Build with
//! `--no-default-features` to see the pure sequential core instead.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;

use gated_mip_core::{linalg, mip, parallel, rng};

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (512, 256, 256);
    let mut r = rng::stream(7, "bench-matmul", &[]);
    let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-1.0..1.0)).collect();

    let mut group = c.benchmark_group("matmul_nn_512x256x256");
    group.bench_function("parallel", |bch| bch.iter(|| linalg::matmul_nn(&a, &b, m, k, n)));
    group.bench_function("serial", |bch| {
        bch.iter(|| linalg::matmul_nn_serial(&a, &b, m, k, n))
    });
    group.finish();
}

/// One bound-margin draw, shaped like the verification trials: sample a
/// tuple and a perturbation, return slack between bound and exact shift.
fn bound_margin(seed: u64, t: u64) -> f64 {
    let mut r = rng::stream(seed, "bench-bound", &[t]);
    let d = 48;
    let embeddings: Vec<Vec<f64>> =
        (0..3).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
    let delta: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let shift = mip::score_delta_exact(&refs, 0, &delta, 0.5).unwrap();
    let bound = mip::cauchy_schwarz_bound(&refs, 0, &delta, 0.5).unwrap();
    bound - shift.abs()
}

fn bench_bound_margins(c: &mut Criterion) {
    let trials = 512usize;
    let mut group = c.benchmark_group("bound_margins_512");
    group.bench_function("parallel", |bch| {
        bch.iter(|| parallel::par_map_range(trials, |t| bound_margin(11, t as u64)))
    });
    group.bench_function("serial", |bch| {
        bch.iter(|| parallel::seq_map_range(trials, |t| bound_margin(11, t as u64)))
    });
    group.finish();
}

fn bench_verify_bounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("verify_bounds");
    group.sample_size(10);
    group.bench_function("1000_trials", |bch| {
        bch.iter(|| mip::verify_bounds(1000, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_bound_margins, bench_verify_bounds);
criterion_main!(benches);
