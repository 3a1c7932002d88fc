//! Independent scenario runs spread over rayon vs one after another.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use shift_harness::sweep::{self, random_scenario};

fn runs(c: &mut Criterion) {
    let scs: Vec<_> = (0..16).map(random_scenario).collect();
    let mut g = c.benchmark_group("sweep_16_random");
    g.sample_size(10);
    for parallel in [false, true] {
        let id = BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" });
        g.bench_with_input(id, &parallel, |b, &p| b.iter(|| sweep::sweep(scs.clone(), p)));
    }
    g.finish();
}

fn soundness(c: &mut Criterion) {
    let mut g = c.benchmark_group("soundness_32");
    g.sample_size(10);
    for parallel in [false, true] {
        let id = BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" });
        g.bench_with_input(id, &parallel, |b, &p| b.iter(|| sweep::soundness(7, 32, p)));
    }
    g.finish();
}

criterion_group!(benches, runs, soundness);
criterion_main!(benches);
