use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nexlq_bench::systemic_risk;
use nexlq_core::control::solve_mean_flow;
use nexlq_core::grid::{apply_kernel, operator_norm};
use nexlq_core::pipeline::{solve, SolveOptions};
use nexlq_core::riccati_abstract::{solve_abstract_riccati, AbstractOptions};
use nexlq_core::riccati_standard::solve_standard_riccati;
use nexlq_core::sim::{simulate, SimConfig};
use nexlq_core::LabelField;

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel");
    for n in [16, 64] {
        let (p, _, _) = systemic_risk(n, 10);
        let x = LabelField::constant(n, &[1.0]);
        let kq = &p.kernels().g_q;
        g.bench_with_input(BenchmarkId::new("apply", n), &n, |b, _| b.iter(|| apply_kernel(black_box(kq), &x, p.grid())));
        g.bench_with_input(BenchmarkId::new("operator_norm", n), &n, |b, _| b.iter(|| operator_norm(black_box(kq), p.grid())));
    }
    g.finish();
}

fn riccati(c: &mut Criterion) {
    let mut g = c.benchmark_group("riccati");
    g.sample_size(10);
    for n in [16, 32] {
        let (p, _, tg) = systemic_risk(n, 1000);
        g.bench_with_input(BenchmarkId::new("standard", n), &n, |b, _| b.iter(|| solve_standard_riccati(black_box(&p), &tg).unwrap()));
        let k = solve_standard_riccati(&p, &tg).unwrap();
        g.bench_with_input(BenchmarkId::new("abstract", n), &n, |b, _| {
            b.iter(|| solve_abstract_riccati(black_box(&k), &p, &tg, AbstractOptions::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("full_solve", n), &n, |b, _| {
            b.iter(|| solve(black_box(&p), &tg, SolveOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    let (p, init, tg) = systemic_risk(16, 1000);
    let sol = solve(&p, &tg, SolveOptions::default()).unwrap();
    let law = sol.law.policy();
    let means = solve_mean_flow(&p, law, &init, &tg).unwrap();
    for paths in [256, 2048] {
        g.bench_with_input(BenchmarkId::new("optimal_law", paths), &paths, |b, &m| {
            b.iter(|| simulate(&p, law, &means, &init, SimConfig::new(m, 1), Some(&sol.law)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernels, riccati, simulation);
criterion_main!(benches);
