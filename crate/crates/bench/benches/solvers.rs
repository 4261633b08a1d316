use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use radgraph::curvature_ops::{linearize_vertical, residual_direct};
use radgraph::solvers::{continuity_path_theorem3, solve_direct, SolverConfig};
use radgraph::verification::structure_identity_suite;
use radgraph::{CurvatureSpec, ScalarField};
use radgraph_bench::{fiber_grid, manufactured, product_grid, smooth_field};

fn operators(c: &mut Criterion) {
    let mut g = c.benchmark_group("operators");
    for (d, res) in [(1, 256), (2, 32), (2, 64)] {
        let grid = fiber_grid(d, res);
        let k = manufactured(&grid);
        let u = smooth_field(&grid);
        let id = format!("d{d}/{}", grid.len());
        g.bench_with_input(BenchmarkId::new("residual_direct", &id), &u, |b, u| {
            b.iter(|| residual_direct(black_box(u), &k))
        });
        g.bench_with_input(BenchmarkId::new("linearize_vertical", &id), &u, |b, u| {
            b.iter(|| linearize_vertical(black_box(u), 1.0, 1.0).unwrap())
        });
    }
    g.finish();
}

fn direct_newton(c: &mut Criterion) {
    let mut g = c.benchmark_group("direct_newton");
    g.sample_size(10);
    let cfg = SolverConfig::default();
    for (d, res) in [(1, 64), (1, 256), (2, 32), (2, 64)] {
        let grid = fiber_grid(d, res);
        let k = manufactured(&grid);
        g.bench_function(BenchmarkId::new("manufactured", format!("d{d}/{}", grid.len())), |b| {
            b.iter(|| solve_direct(&k, ScalarField::constant(grid.clone(), 0.0), &cfg).unwrap())
        });
    }
    g.finish();
}

fn coupled(c: &mut Criterion) {
    let mut g = c.benchmark_group("theorem3_path");
    g.sample_size(10);
    let cfg = SolverConfig::default();
    let f = CurvatureSpec::parse("expr:1+0.2*cos(theta)").unwrap();
    let point = fiber_grid(1, 64);
    g.bench_function("point_base/64", |b| b.iter(|| continuity_path_theorem3(&f, &point, &cfg).unwrap()));
    // A base-only f: exercises the least-squares path on the product.
    let e = CurvatureSpec::Constant(std::f64::consts::E);
    let prod = product_grid(16, 32);
    g.bench_function("product/16x32", |b| b.iter(|| continuity_path_theorem3(&e, &prod, &cfg).unwrap()));
    g.finish();
}

fn identities(c: &mut Criterion) {
    let mut g = c.benchmark_group("structure_identities");
    g.sample_size(10);
    for res in [16, 32] {
        let grid = fiber_grid(2, res);
        g.bench_function(BenchmarkId::from_parameter(grid.len()), |b| b.iter(|| structure_identity_suite(&grid, 42, 5)));
    }
    g.finish();
}

criterion_group!(benches, operators, direct_newton, coupled, identities);
criterion_main!(benches);
