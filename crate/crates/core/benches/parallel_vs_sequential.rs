use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use projpred::exec::Exec;
use projpred::projector::{project, ProjectOptions, ReferenceFit};
use projpred::search::{forward_step, SearchOptions};
use projpred::{build_design, parse_formula, Column, Dataset, DesignOptions, Factor, Family, Term};

fn setup(n: usize, draws: usize) -> (Dataset, ReferenceFit) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cols = IndexMap::new();
    for name in ["x1", "x2", "x3", "x4"] {
        cols.insert(name.into(), Column::Continuous((0..n).map(|_| rng.sample(StandardNormal)).collect()));
    }
    cols.insert("g".into(), Column::Factor(Factor::from_codes((0..n).map(|i| i % 10).collect(), 10)));
    let data = Dataset::new("y", vec![0.0; n], cols).unwrap();
    let x1 = data.continuous("x1").unwrap().to_vec();
    let effects: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
    let mu = DMatrix::from_fn(draws, n, |_, i| {
        let eta = 0.5 * x1[i] + effects[i % 10] + 0.2 * rng.sample::<f64, _>(StandardNormal);
        Family::Poisson.mean(eta)
    });
    let reference = ReferenceFit::new(Family::Poisson, mu, vec![1.0; draws]).unwrap();
    (data, reference)
}

fn strategies() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_project(c: &mut Criterion) {
    let (data, reference) = setup(200, 16);
    let terms = vec![Term::population("x1"), Term::group_intercept("g")];
    let design = build_design(&data, &terms, &DesignOptions::default()).unwrap();
    let mut group = c.benchmark_group("project_multilevel");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| project(&reference, &design, &ProjectOptions::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_step(c: &mut Criterion) {
    let (data, reference) = setup(200, 4);
    let full = parse_formula("y ~ x1 + x2 + x3 + x4 + (1 | g)").unwrap().with_family(Family::Poisson);
    let mut group = c.benchmark_group("forward_step");
    group.sample_size(10);
    for (name, exec) in strategies() {
        let opts = SearchOptions { exec, ..SearchOptions::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| forward_step(&[Term::population("x1")], &full, &reference, &data, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_project, bench_forward_step);
criterion_main!(benches);
