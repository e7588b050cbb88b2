use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sdpcoulomb::{
    build_grid, build_sdp_coulomb, coulomb_cost, jenrich, make_marginal, project_psd, solve,
    MarginalKind, ProblemSpec, SolverSettings,
};
use sdpcoulomb_bench::{mixture_moment, symmetric_matrix};

fn psd_projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("project_psd");
    for n in [16, 64, 128] {
        let m = symmetric_matrix(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| project_psd(m.as_ref()).unwrap())
        });
    }
    group.finish();
}

fn pairwise_solve(c: &mut Criterion) {
    let grid = build_grid(1, 16, 2.0).unwrap();
    let rho = make_marginal(MarginalKind::Gaussian1d, &grid).unwrap();
    let spec = ProblemSpec::new(4, coulomb_cost(&grid)).with_marginal(rho);
    let problem = build_sdp_coulomb(&spec).unwrap();
    let settings = SolverSettings {
        tol: 1e-6,
        ..Default::default()
    };
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    group.bench_function("pairwise_16x4", |b| {
        b.iter(|| solve(&problem, &settings).unwrap())
    });
    group.finish();
}

fn jenrich_recovery(c: &mut Criterion) {
    let mut group = c.benchmark_group("jenrich");
    for (sites, electrons, components) in [(12, 3, 4), (32, 4, 8)] {
        let theta = mixture_moment(sites, electrons, components, 5);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{sites}x{components}")),
            &theta,
            |b, theta| b.iter(|| jenrich(theta, electrons, 0).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, psd_projection, pairwise_solve, jenrich_recovery);
criterion_main!(benches);
