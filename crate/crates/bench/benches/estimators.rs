use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use selsieve_bench::fixture;
use selsieve_core::baselines::{heckman_mle, tpm_ols};
use selsieve_core::basis::{design_matrix, eval_basis, place_knots, BasisSpec};
use selsieve_core::dgp::{builtin_spec, draw_sample, BuiltinDgp};
use selsieve_core::first_stage::{expand, fit_sieve_binary};
use selsieve_core::second_stage::sls_estimate;
use selsieve_core::{Matrix, RngStream};
use std::hint::black_box;

fn bench_basis(c: &mut Criterion) {
    let mut rng = RngStream::from_seed(1);
    let values: Vec<f64> = (0..5000).map(|_| rng.standard_normal()).collect();
    let knots = place_knots(&values, &BasisSpec::cubic(5)).unwrap();
    c.bench_function("eval_basis cubic K=9", |b| {
        b.iter(|| black_box(eval_basis(black_box(0.37), &knots)))
    });
    c.bench_function("design_matrix n=5000 K=9", |b| {
        b.iter(|| black_box(design_matrix(black_box(&values), &knots)))
    });
}

fn bench_draw(c: &mut Criterion) {
    let spec = builtin_spec(BuiltinDgp::Dgp2);
    c.bench_function("draw_sample dgp2 n=5000", |b| {
        let mut r = 0u64;
        b.iter(|| {
            r += 1;
            let mut rng = RngStream::substream(7, r);
            black_box(draw_sample(&spec, &mut rng).unwrap())
        })
    });
}

fn bench_first_stage(c: &mut Criterion) {
    let data = fixture(BuiltinDgp::Dgp2, 5000, 3);
    let spec = BasisSpec::cubic(3);
    let (expanded, _) = expand(&data.x, &[0], &spec).unwrap();
    c.bench_function("fit_sieve_binary dgp2 n=5000", |b| {
        b.iter(|| black_box(fit_sieve_binary(&data.d, &expanded).unwrap()))
    });
}

fn bench_second_stage(c: &mut Criterion) {
    let data = fixture(BuiltinDgp::Dgp2, 5000, 3);
    let spec1 = BasisSpec::cubic(3);
    let spec2 = BasisSpec::cubic(5);
    let (expanded, _) = expand(&data.x, &[0], &spec1).unwrap();
    let first = fit_sieve_binary(&data.d, &expanded).unwrap();
    c.bench_function("sls_estimate dgp2 n=5000", |b| {
        b.iter(|| {
            black_box(sls_estimate(&data.y, &data.x, &data.d, &first.p_hat, &spec2).unwrap())
        })
    });
}

fn bench_baselines(c: &mut Criterion) {
    let data = fixture(BuiltinDgp::Dgp2, 5000, 3);
    c.bench_function("tpm_ols n=5000", |b| {
        b.iter(|| black_box(tpm_ols(&data.y, &data.x, &data.d).unwrap()))
    });
    let mut z = Matrix::zeros(data.x.rows(), 1 + data.x.cols());
    for i in 0..data.x.rows() {
        let row = z.row_mut(i);
        row[0] = 1.0;
        row[1..].copy_from_slice(data.x.row(i));
    }
    c.bench_function("heckman_mle n=5000", |b| {
        b.iter(|| black_box(heckman_mle(&data.y, &data.x, &data.d, &z).unwrap()))
    });
}

fn bench_full_replication(c: &mut Criterion) {
    let spec1 = BasisSpec::cubic(3);
    let spec2 = BasisSpec::cubic(5);
    let mut group = c.benchmark_group("two_step_replication");
    for n in [1000usize, 5000] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let data = fixture(BuiltinDgp::Dgp1, n, 5);
            b.iter(|| {
                let (expanded, _) = expand(&data.x, &[0, 1], &spec1).unwrap();
                let first = fit_sieve_binary(&data.d, &expanded).unwrap();
                black_box(
                    sls_estimate(&data.y, &data.x, &data.d, &first.p_hat, &spec2).unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_basis,
    bench_draw,
    bench_first_stage,
    bench_second_stage,
    bench_baselines,
    bench_full_replication
);
criterion_main!(benches);
