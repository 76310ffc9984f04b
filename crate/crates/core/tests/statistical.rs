//! Simulation-backed checks of the estimators' statistical behavior:
//! covariance calibration, plug-in stability, test size, and the stability
//! of Monte Carlo conclusions across seeds.

use selsieve_core::basis::BasisSpec;
use selsieve_core::dgp::{builtin_spec, draw_sample, BuiltinDgp};
use selsieve_core::first_stage::{expand, fit_sieve_binary, lr_nonlinearity_test};
use selsieve_core::montecarlo::{run_mc, DgpSource, Estimator, McConfig};
use selsieve_core::second_stage::{covariance_classical, covariance_robust, sls_estimate};
use selsieve_core::{Matrix, RngStream};

/// Partial-linear data with a known probability column and configurable
/// error scale function; everyone selected.
fn partial_linear_sample(
    n: usize,
    rng: &mut RngStream,
    noise_sd: impl Fn(f64) -> f64,
) -> (Vec<f64>, Matrix, Vec<u8>, Vec<f64>) {
    let mut y = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.standard_normal();
        let pi = 0.05 + 0.9 * rng.uniform();
        let lambda = 0.5 * (2.0 * std::f64::consts::PI * pi).cos();
        y.push(0.8 * x + lambda + noise_sd(x) * rng.standard_normal());
        rows.push(vec![x]);
        p.push(pi);
    }
    (y, Matrix::from_rows(&rows).unwrap(), vec![1; n], p)
}

#[test]
fn classical_covariance_matches_monte_carlo_variance() {
    let reps = 1000;
    let n = 800;
    let spec = BasisSpec::cubic(4);
    let mut betas = Vec::with_capacity(reps);
    let mut var_estimates = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = RngStream::substream(501, r as u64);
        let (y, x, d, p) = partial_linear_sample(n, &mut rng, |_| 0.6);
        let fit = sls_estimate(&y, &x, &d, &p, &spec).unwrap();
        betas.push(fit.beta[0]);
        var_estimates.push(covariance_classical(&fit).unwrap().get(0, 0));
    }
    let mean = betas.iter().sum::<f64>() / reps as f64;
    let mc_var = betas.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let avg_estimate = var_estimates.iter().sum::<f64>() / reps as f64;
    let ratio = avg_estimate / mc_var;
    assert!(
        (ratio - 1.0).abs() < 0.10,
        "classical variance / MC variance = {ratio}"
    );
}

#[test]
fn robust_matches_classical_under_homoskedasticity() {
    let mut rng = RngStream::from_seed(77);
    let (y, x, d, p) = partial_linear_sample(5000, &mut rng, |_| 0.6);
    let fit = sls_estimate(&y, &x, &d, &p, &BasisSpec::cubic(5)).unwrap();
    let c = covariance_classical(&fit).unwrap().get(0, 0).sqrt();
    let r = covariance_robust(&fit).unwrap().get(0, 0).sqrt();
    assert!(
        ((r - c) / c).abs() < 0.05,
        "robust {r} vs classical {c}"
    );
}

#[test]
fn robust_coverage_under_heteroskedasticity() {
    // Error scale 1 + |x|: classical intervals are miscalibrated, the
    // sandwich stays near nominal.
    let reps = 1000;
    let n = 800;
    let spec = BasisSpec::cubic(4);
    let (mut hit_robust, mut hit_classical) = (0usize, 0usize);
    for r in 0..reps {
        let mut rng = RngStream::substream(502, r as u64);
        let (y, x, d, p) = partial_linear_sample(n, &mut rng, |xv| 0.5 * (1.0 + xv.abs()));
        let fit = sls_estimate(&y, &x, &d, &p, &spec).unwrap();
        let se_r = covariance_robust(&fit).unwrap().get(0, 0).sqrt();
        let se_c = covariance_classical(&fit).unwrap().get(0, 0).sqrt();
        let err = (fit.beta[0] - 0.8).abs();
        if err <= 1.959964 * se_r {
            hit_robust += 1;
        }
        if err <= 1.959964 * se_c {
            hit_classical += 1;
        }
    }
    let cov_r = hit_robust as f64 / reps as f64;
    let cov_c = hit_classical as f64 / reps as f64;
    assert!(
        (cov_r - 0.95).abs() <= 0.02,
        "robust coverage {cov_r} off nominal"
    );
    assert!(
        (cov_c - 0.95).abs() > 0.02,
        "classical coverage {cov_c} unexpectedly fine"
    );
}

#[test]
fn plug_in_estimates_approach_known_probability_fit() {
    // The gap between the estimated-probability and true-probability fits
    // shrinks with n.
    let spec1 = BasisSpec::cubic(3);
    let spec2 = BasisSpec::cubic(5);
    let reps = 500;
    let mut gaps = Vec::new();
    for (gi, n) in [1000usize, 4000, 16000].into_iter().enumerate() {
        let mut total = 0.0;
        let mut used = 0usize;
        let mut dgp = builtin_spec(BuiltinDgp::Dgp1);
        dgp.n = n;
        for r in 0..reps {
            let mut rng = RngStream::substream(600 + gi as u64, r as u64);
            let data = draw_sample(&dgp, &mut rng).unwrap();
            let (expanded, _) = expand(&data.x, &[0, 1], &spec1).unwrap();
            let first = fit_sieve_binary(&data.d, &expanded).unwrap();
            if !first.usable() {
                continue;
            }
            let plug = sls_estimate(&data.y, &data.x, &data.d, &first.p_hat, &spec2);
            let known = sls_estimate(&data.y, &data.x, &data.d, &data.p0, &spec2);
            if let (Ok(a), Ok(b)) = (plug, known) {
                total += (a.beta[0] - b.beta[0]).abs() + (a.beta[1] - b.beta[1]).abs();
                used += 1;
            }
        }
        assert!(used > reps * 9 / 10);
        gaps.push(total / used as f64);
    }
    assert!(
        gaps[0] > gaps[1] && gaps[1] > gaps[2],
        "plug-in gap not shrinking: {gaps:?}"
    );
}

#[test]
fn lr_test_size_on_linear_probit_index() {
    // Under a truly linear index the nonlinearity test rejects at close to
    // its nominal level.
    let reps = 500;
    let n = 5000;
    let spec = BasisSpec::cubic(3);
    let mut rejections = 0usize;
    for r in 0..reps {
        let mut rng = RngStream::substream(700, r as u64);
        let mut rows = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.standard_normal();
            let u = rng.standard_normal();
            d.push(u8::from(0.3 + 0.8 * x + u >= 0.0));
            rows.push(vec![x]);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let (expanded, e) = expand(&x, &[0], &spec).unwrap();
        let sieve = fit_sieve_binary(&d, &expanded).unwrap();
        let mut linear_design = Matrix::zeros(n, 2);
        for i in 0..n {
            linear_design.set(i, 0, 1.0);
            linear_design.set(i, 1, x.get(i, 0));
        }
        let linear = fit_sieve_binary(&d, &linear_design).unwrap();
        let lr = lr_nonlinearity_test(sieve.loglik, e.k_fs, linear.loglik, 2).unwrap();
        if lr.p_value <= 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!(
        (0.03..=0.07).contains(&rate),
        "size {rate} outside [0.03, 0.07]"
    );
}

#[test]
fn estimator_ranking_stable_across_seeds() {
    // On the two-continuous-covariate design the RMSE ordering
    // oracle < kimlee < hsmle < tpm holds for every base seed.
    for seed in [11u64, 22, 33, 44, 55] {
        let mut config = McConfig::new(
            DgpSource::Builtin(BuiltinDgp::Dgp1),
            vec![
                Estimator::Tpm,
                Estimator::Hsmle,
                Estimator::Kimlee,
                Estimator::Oracle,
            ],
        );
        config.reps = 500;
        config.base_seed = seed;
        let run = run_mc(&config).unwrap();
        let rmse_of = |e: Estimator| {
            run.summary
                .estimators
                .iter()
                .find(|s| s.estimator == e)
                .unwrap()
                .params[0]
                .rmse
        };
        let (tpm, hsmle, kimlee, oracle) = (
            rmse_of(Estimator::Tpm),
            rmse_of(Estimator::Hsmle),
            rmse_of(Estimator::Kimlee),
            rmse_of(Estimator::Oracle),
        );
        assert!(
            oracle < kimlee && kimlee < hsmle && hsmle < tpm,
            "seed {seed}: ordering violated ({oracle}, {kimlee}, {hsmle}, {tpm})"
        );
    }
}
