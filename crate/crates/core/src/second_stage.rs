//! Step two of the two-step procedure: partial-linear sieve least squares of
//! the outcome on the covariates and a spline basis of the fitted selection
//! probabilities, over the selected subsample, with classical and
//! heteroskedasticity-robust covariance.

use crate::basis::{design_matrix, place_knots, BasisSpec, KnotVector};
use crate::error::{Error, Result};
use crate::first_stage::LrTest;
use crate::numerics::{cholesky, solve_ls, Matrix};

/// Fitted partial-linear sieve least squares.
#[derive(Clone, Debug)]
pub struct SlsFit {
    /// Covariate coefficients (no intercept; the level is absorbed by the
    /// selection-bias term).
    pub beta: Vec<f64>,
    /// Coefficients on the probability-basis columns.
    pub lambda_coef: Vec<f64>,
    /// Residuals over the selected subsample.
    pub residuals: Vec<f64>,
    /// Covariates residualized on the probability basis (selected rows).
    pub xtilde: Matrix,
    /// Knots of the fitted lambda basis.
    pub knots: KnotVector,
    /// Probability-basis columns dropped as collinear (indices into the
    /// basis), usually empty.
    pub dropped_lambda: Vec<usize>,
    pub n_selected: usize,
    pub k2: usize,
}

/// Relative residual-norm floor below which a covariate counts as a
/// deterministic function of the probability basis.
const IDENTIFICATION_TOL: f64 = 1e-8;

/// Two-step plug-in estimator of the outcome coefficients: restrict to the
/// selected subsample, build the spline basis of `p_hat` with knots from
/// `lambda_spec` placed over the selected probabilities, and jointly regress
/// the outcome on covariates and basis. Equivalent to the projection form
/// ((DX)'(I-Q)(DX))^{-1} (DX)'(I-Q)(Dy) by Frisch-Waugh.
pub fn sls_estimate(
    y: &[f64],
    x: &Matrix,
    d: &[u8],
    p_hat: &[f64],
    lambda_spec: &BasisSpec,
) -> Result<SlsFit> {
    let n = y.len();
    if x.rows() != n || d.len() != n || p_hat.len() != n {
        return Err(Error::invalid("sls_estimate inputs must share length"));
    }
    let p_sel: Vec<f64> = (0..n).filter(|&i| d[i] == 1).map(|i| p_hat[i]).collect();
    if p_sel.is_empty() {
        return Err(Error::TooFewSelected {
            selected: 0,
            params: x.cols() + lambda_spec.dim(),
        });
    }
    let knots = place_knots(&p_sel, lambda_spec)?;
    sls_with_knots(y, x, d, p_hat, &knots)
}

/// Same estimator with a caller-supplied knot vector for the lambda basis.
pub fn sls_with_knots(
    y: &[f64],
    x: &Matrix,
    d: &[u8],
    p_hat: &[f64],
    knots: &KnotVector,
) -> Result<SlsFit> {
    let n = y.len();
    let sel: Vec<usize> = (0..n).filter(|&i| d[i] == 1).collect();
    let mut xs = Matrix::zeros(sel.len(), x.cols());
    let mut ys = Vec::with_capacity(sel.len());
    let mut ps = Vec::with_capacity(sel.len());
    for (r, &i) in sel.iter().enumerate() {
        xs.row_mut(r).copy_from_slice(x.row(i));
        ys.push(y[i]);
        ps.push(p_hat[i]);
    }
    let r = design_matrix(&ps, knots);
    sls_with_basis(&ys, &xs, &r, knots.clone())
}

/// Core solver on pre-restricted data: `ys`, `xs` and the basis matrix `r`
/// all range over selected observations only. Exposed so span-invariance
/// properties can be exercised directly on transformed bases.
pub fn sls_with_basis(ys: &[f64], xs: &Matrix, r: &Matrix, knots: KnotVector) -> Result<SlsFit> {
    let n_selected = ys.len();
    let d_x = xs.cols();
    let k2 = r.cols();
    if n_selected <= d_x + k2 {
        return Err(Error::TooFewSelected {
            selected: n_selected,
            params: d_x + k2,
        });
    }

    // Joint augmented regression [X R].
    let mut a = Matrix::zeros(n_selected, d_x + k2);
    for i in 0..n_selected {
        let row = a.row_mut(i);
        row[..d_x].copy_from_slice(xs.row(i));
        row[d_x..].copy_from_slice(r.row(i));
    }
    let sol = solve_ls(&a, ys)?;
    if let Some(&col) = sol.dropped_columns.iter().find(|&&c| c < d_x) {
        return Err(Error::CollinearWithLambda { column: col });
    }

    // Residualize each covariate on the basis; a vanishing residual means
    // the covariate is a deterministic function of the fitted probability,
    // the identification failure the estimator must refuse.
    let mut xtilde = Matrix::zeros(n_selected, d_x);
    for j in 0..d_x {
        let col = xs.col(j);
        let proj = solve_ls(r, &col)?;
        let fitted = r.mul_vec(&proj.coefficients);
        let mut norm2 = 0.0;
        let mut resid2 = 0.0;
        for i in 0..n_selected {
            let e = col[i] - fitted[i];
            xtilde.set(i, j, e);
            norm2 += col[i] * col[i];
            resid2 += e * e;
        }
        if resid2.sqrt() <= IDENTIFICATION_TOL * norm2.sqrt() {
            return Err(Error::CollinearWithLambda { column: j });
        }
    }

    let fitted = a.mul_vec(&sol.coefficients);
    let residuals: Vec<f64> = ys.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let dropped_lambda: Vec<usize> = sol
        .dropped_columns
        .iter()
        .map(|&c| c - d_x)
        .collect();

    Ok(SlsFit {
        beta: sol.coefficients[..d_x].to_vec(),
        lambda_coef: sol.coefficients[d_x..].to_vec(),
        residuals,
        xtilde,
        knots,
        dropped_lambda,
        n_selected,
        k2,
    })
}

impl SlsFit {
    fn xtilde_gram_inverse(&self) -> Result<Matrix> {
        Ok(cholesky(&self.xtilde.gram())?.inverse())
    }
}

/// Classical covariance sigma^2 (X~'X~)^{-1} with
/// sigma^2 = sum(e^2) / (n_selected - d_X - K2).
pub fn covariance_classical(fit: &SlsFit) -> Result<Matrix> {
    let dof = fit
        .n_selected
        .saturating_sub(fit.beta.len() + fit.k2)
        .max(1);
    let sigma2 = fit.residuals.iter().map(|e| e * e).sum::<f64>() / dof as f64;
    let inv = fit.xtilde_gram_inverse()?;
    let k = fit.beta.len();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            out.set(i, j, sigma2 * inv.get(i, j));
        }
    }
    Ok(out)
}

/// Heteroskedasticity-robust sandwich covariance
/// (X~'X~)^{-1} (sum e_i^2 x~_i x~_i') (X~'X~)^{-1}, the plug-in form of the
/// asymptotic variance; HC0, no small-sample correction.
pub fn covariance_robust(fit: &SlsFit) -> Result<Matrix> {
    let inv = fit.xtilde_gram_inverse()?;
    let k = fit.beta.len();
    let mut meat = Matrix::zeros(k, k);
    for i in 0..fit.n_selected {
        let e2 = fit.residuals[i] * fit.residuals[i];
        let row = fit.xtilde.row(i);
        for a in 0..k {
            for b in 0..k {
                let v = meat.get(a, b) + e2 * row[a] * row[b];
                meat.set(a, b, v);
            }
        }
    }
    Ok(inv.mul(&meat).mul(&inv))
}

/// Presentation-layer summary of a two-step estimation run.
#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se_classical: Vec<f64>,
    pub se_robust: Vec<f64>,
    pub n: usize,
    pub n_selected: usize,
    /// First-stage nonlinearity diagnostic; absent when the first stage is
    /// degenerate (everyone selected).
    pub lr: Option<LrTest>,
}

impl EstimateReport {
    pub fn from_fit(
        names: Vec<String>,
        fit: &SlsFit,
        n: usize,
        lr: Option<LrTest>,
    ) -> Result<Self> {
        let cov_c = covariance_classical(fit)?;
        let cov_r = covariance_robust(fit)?;
        let k = fit.beta.len();
        Ok(EstimateReport {
            names,
            beta: fit.beta.clone(),
            se_classical: (0..k).map(|j| cov_c.get(j, j).max(0.0).sqrt()).collect(),
            se_robust: (0..k).map(|j| cov_r.get(j, j).max(0.0).sqrt()).collect(),
            n,
            n_selected: fit.n_selected,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::KnotPlacement;
    use crate::numerics::RngStream;
    use crate::testutil::normal_equations_oracle;

    /// Selected-only toy data: everyone selected, probabilities spread.
    fn toy_data(
        n: usize,
        seed: u64,
        noise: f64,
        lambda: impl Fn(f64) -> f64,
    ) -> (Vec<f64>, Matrix, Vec<u8>, Vec<f64>) {
        let mut rng = RngStream::from_seed(seed);
        let mut y = Vec::new();
        let mut rows = Vec::new();
        let mut p = Vec::new();
        for _ in 0..n {
            let x1 = rng.standard_normal();
            let x2 = rng.standard_normal();
            let pi = 0.05 + 0.9 * rng.uniform();
            y.push(1.5 * x1 - 0.5 * x2 + lambda(pi) + noise * rng.standard_normal());
            rows.push(vec![x1, x2]);
            p.push(pi);
        }
        (y, Matrix::from_rows(&rows).unwrap(), vec![1; n], p)
    }

    #[test]
    fn noiseless_linear_outcome_recovered_exactly() {
        let (y, x, d, p) = toy_data(200, 1, 0.0, |_| 0.0);
        let fit = sls_estimate(&y, &x, &d, &p, &BasisSpec::cubic(5)).unwrap();
        assert!((fit.beta[0] - 1.5).abs() < 1e-10);
        assert!((fit.beta[1] + 0.5).abs() < 1e-10);
        for e in &fit.residuals {
            assert!(e.abs() < 1e-9);
        }
        let cc = covariance_classical(&fit).unwrap();
        let cr = covariance_robust(&fit).unwrap();
        assert!(cc.max_abs() < 1e-16);
        assert!(cr.max_abs() < 1e-16);
    }

    #[test]
    fn tiny_instance_matches_augmented_normal_equations_oracle() {
        // n = 12, one covariate, K2 = 3 (quadratic basis, no interior knot).
        let mut rng = RngStream::from_seed(2);
        let n = 12;
        let mut y = Vec::new();
        let mut rows = Vec::new();
        let mut p = Vec::new();
        for i in 0..n {
            let x1 = rng.standard_normal();
            let pi = (i as f64 + 0.5) / n as f64;
            y.push(0.8 * x1 + pi * pi + 0.1 * rng.standard_normal());
            rows.push(vec![x1]);
            p.push(pi);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let spec = BasisSpec {
            degree: 2,
            n_interior_knots: 0,
            ..BasisSpec::cubic(0)
        };
        let fit = sls_estimate(&y, &x, &vec![1; n], &p, &spec).unwrap();
        assert_eq!(fit.k2, 3);

        let knots = place_knots(&p, &spec).unwrap();
        let r = design_matrix(&p, &knots);
        let mut a = Matrix::zeros(n, 1 + 3);
        for i in 0..n {
            a.set(i, 0, x.get(i, 0));
            for j in 0..3 {
                a.set(i, 1 + j, r.get(i, j));
            }
        }
        let oracle = normal_equations_oracle(&a, &y);
        assert!((fit.beta[0] - oracle[0]).abs() < 1e-9);
        for j in 0..3 {
            assert!((fit.lambda_coef[j] - oracle[1 + j]).abs() < 1e-9);
        }
    }

    #[test]
    fn outcome_shift_moves_lambda_not_beta() {
        let (y, x, d, p) = toy_data(300, 3, 0.3, |p| (2.0 * p).sin());
        let spec = BasisSpec::cubic(5);
        let knots = place_knots(&p, &spec).unwrap();
        let fit = sls_with_knots(&y, &x, &d, &p, &knots).unwrap();
        let y_shift: Vec<f64> = y.iter().map(|v| v + 7.0).collect();
        let fit2 = sls_with_knots(&y_shift, &x, &d, &p, &knots).unwrap();
        for (a, b) in fit.beta.iter().zip(&fit2.beta) {
            assert!((a - b).abs() < 1e-10);
        }
        let lambda_moved = fit
            .lambda_coef
            .iter()
            .zip(&fit2.lambda_coef)
            .any(|(a, b)| (a - b).abs() > 1.0);
        assert!(lambda_moved);
    }

    #[test]
    fn covariate_equal_to_probability_is_rejected() {
        // X = p_hat exactly: a deterministic (linear) function of the
        // probability, inside the spline span.
        let mut rng = RngStream::from_seed(4);
        let n = 120;
        let p: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
        let x = Matrix::from_row_major(n, 1, p.clone()).unwrap();
        let y: Vec<f64> = p.iter().map(|v| v + 0.01).collect();
        let err = sls_estimate(&y, &x, &vec![1; n], &p, &BasisSpec::cubic(3)).unwrap_err();
        assert!(matches!(err, Error::CollinearWithLambda { .. }), "{err}");
    }

    #[test]
    fn too_few_selected() {
        let (y, x, mut d, p) = toy_data(40, 5, 0.1, |_| 0.0);
        for v in d.iter_mut().skip(8) {
            *v = 0;
        }
        assert!(matches!(
            sls_estimate(&y, &x, &d, &p, &BasisSpec::cubic(5)),
            Err(Error::TooFewSelected { .. })
        ));
    }

    #[test]
    fn duplicating_rows_halves_covariances() {
        let (y, x, d, p) = toy_data(150, 6, 0.5, |p| p);
        let spec = BasisSpec::cubic(4);
        let knots = place_knots(&p, &spec).unwrap();
        let fit1 = sls_with_knots(&y, &x, &d, &p, &knots).unwrap();

        let n = y.len();
        let mut y2 = y.clone();
        y2.extend_from_slice(&y);
        let mut rows2 = Vec::new();
        for i in 0..n {
            rows2.push(x.row(i).to_vec());
        }
        for i in 0..n {
            rows2.push(x.row(i).to_vec());
        }
        let x2 = Matrix::from_rows(&rows2).unwrap();
        let mut p2 = p.clone();
        p2.extend_from_slice(&p);
        let fit2 = sls_with_knots(&y2, &x2, &vec![1; 2 * n], &p2, &knots).unwrap();

        // Robust (no dof correction): exactly halves.
        let r1 = covariance_robust(&fit1).unwrap();
        let r2 = covariance_robust(&fit2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = r1.get(i, j) / 2.0;
                assert!((r2.get(i, j) - want).abs() <= 1e-10 * r1.max_abs());
            }
        }
        // Classical: halves after adjusting the dof ratio.
        let k = fit1.beta.len() + fit1.k2;
        let dof1 = (n - k) as f64;
        let dof2 = (2 * n - k) as f64;
        let c1 = covariance_classical(&fit1).unwrap();
        let c2 = covariance_classical(&fit2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = c1.get(i, j) / 2.0 * (2.0 * dof1 / dof2);
                assert!((c2.get(i, j) - want).abs() <= 1e-10 * c1.max_abs());
            }
        }
    }

    #[test]
    fn projection_idempotence_and_reproduction() {
        let mut rng = RngStream::from_seed(7);
        for trial in 0..6usize {
            let n = 60 + trial * 80;
            let k2 = 4 + trial;
            let p: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let spec = BasisSpec::cubic(k2.saturating_sub(4));
            let knots = place_knots(&p, &spec).unwrap();
            let r = design_matrix(&p, &knots);
            let ginv = cholesky(&r.gram()).unwrap().inverse();
            // Q = R G^{-1} R'
            let rg = r.mul(&ginv);
            let mut q = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..r.cols() {
                        acc += rg.get(i, l) * r.get(j, l);
                    }
                    q.set(i, j, acc);
                }
            }
            let qq = q.mul(&q);
            let mut max_diff = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    max_diff = max_diff.max((qq.get(i, j) - q.get(i, j)).abs());
                }
            }
            assert!(max_diff <= 1e-8, "||QQ - Q|| = {max_diff}");
            let qr = q.mul(&r);
            let mut max_qr = 0.0f64;
            for i in 0..n {
                for j in 0..r.cols() {
                    max_qr = max_qr.max((qr.get(i, j) - r.get(i, j)).abs());
                }
            }
            assert!(max_qr <= 1e-8, "||QR - R|| = {max_qr}");
        }
    }

    #[test]
    fn frisch_waugh_two_route_equivalence() {
        let (y, x, d, p) = toy_data(400, 8, 0.4, |p| 0.5 * (6.0 * p).cos());
        let spec = BasisSpec::cubic(5);
        let fit = sls_estimate(&y, &x, &d, &p, &spec).unwrap();

        // Closed-form route: residualize y and X on the basis, then OLS.
        let knots = fit.knots.clone();
        let r = design_matrix(&p, &knots);
        let ysol = solve_ls(&r, &y).unwrap();
        let yfit = r.mul_vec(&ysol.coefficients);
        let ytilde: Vec<f64> = y.iter().zip(&yfit).map(|(a, b)| a - b).collect();
        let beta_fw = solve_ls(&fit.xtilde, &ytilde).unwrap().coefficients;
        for (a, b) in fit.beta.iter().zip(&beta_fw) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn beta_invariant_to_lambda_basis_transform() {
        let (y, x, _, p) = toy_data(300, 9, 0.4, |p| p * p);
        let spec = BasisSpec::cubic(4).with_placement(KnotPlacement::Uniform);
        let knots = place_knots(&p, &spec).unwrap();
        let r = design_matrix(&p, &knots);
        let fit1 = sls_with_basis(&y, &x, &r, knots.clone()).unwrap();

        // Random-ish invertible upper-triangular T.
        let k = r.cols();
        let mut t = Matrix::identity(k);
        let mut rng = RngStream::from_seed(10);
        for i in 0..k {
            for j in i..k {
                let v = if i == j {
                    1.0 + rng.uniform()
                } else {
                    rng.standard_normal() * 0.5
                };
                t.set(i, j, v);
            }
        }
        let rt = r.mul(&t);
        let fit2 = sls_with_basis(&y, &x, &rt, knots).unwrap();
        for (a, b) in fit1.beta.iter().zip(&fit2.beta) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn report_exposes_positive_standard_errors() {
        let (y, x, d, p) = toy_data(500, 11, 0.6, |p| p);
        let fit = sls_estimate(&y, &x, &d, &p, &BasisSpec::cubic(5)).unwrap();
        let report = EstimateReport::from_fit(
            vec!["x1".into(), "x2".into()],
            &fit,
            y.len(),
            None,
        )
        .unwrap();
        for se in report.se_classical.iter().chain(&report.se_robust) {
            assert!(*se > 0.0);
        }
        assert_eq!(report.n_selected, 500);
    }
}
