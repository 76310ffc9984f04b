//! Comparison estimators: two-part OLS, Heckman two-step and maximum
//! likelihood, the inverse-Mills oracle with the true selection design, and
//! Lee trimming bounds.

use crate::error::{Error, Result};
use crate::first_stage::fit_sieve_binary;
use crate::numerics::{
    cholesky, norm_cdf, norm_logcdf, norm_pdf, solve_ls, tail_inverse_mills, Matrix,
};

/// Inverse Mills ratio phi(v)/Phi(v). The direct ratio degenerates to 0/0 in
/// the far left tail, so v < -8 switches to the Laplace continued fraction.
pub fn inverse_mills(v: f64) -> f64 {
    if v < -8.0 {
        tail_inverse_mills(-v)
    } else {
        norm_pdf(v) / norm_cdf(v)
    }
}

/// Which baseline produced a fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Tpm,
    HeckmanTwoStep,
    HeckmanMle,
    Oracle,
}

/// Method-specific extras.
#[derive(Clone, Debug)]
pub enum BaselineAux {
    None,
    /// Coefficient on the inverse-Mills regressor (two-step and oracle).
    Mills { coefficient: f64, se: f64 },
    /// Error-distribution parameters of the Heckman MLE.
    HeckmanMle {
        rho: f64,
        sigma: f64,
        iterations: usize,
    },
}

/// A fitted baseline: coefficient vector with the intercept first, matching
/// standard errors, and the convergence flag.
#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub aux: BaselineAux,
    pub converged: bool,
}

impl BaselineFit {
    /// Covariate coefficients without the intercept.
    pub fn slopes(&self) -> &[f64] {
        &self.beta[1..]
    }
}

struct OlsFit {
    coef: Vec<f64>,
    se: Vec<f64>,
    residuals: Vec<f64>,
}

/// OLS with classical standard errors; dropped (collinear) columns get a
/// zero coefficient and zero standard error.
fn ols(y: &[f64], x: &Matrix) -> Result<OlsFit> {
    let sol = solve_ls(x, y)?;
    let fitted = x.mul_vec(&sol.coefficients);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let dof = x.rows().saturating_sub(sol.rank).max(1);
    let sigma2 = residuals.iter().map(|e| e * e).sum::<f64>() / dof as f64;

    let retained: Vec<usize> = (0..x.cols())
        .filter(|j| !sol.dropped_columns.contains(j))
        .collect();
    let mut sub = Matrix::zeros(x.rows(), retained.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        for (jj, &j) in retained.iter().enumerate() {
            sub.set(i, jj, row[j]);
        }
    }
    let inv = cholesky(&sub.gram())?.inverse();
    let mut se = vec![0.0; x.cols()];
    for (jj, &j) in retained.iter().enumerate() {
        se[j] = (sigma2 * inv.get(jj, jj)).sqrt();
    }
    Ok(OlsFit {
        coef: sol.coefficients,
        se,
        residuals,
    })
}

fn selected_rows(y: &[f64], x: &Matrix, d: &[u8]) -> (Vec<f64>, Matrix) {
    let idx: Vec<usize> = (0..d.len()).filter(|&i| d[i] == 1).collect();
    let mut xs = Matrix::zeros(idx.len(), x.cols());
    let mut ys = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        xs.row_mut(r).copy_from_slice(x.row(i));
        ys.push(y[i]);
    }
    (ys, xs)
}

fn with_intercept(x: &Matrix, extra: Option<&[f64]>) -> Matrix {
    let add = usize::from(extra.is_some());
    let mut out = Matrix::zeros(x.rows(), 1 + x.cols() + add);
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        row[0] = 1.0;
        row[1..1 + x.cols()].copy_from_slice(x.row(i));
        if let Some(e) = extra {
            row[1 + x.cols()] = e[i];
        }
    }
    out
}

/// Two-part model: OLS of the outcome on (1, X) over the selected subsample,
/// ignoring selection on unobservables.
pub fn tpm_ols(y: &[f64], x: &Matrix, d: &[u8]) -> Result<BaselineFit> {
    let (ys, xs) = selected_rows(y, x, d);
    if ys.len() <= x.cols() + 1 {
        return Err(Error::TooFewSelected {
            selected: ys.len(),
            params: x.cols() + 1,
        });
    }
    let design = with_intercept(&xs, None);
    let fit = ols(&ys, &design)?;
    Ok(BaselineFit {
        method: BaselineMethod::Tpm,
        beta: fit.coef,
        se: fit.se,
        aux: BaselineAux::None,
        converged: true,
    })
}

/// Shared two-step machinery: probit of D on `z`, then OLS of Y on
/// (1, X, inverse_mills(z gamma)) over the selected subsample. `z` must
/// contain its own intercept column. With no unselected observations the
/// correction drops out and the fit reduces to plain OLS.
fn mills_correction_fit(
    y: &[f64],
    x: &Matrix,
    d: &[u8],
    z: &Matrix,
    method: BaselineMethod,
) -> Result<BaselineFit> {
    if d.iter().all(|&v| v == 1) {
        let mut fit = tpm_ols(y, x, d)?;
        fit.method = method;
        fit.aux = BaselineAux::Mills {
            coefficient: 0.0,
            se: 0.0,
        };
        return Ok(fit);
    }
    let probit = fit_sieve_binary(d, z)?;
    let index = z.mul_vec(&probit.gamma);
    let mills: Vec<f64> = index.iter().map(|&v| inverse_mills(v)).collect();

    let idx: Vec<usize> = (0..d.len()).filter(|&i| d[i] == 1).collect();
    if idx.len() <= x.cols() + 2 {
        return Err(Error::TooFewSelected {
            selected: idx.len(),
            params: x.cols() + 2,
        });
    }
    let (ys, xs) = selected_rows(y, x, d);
    let mills_sel: Vec<f64> = idx.iter().map(|&i| mills[i]).collect();
    let design = with_intercept(&xs, Some(&mills_sel));
    let fit = ols(&ys, &design)?;
    let k = 1 + x.cols();
    Ok(BaselineFit {
        method,
        beta: fit.coef[..k].to_vec(),
        se: fit.se[..k].to_vec(),
        aux: BaselineAux::Mills {
            coefficient: fit.coef[k],
            se: fit.se[k],
        },
        // Quasi-separated probits still give finite Mills terms (the tail
        // continued fraction covers any index), so only a genuine
        // optimizer miss counts as non-convergence.
        converged: probit.usable(),
    })
}

/// Heckman two-step with a linear selection index over `z` (intercept
/// included by the caller). Standard errors are the naive OLS ones.
pub fn heckman_two_step(y: &[f64], x: &Matrix, d: &[u8], z: &Matrix) -> Result<BaselineFit> {
    mills_correction_fit(y, x, d, z, BaselineMethod::HeckmanTwoStep)
}

/// Oracle inverse-Mills estimator: the caller supplies the true selection
/// design (polynomial terms of the DGP), so only the index coefficients are
/// estimated.
pub fn oracle_estimate(y: &[f64], x: &Matrix, d: &[u8], zpoly: &Matrix) -> Result<BaselineFit> {
    mills_correction_fit(y, x, d, zpoly, BaselineMethod::Oracle)
}

// ---------------------------------------------------------------------------
// Heckman maximum likelihood
// ---------------------------------------------------------------------------

const MLE_MAX_ITER: usize = 500;
const MLE_GRAD_TOL: f64 = 1e-6;

/// Mean log-likelihood of the bivariate-normal selection model and its
/// analytic gradient. Parameters: outcome coefficients (intercept first),
/// selection coefficients over z, atanh(rho), log(sigma).
struct HeckmanProblem<'a> {
    y: &'a [f64],
    x: &'a Matrix,
    d: &'a [u8],
    z: &'a Matrix,
}

impl HeckmanProblem<'_> {
    fn dims(&self) -> (usize, usize) {
        (1 + self.x.cols(), self.z.cols())
    }

    fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.y.len();
        let (kb, kg) = self.dims();
        let b = &theta[..kb];
        let g = &theta[kb..kb + kg];
        let t = theta[kb + kg];
        let s = theta[kb + kg + 1];
        let rho = t.tanh();
        let sigma = s.exp();
        let r = (1.0 - rho * rho).sqrt();
        if !(sigma.is_finite() && r > 0.0) {
            return (f64::NEG_INFINITY, vec![0.0; theta.len()]);
        }

        let mut ll = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for i in 0..n {
            let zg = crate::numerics::dot(self.z.row(i), g);
            if self.d[i] == 0 {
                ll += norm_logcdf(-zg);
                let m0 = inverse_mills(-zg);
                for (j, zj) in self.z.row(i).iter().enumerate() {
                    grad[kb + j] -= m0 * zj;
                }
            } else {
                let xb = b[0] + crate::numerics::dot(self.x.row(i), &b[1..]);
                let e = (self.y[i] - xb) / sigma;
                let a = (zg + rho * e) / r;
                ll += -s - 0.5 * e * e - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    + norm_logcdf(a);
                let m1 = inverse_mills(a);
                let common = (e - m1 * rho / r) / sigma;
                grad[0] += common;
                for (j, xj) in self.x.row(i).iter().enumerate() {
                    grad[1 + j] += common * xj;
                }
                for (j, zj) in self.z.row(i).iter().enumerate() {
                    grad[kb + j] += m1 * zj / r;
                }
                grad[kb + kg] += m1 * (e + rho * zg) / r;
                grad[kb + kg + 1] += e * e - 1.0 - m1 * rho * e / r;
            }
        }
        let inv_n = 1.0 / n as f64;
        for gi in grad.iter_mut() {
            *gi *= inv_n;
        }
        (ll * inv_n, grad)
    }
}

/// BFGS with Armijo backtracking on the mean log-likelihood. Returns the
/// maximizer, final value, iteration count, and whether the gradient
/// tolerance was met within the iteration cap.
fn bfgs_maximize(
    problem: &HeckmanProblem,
    start: Vec<f64>,
) -> (Vec<f64>, f64, usize, bool) {
    let p = start.len();
    let mut theta = start;
    let (mut f, mut grad) = problem.value_grad(&theta);
    let mut h = Matrix::identity(p);
    let mut iterations = 0;
    let mut converged = grad.iter().all(|g| g.abs() <= MLE_GRAD_TOL);

    while !converged && iterations < MLE_MAX_ITER {
        iterations += 1;
        // Ascent direction H * grad.
        let dir = h.mul_vec(&grad);
        let slope: f64 = crate::numerics::dot(&dir, &grad);
        let dir = if slope <= 0.0 {
            h = Matrix::identity(p);
            grad.clone()
        } else {
            dir
        };
        let slope = crate::numerics::dot(&dir, &grad);

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&dir)
                .map(|(t, d)| t + step * d)
                .collect();
            let (fc, gc) = problem.value_grad(&cand);
            if fc.is_finite() && fc >= f + 1e-4 * step * slope {
                // BFGS update on the negative-objective convention flipped
                // for maximization.
                let s_vec: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
                let y_vec: Vec<f64> = grad.iter().zip(&gc).map(|(a, b)| a - b).collect();
                let sy = crate::numerics::dot(&s_vec, &y_vec);
                if sy > 1e-12 {
                    let hy = h.mul_vec(&y_vec);
                    let yhy = crate::numerics::dot(&y_vec, &hy);
                    let c1 = (sy + yhy) / (sy * sy);
                    for a in 0..p {
                        for bj in 0..p {
                            let v = h.get(a, bj) + c1 * s_vec[a] * s_vec[bj]
                                - (hy[a] * s_vec[bj] + s_vec[a] * hy[bj]) / sy;
                            h.set(a, bj, v);
                        }
                    }
                }
                theta = cand;
                f = fc;
                grad = gc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        converged = grad.iter().all(|g| g.abs() <= MLE_GRAD_TOL);
        if !accepted {
            break;
        }
    }
    (theta, f, iterations, converged)
}

/// Full-information Heckman selection MLE over (beta, gamma, rho, sigma),
/// with rho and sigma unconstrained through atanh and log. Initialized at
/// the two-step estimates; quasi-Newton with gradient tolerance 1e-6 and a
/// 500-iteration cap (the convergence flag reports a miss).
pub fn heckman_mle(y: &[f64], x: &Matrix, d: &[u8], z: &Matrix) -> Result<BaselineFit> {
    if d.iter().all(|&v| v == 1) {
        let mut fit = tpm_ols(y, x, d)?;
        let sigma = {
            let (ys, xs) = selected_rows(y, x, d);
            let design = with_intercept(&xs, None);
            let o = ols(&ys, &design)?;
            (o.residuals.iter().map(|e| e * e).sum::<f64>() / ys.len() as f64).sqrt()
        };
        fit.method = BaselineMethod::HeckmanMle;
        fit.aux = BaselineAux::HeckmanMle {
            rho: 0.0,
            sigma,
            iterations: 0,
        };
        return Ok(fit);
    }

    let two_step = heckman_two_step(y, x, d, z)?;
    let probit = fit_sieve_binary(d, z)?;
    let (ys, xs) = selected_rows(y, x, d);
    let design = with_intercept(&xs, None);
    let resid_fit = ols(&ys, &design)?;
    let sigma0 = (resid_fit.residuals.iter().map(|e| e * e).sum::<f64>() / ys.len() as f64)
        .sqrt()
        .max(1e-3);
    let mills_coef = match two_step.aux {
        BaselineAux::Mills { coefficient, .. } => coefficient,
        _ => 0.0,
    };
    let rho0 = (mills_coef / sigma0).clamp(-0.95, 0.95);

    let mut start = two_step.beta.clone();
    start.extend_from_slice(&probit.gamma);
    start.push(rho0.atanh());
    start.push(sigma0.ln());

    let problem = HeckmanProblem { y, x, d, z };
    let (theta, _f, iterations, converged) = bfgs_maximize(&problem, start);

    let (kb, kg) = problem.dims();
    let rho = theta[kb + kg].tanh();
    let sigma = theta[kb + kg + 1].exp();

    // Standard errors from the numeric Hessian of the total log-likelihood,
    // assembled by central differences of the analytic gradient.
    let p = theta.len();
    let n = y.len() as f64;
    let mut hess = Matrix::zeros(p, p);
    for j in 0..p {
        let hstep = 1e-5 * theta[j].abs().max(1.0);
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[j] += hstep;
        tm[j] -= hstep;
        let (_, gp) = problem.value_grad(&tp);
        let (_, gm) = problem.value_grad(&tm);
        for i in 0..p {
            let v = hess.get(i, j) + n * (gp[i] - gm[i]) / (2.0 * hstep);
            hess.set(i, j, v);
        }
    }
    // Symmetrize and invert the negative Hessian.
    let mut info = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            info.set(i, j, -0.5 * (hess.get(i, j) + hess.get(j, i)));
        }
    }
    let se = match cholesky(&info) {
        Ok(f) => {
            let cov = f.inverse();
            (0..kb).map(|j| cov.get(j, j).max(0.0).sqrt()).collect()
        }
        Err(_) => vec![f64::NAN; kb],
    };

    Ok(BaselineFit {
        method: BaselineMethod::HeckmanMle,
        beta: theta[..kb].to_vec(),
        se,
        aux: BaselineAux::HeckmanMle {
            rho,
            sigma,
            iterations,
        },
        converged,
    })
}

// ---------------------------------------------------------------------------
// Lee bounds
// ---------------------------------------------------------------------------

/// Trimming bounds on a treatment effect under sample selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    /// Fraction trimmed from the higher-selection arm.
    pub trim_proportion: f64,
}

/// Mean of the lowest `mass` observations of an ascending-sorted slice,
/// splitting the marginal observation fractionally so exactly `mass` units
/// of mass are averaged.
fn trimmed_mean_low(sorted: &[f64], mass: f64) -> f64 {
    let whole = mass.floor() as usize;
    let frac = mass - whole as f64;
    let mut total: f64 = sorted[..whole].iter().sum();
    if frac > 0.0 && whole < sorted.len() {
        total += frac * sorted[whole];
    }
    total / mass
}

/// Lee bounds for the difference in means between treatment arms: the
/// higher-selection arm's selected outcomes are trimmed from below (upper
/// bound) or above (lower bound) by the excess selection fraction
/// q = (p1 - p0)/p1, with fractional mass at the cut so the trimmed share is
/// exactly q.
pub fn lee_bounds(y: &[f64], s: &[u8], t: &[u8]) -> Result<Bounds> {
    let n = y.len();
    if s.len() != n || t.len() != n {
        return Err(Error::invalid("lee_bounds inputs must share length"));
    }
    let mut arm1: Vec<f64> = Vec::new();
    let mut arm0: Vec<f64> = Vec::new();
    let (mut n1, mut n0) = (0usize, 0usize);
    for i in 0..n {
        if t[i] == 1 {
            n1 += 1;
            if s[i] == 1 {
                arm1.push(y[i]);
            }
        } else {
            n0 += 1;
            if s[i] == 1 {
                arm0.push(y[i]);
            }
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyArm { arm: 1, what: "units" });
    }
    if n0 == 0 {
        return Err(Error::EmptyArm { arm: 0, what: "units" });
    }
    let p1 = arm1.len() as f64 / n1 as f64;
    let p0 = arm0.len() as f64 / n0 as f64;

    // The arm with the higher selection rate gets trimmed.
    let (mut hi, lo_mean, p_hi, p_lo, hi_is_treated) = if p1 >= p0 {
        if p1 == 0.0 {
            return Err(Error::DegenerateSelection);
        }
        if arm0.is_empty() {
            return Err(Error::EmptyArm { arm: 0, what: "selected outcomes" });
        }
        let m0 = arm0.iter().sum::<f64>() / arm0.len() as f64;
        (arm1, m0, p1, p0, true)
    } else {
        if arm1.is_empty() {
            return Err(Error::EmptyArm { arm: 1, what: "selected outcomes" });
        }
        let m1 = arm1.iter().sum::<f64>() / arm1.len() as f64;
        (arm0, m1, p0, p1, false)
    };

    let q = (p_hi - p_lo) / p_hi;
    hi.sort_by(f64::total_cmp);
    let keep = (1.0 - q) * hi.len() as f64;
    let low_trim = trimmed_mean_low(&hi, keep);
    let rev: Vec<f64> = hi.iter().rev().cloned().collect();
    let high_trim = trimmed_mean_low(&rev, keep);

    let (lower, upper) = if hi_is_treated {
        (low_trim - lo_mean, high_trim - lo_mean)
    } else {
        (lo_mean - high_trim, lo_mean - low_trim)
    };
    Ok(Bounds {
        lower,
        upper,
        trim_proportion: q,
    })
}
