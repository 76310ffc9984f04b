//! Step one of the two-step procedure: sieve maximum-likelihood estimation
//! of the selection probability with a probit link, plus the likelihood-ratio
//! nonlinearity diagnostic.

use crate::baselines::inverse_mills;
use crate::basis::{design_matrix, place_knots, BasisSpec, KnotVector};
use crate::error::{Error, Result};
use crate::numerics::{norm_cdf, norm_logcdf, solve_ls_scaled, Matrix};
#[cfg(test)]
use crate::numerics::solve_ls;

/// Fitted probabilities are kept inside [EPS, 1-EPS] so the second stage
/// never sees a degenerate basis and inverse-Mills terms stay finite.
pub const P_HAT_CLAMP: f64 = 1e-6;

const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const LL_REL_TOL: f64 = 1e-12;
const SEPARATION_INDEX: f64 = 30.0;

/// Options controlling which columns the sieve expansion contains.
#[derive(Clone, Copy, Debug)]
pub struct ExpandOptions {
    /// Interact each binary covariate with every continuous basis.
    pub interact_dummies: bool,
    /// Include each binary covariate as a raw column.
    pub include_linear_dummies: bool,
    /// Include raw pairwise products of continuous covariates, so the
    /// expansion is not purely additive when the selection index has
    /// cross terms.
    pub cross_continuous: bool,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions {
            interact_dummies: true,
            include_linear_dummies: true,
            cross_continuous: true,
        }
    }
}

/// Layout of an expanded sieve design.
#[derive(Clone, Debug)]
pub struct SieveExpansion {
    /// Per continuous covariate: column index and fitted knots.
    pub continuous_terms: Vec<(usize, KnotVector)>,
    /// Continuous pairs entering as raw products.
    pub cross_pairs: Vec<(usize, usize)>,
    /// Binary covariate column indices.
    pub dummies: Vec<usize>,
    pub interact_dummies: bool,
    pub include_linear_dummies: bool,
    /// Total expanded column count.
    pub k_fs: usize,
}

/// Expands covariates into the first-stage sieve design with default
/// options: dummies enter raw and interacted, continuous pairs as products.
pub fn expand(
    x: &Matrix,
    continuous_cols: &[usize],
    spec: &BasisSpec,
) -> Result<(Matrix, SieveExpansion)> {
    expand_with(x, continuous_cols, spec, ExpandOptions::default())
}

/// Expansion with explicit options. Column layout: intercept, one reduced
/// B-spline basis per continuous covariate (the first basis column is
/// dropped against the intercept, splines sum to one), raw continuous
/// products, raw dummies, then dummy-by-basis interactions.
pub fn expand_with(
    x: &Matrix,
    continuous_cols: &[usize],
    spec: &BasisSpec,
    options: ExpandOptions,
) -> Result<(Matrix, SieveExpansion)> {
    if continuous_cols.is_empty() {
        return Err(Error::invalid(
            "at least one continuous covariate is required",
        ));
    }
    let n = x.rows();
    for &c in continuous_cols {
        if c >= x.cols() {
            return Err(Error::invalid(format!(
                "continuous column {c} out of range ({} covariates)",
                x.cols()
            )));
        }
    }
    let dummies: Vec<usize> = (0..x.cols())
        .filter(|c| !continuous_cols.contains(c))
        .collect();

    // Reduced basis per continuous covariate.
    let mut bases: Vec<(usize, KnotVector, Matrix)> = Vec::new();
    for &c in continuous_cols {
        let col = x.col(c);
        let knots = place_knots(&col, spec)?;
        let full = design_matrix(&col, &knots);
        let mut reduced = Matrix::zeros(n, full.cols() - 1);
        for i in 0..n {
            reduced.row_mut(i).copy_from_slice(&full.row(i)[1..]);
        }
        bases.push((c, knots, reduced));
    }

    let mut cross_pairs = Vec::new();
    if options.cross_continuous {
        for a in 0..continuous_cols.len() {
            for b in a + 1..continuous_cols.len() {
                cross_pairs.push((continuous_cols[a], continuous_cols[b]));
            }
        }
    }

    let per_basis: usize = bases.iter().map(|(_, _, m)| m.cols()).sum();
    let mut k_fs = 1 + per_basis + cross_pairs.len();
    if options.include_linear_dummies {
        k_fs += dummies.len();
    }
    if options.interact_dummies {
        k_fs += dummies.len() * per_basis;
    }

    let mut out = Matrix::zeros(n, k_fs);
    for i in 0..n {
        let mut pos = 0;
        let row = out.row_mut(i);
        row[pos] = 1.0;
        pos += 1;
        for (_, _, reduced) in &bases {
            row[pos..pos + reduced.cols()].copy_from_slice(reduced.row(i));
            pos += reduced.cols();
        }
        for &(a, b) in &cross_pairs {
            row[pos] = x.get(i, a) * x.get(i, b);
            pos += 1;
        }
        for &d in &dummies {
            if options.include_linear_dummies {
                row[pos] = x.get(i, d);
                pos += 1;
            }
            if options.interact_dummies {
                let dval = x.get(i, d);
                for (_, _, reduced) in &bases {
                    for (slot, v) in row[pos..pos + reduced.cols()].iter_mut().zip(reduced.row(i))
                    {
                        *slot = dval * v;
                    }
                    pos += reduced.cols();
                }
            }
        }
        debug_assert_eq!(pos, k_fs);
    }

    let expansion = SieveExpansion {
        continuous_terms: bases.into_iter().map(|(c, kv, _)| (c, kv)).collect(),
        cross_pairs,
        dummies,
        interact_dummies: options.interact_dummies,
        include_linear_dummies: options.include_linear_dummies,
        k_fs,
    };
    Ok((out, expansion))
}

/// Result of the sieve probit fit.
#[derive(Clone, Debug)]
pub struct FirstStageFit {
    pub gamma: Vec<f64>,
    /// Fitted selection probabilities over the full sample, clamped to
    /// [1e-6, 1-1e-6].
    pub p_hat: Vec<f64>,
    pub loglik: f64,
    pub k_fs: usize,
    pub iterations: usize,
    /// True when the numeric criteria were met and no separation occurred.
    pub converged: bool,
    /// Some fitted index exceeded 30 in magnitude: a knot span holds a
    /// single response class and its index has run off. The clamped
    /// probabilities remain usable; `converged` is cleared.
    pub separation: bool,
}

impl FirstStageFit {
    /// Whether the clamped probabilities are fit for the second stage: the
    /// optimizer converged, or only quasi-separation was flagged (saturated
    /// index regions clamp to the same probabilities regardless).
    pub fn usable(&self) -> bool {
        self.converged || self.separation
    }
}

/// Maximizes the probit log-likelihood over the expanded design by
/// Newton-Raphson with step-halving. Convergence: max absolute score
/// component <= 1e-8, or relative log-likelihood change <= 1e-12, within 100
/// iterations. Quasi-separation (any |x'gamma| > 30 at termination) clears
/// the convergence flag.
pub fn fit_sieve_binary(d: &[u8], xexp: &Matrix) -> Result<FirstStageFit> {
    let n = xexp.rows();
    let k = xexp.cols();
    if d.len() != n {
        return Err(Error::invalid("response length does not match design rows"));
    }
    if let Some(bad) = d.iter().find(|v| **v > 1) {
        return Err(Error::invalid(format!(
            "selection indicator must be 0/1, found {bad}"
        )));
    }
    let ones: usize = d.iter().map(|&v| v as usize).sum();
    if ones == 0 || ones == n {
        return Err(Error::OneClassOnly { value: d[0] });
    }
    if n <= k {
        return Err(Error::invalid(format!(
            "need more observations ({n}) than sieve columns ({k})"
        )));
    }

    let loglik_at = |eta: &[f64]| -> f64 {
        eta.iter()
            .zip(d)
            .map(|(&e, &di)| {
                if di == 1 {
                    norm_logcdf(e)
                } else {
                    norm_logcdf(-e)
                }
            })
            .sum()
    };

    let mut gamma = vec![0.0; k];
    let mut eta = vec![0.0; n];
    let mut ll = loglik_at(&eta);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_ITER {
        iterations = iter;
        // Score and curvature weights per observation.
        let mut score = vec![0.0; n];
        let mut weight = vec![0.0; n];
        for i in 0..n {
            let e = eta[i];
            if d[i] == 1 {
                let m = inverse_mills(e);
                score[i] = m;
                weight[i] = (m * (m + e)).max(0.0);
            } else {
                let m = inverse_mills(-e);
                score[i] = -m;
                weight[i] = (m * (m - e)).max(0.0);
            }
        }
        let grad = xexp.tr_mul_vec(&score);
        if grad.iter().all(|g| g.abs() <= GRAD_TOL) {
            converged = true;
            break;
        }

        // H = X' W X, assembled symmetric.
        let mut h = Matrix::zeros(k, k);
        for i in 0..n {
            let w = weight[i];
            if w == 0.0 {
                continue;
            }
            let row = xexp.row(i);
            for a in 0..k {
                let wa = w * row[a];
                if wa == 0.0 {
                    continue;
                }
                for b in a..k {
                    let v = h.get(a, b) + wa * row[b];
                    h.set(a, b, v);
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                let v = h.get(b, a);
                h.set(a, b, v);
            }
        }

        // Directions whose curvature has collapsed (empty or one-class knot
        // spans pushed far into a tail) get a zero step; their index value
        // has saturated and the likelihood is flat there.
        let delta = solve_ls_scaled(&h, &grad, 1e-9)?.coefficients;
        let xdelta = xexp.mul_vec(&delta);

        // Step-halving keeps the log-likelihood nondecreasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let eta_try: Vec<f64> = eta
                .iter()
                .zip(&xdelta)
                .map(|(e, xd)| e + step * xd)
                .collect();
            let ll_try = loglik_at(&eta_try);
            if ll_try >= ll {
                for (g, dl) in gamma.iter_mut().zip(&delta) {
                    *g += step * dl;
                }
                let rel_change = (ll_try - ll).abs() / ll.abs().max(1.0);
                eta = eta_try;
                ll = ll_try;
                accepted = true;
                if rel_change <= LL_REL_TOL {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            if !accepted {
                // No uphill step left; accept if the score is already flat.
                converged = grad.iter().all(|g| g.abs() <= 1e-6);
            }
            break;
        }
    }

    let separation = eta.iter().any(|e| e.abs() > SEPARATION_INDEX);
    if separation {
        converged = false;
    }

    let p_hat = eta
        .iter()
        .map(|&e| norm_cdf(e).clamp(P_HAT_CLAMP, 1.0 - P_HAT_CLAMP))
        .collect();

    Ok(FirstStageFit {
        gamma,
        p_hat,
        loglik: ll,
        k_fs: k,
        iterations,
        converged,
        separation,
    })
}

/// Likelihood-ratio nonlinearity test.
#[derive(Clone, Copy, Debug)]
pub struct LrTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Tests the linear-index null against the sieve alternative:
/// `2 (l_sieve - l_lin)` is asymptotically chi-square with `k_sieve -
/// k_linear` degrees of freedom when the linear columns are nested in the
/// sieve columns (K treated as fixed).
pub fn lr_nonlinearity_test(
    loglik_sieve: f64,
    k_sieve: usize,
    loglik_linear: f64,
    k_linear: usize,
) -> Result<LrTest> {
    if k_sieve <= k_linear {
        return Err(Error::NotNested { k_sieve, k_linear });
    }
    let statistic = (2.0 * (loglik_sieve - loglik_linear)).max(0.0);
    let df = k_sieve - k_linear;
    Ok(LrTest {
        statistic,
        df,
        p_value: crate::numerics::chi2_sf(statistic, df),
    })
}
