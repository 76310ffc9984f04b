//! Piecewise-polynomial sieve bases: knot placement, B-spline evaluation by
//! the Cox-de Boor recursion, truncated-power alternative, and design-matrix
//! construction.

use crate::error::{Error, Result};
use crate::numerics::{quantile_sorted, Matrix};
use serde::{Deserialize, Serialize};

/// Family of approximating functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFamily {
    #[default]
    Bspline,
    /// Truncated power basis spanning the same space as the B-spline of
    /// equal degree and knots; worse conditioned, kept for cross-checks.
    PowerPolynomial,
}

/// How interior knots are positioned over the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KnotPlacement {
    /// Interior knot j at the j/(m+1) empirical quantile.
    #[default]
    Quantile,
    /// Evenly spaced on [min, max].
    Uniform,
}

/// Configuration of a sieve basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub degree: usize,
    pub n_interior_knots: usize,
    pub placement: KnotPlacement,
}

impl BasisSpec {
    /// Cubic B-spline with quantile knots, the default sieve.
    pub fn cubic(n_interior_knots: usize) -> Self {
        BasisSpec {
            family: BasisFamily::Bspline,
            degree: 3,
            n_interior_knots,
            placement: KnotPlacement::Quantile,
        }
    }

    pub fn with_placement(mut self, placement: KnotPlacement) -> Self {
        self.placement = placement;
        self
    }

    /// Basis dimension: interior knots + degree + 1.
    pub fn dim(&self) -> usize {
        self.n_interior_knots + self.degree + 1
    }
}

/// A concrete knot configuration: boundaries, sorted interior knots, degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    pub boundary_lo: f64,
    pub boundary_hi: f64,
    pub interior: Vec<f64>,
    pub degree: usize,
    pub family: BasisFamily,
}

impl KnotVector {
    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    /// Full knot sequence with (degree+1)-fold boundary knots.
    fn sequence(&self) -> Vec<f64> {
        let d = self.degree + 1;
        let mut t = Vec::with_capacity(2 * d + self.interior.len());
        t.extend(std::iter::repeat(self.boundary_lo).take(d));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat(self.boundary_hi).take(d));
        t
    }
}

/// Places knots over `values` according to `spec`. Boundaries are the sample
/// min/max padded by 1e-9 of the range so boundary points evaluate cleanly.
pub fn place_knots(values: &[f64], spec: &BasisSpec) -> Result<KnotVector> {
    assert!(!values.is_empty(), "place_knots requires nonempty values");
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("place_knots requires finite values"));
    }
    if lo == hi {
        return Err(Error::DegenerateSupport {
            n: values.len(),
            value: lo,
        });
    }
    let m = spec.n_interior_knots;
    let interior = match spec.placement {
        KnotPlacement::Quantile => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            (1..=m)
                .map(|j| quantile_sorted(&sorted, j as f64 / (m + 1) as f64))
                .collect()
        }
        KnotPlacement::Uniform => (1..=m)
            .map(|j| lo + (hi - lo) * j as f64 / (m + 1) as f64)
            .collect(),
    };
    let pad = 1e-9 * (hi - lo);
    Ok(KnotVector {
        boundary_lo: lo - pad,
        boundary_hi: hi + pad,
        interior,
        degree: spec.degree,
        family: spec.family,
    })
}

/// Evaluates the K basis functions at `x`; out-of-range x is clamped to the
/// nearest boundary. B-splines use the Cox-de Boor recursion; at most
/// degree+1 entries are nonzero and they sum to one.
pub fn eval_basis(x: f64, knots: &KnotVector) -> Vec<f64> {
    match knots.family {
        BasisFamily::Bspline => eval_bspline(x, knots),
        BasisFamily::PowerPolynomial => eval_truncated_power(x, knots),
    }
}

fn eval_bspline(x: f64, knots: &KnotVector) -> Vec<f64> {
    let t = knots.sequence();
    let d = knots.degree;
    let k = knots.dim();
    let x = x.clamp(knots.boundary_lo, knots.boundary_hi);

    // Knot span index: largest i with t[i] <= x < t[i+1]; the last span is
    // closed on the right so x = boundary_hi lands in it.
    let last_span = k - 1; // index of the rightmost nonempty span start
    let mut span = last_span;
    for i in d..k {
        if x < t[i + 1] {
            span = i;
            break;
        }
    }

    // Iterative Cox-de Boor: b[j] holds B_{span-deg+j, deg}(x) at each level.
    let mut b = vec![0.0; d + 1];
    b[0] = 1.0;
    for deg in 1..=d {
        let mut saved = 0.0;
        for j in 0..deg {
            let i = span - deg + 1 + j;
            let denom = t[i + deg] - t[i];
            let alpha = if denom > 0.0 {
                (x - t[i]) / denom
            } else {
                0.0
            };
            let term = b[j];
            b[j] = saved + (1.0 - alpha) * term;
            saved = alpha * term;
        }
        b[deg] = saved;
    }
    // b[j] = B_{span-d+j}; reverse of the recursion's natural storage above.
    let mut out = vec![0.0; k];
    for j in 0..=d {
        let idx = span - d + j;
        if idx < k {
            out[idx] = b[j];
        }
    }
    out
}

fn eval_truncated_power(x: f64, knots: &KnotVector) -> Vec<f64> {
    let x = x.clamp(knots.boundary_lo, knots.boundary_hi);
    let d = knots.degree as i32;
    let mut out = Vec::with_capacity(knots.dim());
    for p in 0..=d {
        out.push(x.powi(p));
    }
    for &t in &knots.interior {
        out.push(if x > t { (x - t).powi(d) } else { 0.0 });
    }
    out
}

/// Stacks `eval_basis` rows: an n x K design matrix.
pub fn design_matrix(values: &[f64], knots: &KnotVector) -> Matrix {
    let k = knots.dim();
    let mut m = Matrix::zeros(values.len(), k);
    for (i, &x) in values.iter().enumerate() {
        let row = eval_basis(x, knots);
        m.row_mut(i).copy_from_slice(&row);
    }
    m
}
