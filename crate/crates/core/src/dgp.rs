//! Simulation designs: polynomial selection indices with correlated
//! bivariate-normal errors. Four built-in parameterizations plus generic
//! user-configurable specs.

use crate::error::{Error, Result};
use crate::numerics::{cholesky, norm_cdf, sample_mvn, Matrix, RngStream};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// Marginal distribution of a covariate. Covariates are drawn independently
/// of each other and of the error pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovariateKind {
    StandardNormal,
    Bernoulli(f64),
}

impl CovariateKind {
    pub fn is_continuous(&self) -> bool {
        matches!(self, CovariateKind::StandardNormal)
    }
}

impl fmt::Display for CovariateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateKind::StandardNormal => write!(f, "standard-normal"),
            CovariateKind::Bernoulli(p) => write!(f, "bernoulli({p})"),
        }
    }
}

impl FromStr for CovariateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "standard-normal" {
            return Ok(CovariateKind::StandardNormal);
        }
        if let Some(inner) = s.strip_prefix("bernoulli(").and_then(|r| r.strip_suffix(')')) {
            let p: f64 = inner
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad bernoulli probability '{inner}'")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "bernoulli probability {p} outside [0, 1]"
                )));
            }
            return Ok(CovariateKind::Bernoulli(p));
        }
        Err(Error::invalid(format!(
            "unknown covariate kind '{s}' (expected 'standard-normal' or 'bernoulli(p)')"
        )))
    }
}

impl Serialize for CovariateKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CovariateKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e: Error| D::Error::custom(e.to_string()))
    }
}

/// A selection-index term: a product of covariate powers, e.g. `x1^2*x2`.
/// The constant term is written `1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Term(Vec<(usize, u32)>);

impl Term {
    pub fn constant() -> Self {
        Term(Vec::new())
    }

    /// Single covariate raised to a power; `index` is zero-based.
    pub fn power(index: usize, exponent: u32) -> Self {
        Term(vec![(index, exponent)])
    }

    pub fn product(factors: &[(usize, u32)]) -> Self {
        let mut v: Vec<(usize, u32)> = factors.iter().filter(|(_, e)| *e > 0).cloned().collect();
        v.sort_unstable();
        Term(v)
    }

    pub fn max_index(&self) -> Option<usize> {
        self.0.iter().map(|(i, _)| *i).max()
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        self.0
            .iter()
            .map(|&(i, e)| row[i].powi(e as i32))
            .product()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|&(i, e)| {
                if e == 1 {
                    format!("x{}", i + 1)
                } else {
                    format!("x{}^{e}", i + 1)
                }
            })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

impl FromStr for Term {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Ok(Term::constant());
        }
        let mut factors = Vec::new();
        for part in s.split('*') {
            let part = part.trim();
            let bad = || Error::invalid(format!("bad term factor '{part}' in '{s}'"));
            let rest = part.strip_prefix('x').ok_or_else(bad)?;
            let (idx_str, exp) = match rest.split_once('^') {
                Some((i, e)) => (i, e.parse::<u32>().map_err(|_| bad())?),
                None => (rest, 1),
            };
            let idx: usize = idx_str.parse().map_err(|_| bad())?;
            if idx == 0 {
                return Err(bad());
            }
            factors.push((idx - 1, exp));
        }
        Ok(Term::product(&factors))
    }
}

impl Serialize for Term {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e: Error| D::Error::custom(e.to_string()))
    }
}

/// Full parameterization of a simulation design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    /// Outcome coefficients, intercept first.
    pub beta: Vec<f64>,
    /// Scale multiplying the outcome error V (the designs use 2).
    pub outcome_noise_scale: f64,
    /// Selection-index coefficients, aligned with `terms`.
    pub alpha: Vec<f64>,
    /// Polynomial terms of the selection index.
    pub terms: Vec<Term>,
    /// Marginals of the covariates, drawn independently.
    pub covariates: Vec<CovariateKind>,
    /// Correlation of the error pair (V, U); both margins are standard
    /// normal.
    pub error_corr: f64,
    /// Default sample size.
    pub n: usize,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if self.error_corr.abs() >= 1.0 {
            return Err(Error::invalid(format!(
                "error_corr {} outside (-1, 1)",
                self.error_corr
            )));
        }
        if self.beta.len() != self.covariates.len() + 1 {
            return Err(Error::invalid(format!(
                "beta has {} entries for {} covariates plus intercept",
                self.beta.len(),
                self.covariates.len()
            )));
        }
        if self.alpha.len() != self.terms.len() {
            return Err(Error::invalid(format!(
                "alpha has {} entries for {} terms",
                self.alpha.len(),
                self.terms.len()
            )));
        }
        for term in &self.terms {
            if let Some(max) = term.max_index() {
                if max >= self.covariates.len() {
                    return Err(Error::UnknownTerm {
                        term: term.to_string(),
                        index: max + 1,
                        n_covariates: self.covariates.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Indices of continuous covariates.
    pub fn continuous_cols(&self) -> Vec<usize> {
        (0..self.covariates.len())
            .filter(|&i| self.covariates[i].is_continuous())
            .collect()
    }

    /// Index of the first binary covariate, the treatment arm for bounds.
    pub fn first_binary_col(&self) -> Option<usize> {
        (0..self.covariates.len()).find(|&i| !self.covariates[i].is_continuous())
    }

    /// Slope coefficients (truth without the unidentified intercept).
    pub fn slopes(&self) -> &[f64] {
        &self.beta[1..]
    }
}

/// The four published designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinDgp {
    Dgp0a,
    Dgp0b,
    Dgp1,
    Dgp2,
}

impl fmt::Display for BuiltinDgp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BuiltinDgp::Dgp0a => "dgp0a",
            BuiltinDgp::Dgp0b => "dgp0b",
            BuiltinDgp::Dgp1 => "dgp1",
            BuiltinDgp::Dgp2 => "dgp2",
        };
        write!(f, "{s}")
    }
}

impl FromStr for BuiltinDgp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dgp0a" => Ok(BuiltinDgp::Dgp0a),
            "dgp0b" => Ok(BuiltinDgp::Dgp0b),
            "dgp1" => Ok(BuiltinDgp::Dgp1),
            "dgp2" => Ok(BuiltinDgp::Dgp2),
            other => Err(Error::invalid(format!(
                "unknown builtin DGP '{other}' (expected dgp0a, dgp0b, dgp1, dgp2)"
            ))),
        }
    }
}

/// Published parameterization of a built-in design. The single-covariate
/// designs fix the outcome at (0.5, 0.5); the bias and RMSE of every
/// estimator here are invariant to that choice.
pub fn builtin_spec(name: BuiltinDgp) -> DgpSpec {
    let t = |s: &str| Term::from_str(s).expect("builtin term");
    match name {
        BuiltinDgp::Dgp0a | BuiltinDgp::Dgp0b => DgpSpec {
            beta: vec![0.5, 0.5],
            outcome_noise_scale: 2.0,
            alpha: if name == BuiltinDgp::Dgp0a {
                vec![0.6, 1.50, -0.5, -0.05]
            } else {
                vec![0.4, 1.50, 0.2, 0.05]
            },
            terms: vec![t("1"), t("x1"), t("x1^2"), t("x1^3")],
            covariates: vec![CovariateKind::StandardNormal],
            error_corr: 0.75,
            n: 5000,
        },
        BuiltinDgp::Dgp1 => DgpSpec {
            beta: vec![0.5, 0.5, 0.25],
            outcome_noise_scale: 2.0,
            alpha: vec![1.5, 0.5, -0.5, 0.2, 0.5, 1.0, -0.5],
            terms: vec![
                t("1"),
                t("x1"),
                t("x1^2"),
                t("x1^3"),
                t("x1*x2"),
                t("x2"),
                t("x2^2"),
            ],
            covariates: vec![CovariateKind::StandardNormal, CovariateKind::StandardNormal],
            error_corr: 0.75,
            n: 5000,
        },
        BuiltinDgp::Dgp2 => DgpSpec {
            beta: vec![0.5, 0.5, 0.25],
            outcome_noise_scale: 2.0,
            alpha: vec![0.2, -0.2, -0.5, 0.3, 0.1, 0.5, -0.3, 0.2],
            terms: vec![
                t("1"),
                t("x1"),
                t("x1^2"),
                t("x1^3"),
                t("x1*x2"),
                t("x2"),
                t("x1^2*x2"),
                t("x1^3*x2"),
            ],
            covariates: vec![
                CovariateKind::StandardNormal,
                CovariateKind::Bernoulli(0.5),
            ],
            error_corr: 0.75,
            n: 5000,
        },
    }
}

/// One simulated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub x: Matrix,
    pub d: Vec<u8>,
    /// Observed outcome: `d * y_star`, zero where unselected.
    pub y: Vec<f64>,
    /// Latent outcome, retained for diagnostics only.
    pub y_star: Vec<f64>,
    /// True selection probability Phi(h(X)).
    pub p0: Vec<f64>,
    /// True selection design (the terms evaluated row-wise), consumed by the
    /// oracle estimator.
    pub zpoly: Matrix,
}

/// Evaluates the selection index h(X) row-wise.
pub fn selection_index(spec: &DgpSpec, x: &Matrix) -> Result<Vec<f64>> {
    for term in &spec.terms {
        if let Some(max) = term.max_index() {
            if max >= x.cols() {
                return Err(Error::UnknownTerm {
                    term: term.to_string(),
                    index: max + 1,
                    n_covariates: x.cols(),
                });
            }
        }
    }
    Ok((0..x.rows())
        .map(|i| {
            let row = x.row(i);
            spec.terms
                .iter()
                .zip(&spec.alpha)
                .map(|(t, a)| a * t.eval(row))
                .sum()
        })
        .collect())
}

/// The terms evaluated as a design matrix (columns ordered as declared).
pub fn term_design(spec: &DgpSpec, x: &Matrix) -> Result<Matrix> {
    for term in &spec.terms {
        if let Some(max) = term.max_index() {
            if max >= x.cols() {
                return Err(Error::UnknownTerm {
                    term: term.to_string(),
                    index: max + 1,
                    n_covariates: x.cols(),
                });
            }
        }
    }
    let mut m = Matrix::zeros(x.rows(), spec.terms.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        for (j, t) in spec.terms.iter().enumerate() {
            m.set(i, j, t.eval(row));
        }
    }
    Ok(m)
}

/// Draws a sample: covariates column by column, then the error pair (V, U)
/// with the configured correlation; D = 1[h(X) + U >= 0],
/// Y* = beta_0 + X beta + scale * V, Y = D * Y*.
pub fn draw_sample(spec: &DgpSpec, rng: &mut RngStream) -> Result<SimDataset> {
    spec.validate()?;
    let n = spec.n;
    let k = spec.covariates.len();
    let mut x = Matrix::zeros(n, k);
    for (j, kind) in spec.covariates.iter().enumerate() {
        match kind {
            CovariateKind::StandardNormal => {
                for i in 0..n {
                    x.set(i, j, rng.standard_normal());
                }
            }
            CovariateKind::Bernoulli(p) => {
                for i in 0..n {
                    x.set(i, j, f64::from(rng.bernoulli(*p)));
                }
            }
        }
    }

    let corr = Matrix::from_rows(&[
        vec![1.0, spec.error_corr],
        vec![spec.error_corr, 1.0],
    ])?;
    let factor = cholesky(&corr)?;
    let vu = sample_mvn(&[0.0, 0.0], &factor, n, rng);

    let h = selection_index(spec, &x)?;
    let zpoly = term_design(spec, &x)?;
    let mut d = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y_star = Vec::with_capacity(n);
    let mut p0 = Vec::with_capacity(n);
    for i in 0..n {
        let v = vu.get(i, 0);
        let u = vu.get(i, 1);
        let di = u8::from(h[i] + u >= 0.0);
        let mean: f64 = spec.beta[0]
            + x.row(i)
                .iter()
                .zip(&spec.beta[1..])
                .map(|(xv, b)| xv * b)
                .sum::<f64>();
        let ys = mean + spec.outcome_noise_scale * v;
        d.push(di);
        y_star.push(ys);
        y.push(if di == 1 { ys } else { 0.0 });
        p0.push(norm_cdf(h[i]));
    }

    Ok(SimDataset {
        x,
        d,
        y,
        y_star,
        p0,
        zpoly,
    })
}
