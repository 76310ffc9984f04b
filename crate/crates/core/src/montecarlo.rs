//! Replication engine: runs the configured estimators over independent
//! seeded draws and aggregates RMSE/bias tables and boxplot statistics.

use crate::baselines::{self, BaselineFit};
use crate::basis::{BasisSpec, KnotPlacement};
use crate::dgp::{builtin_spec, draw_sample, BuiltinDgp, DgpSpec, SimDataset};
use crate::error::{Error, Result};
use crate::first_stage::{expand, fit_sieve_binary};
use crate::numerics::{quantile_sorted, Matrix, RngStream};
use crate::second_stage::sls_estimate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Estimators the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Two-part model: OLS on the selected subsample.
    Tpm,
    /// Heckman two-step with a linear selection index.
    Hs2step,
    /// Heckman selection MLE with a linear selection index.
    Hsmle,
    /// The two-step sieve estimator.
    Kimlee,
    /// Inverse-Mills correction with the true selection design.
    Oracle,
    /// Lee trimming bounds on the first binary covariate.
    Lee,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Estimator::Tpm => "tpm",
            Estimator::Hs2step => "hs2step",
            Estimator::Hsmle => "hsmle",
            Estimator::Kimlee => "kimlee",
            Estimator::Oracle => "oracle",
            Estimator::Lee => "lee",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tpm" => Ok(Estimator::Tpm),
            "hs2step" => Ok(Estimator::Hs2step),
            "hsmle" => Ok(Estimator::Hsmle),
            "kimlee" => Ok(Estimator::Kimlee),
            "oracle" => Ok(Estimator::Oracle),
            "lee" => Ok(Estimator::Lee),
            other => Err(Error::invalid(format!("unknown estimator '{other}'"))),
        }
    }
}

/// The design to simulate from.
#[derive(Clone, Debug, PartialEq)]
pub enum DgpSource {
    Builtin(BuiltinDgp),
    Custom(DgpSpec),
}

/// Configuration of one Monte Carlo run.
#[derive(Clone, Debug)]
pub struct McConfig {
    pub dgp: DgpSource,
    pub estimators: Vec<Estimator>,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    /// First-stage knot count per continuous covariate, counted like the
    /// source tables: total knots including the two boundary knots, so 5
    /// means 3 interior knots.
    pub knots_first: usize,
    /// Second-stage knot count for the probability basis, same counting.
    pub knots_second: usize,
    pub placement: KnotPlacement,
    /// Worker threads; 0 uses every core. The result is identical either
    /// way.
    pub max_parallel: usize,
}

impl McConfig {
    pub fn new(dgp: DgpSource, estimators: Vec<Estimator>) -> Self {
        McConfig {
            dgp,
            estimators,
            n: 5000,
            reps: 1000,
            base_seed: 0,
            knots_first: 5,
            knots_second: 7,
            placement: KnotPlacement::Quantile,
            max_parallel: 0,
        }
    }

    pub fn resolve_spec(&self) -> DgpSpec {
        let mut spec = match &self.dgp {
            DgpSource::Builtin(name) => builtin_spec(*name),
            DgpSource::Custom(spec) => spec.clone(),
        };
        spec.n = self.n;
        spec
    }

    fn validate(&self, spec: &DgpSpec) -> Result<()> {
        spec.validate()?;
        if self.reps < 1 {
            return Err(Error::invalid("reps must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(Error::invalid("at least one estimator is required"));
        }
        if self.knots_first < 2 || self.knots_second < 2 {
            return Err(Error::invalid(
                "knot counts include the two boundary knots and must be >= 2",
            ));
        }
        if self.estimators.contains(&Estimator::Lee) && spec.first_binary_col().is_none() {
            return Err(Error::invalid(
                "the lee estimator needs a binary covariate as treatment arm",
            ));
        }
        Ok(())
    }
}

/// What one estimator produced on one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RepOutcome {
    /// Slope estimates, aligned with the DGP's non-intercept coefficients.
    Point(Vec<f64>),
    Interval { lower: f64, upper: f64 },
    Failed(String),
}

/// Boxplot and accuracy summary for one parameter of one estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub rmse: f64,
    pub bias: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub n_outliers: usize,
}

/// Per-estimator aggregate over the successful replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub params: Vec<ParamSummary>,
    pub n_used: usize,
    pub n_failed_reps: usize,
    /// Bounds only: share of replications whose interval covers zero.
    pub contains_zero: Option<f64>,
    /// Bounds only: share covering the true treatment coefficient.
    pub contains_truth: Option<f64>,
}

/// Aggregated result of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub truth: Vec<f64>,
    pub estimators: Vec<EstimatorSummary>,
}

/// Full result: the summary plus every per-replication record, indexed
/// [replication][estimator].
#[derive(Clone, Debug)]
pub struct McRun {
    pub summary: McSummary,
    pub records: Vec<Vec<RepOutcome>>,
    pub estimators: Vec<Estimator>,
}

fn boxplot_stats(name: &str, values: &mut [f64], truth: f64) -> ParamSummary {
    let n = values.len() as f64;
    let bias = values.iter().map(|v| v - truth).sum::<f64>() / n;
    let rmse = (values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / n).sqrt();
    values.sort_by(f64::total_cmp);
    let q25 = quantile_sorted(values, 0.25);
    let median = quantile_sorted(values, 0.5);
    let q75 = quantile_sorted(values, 0.75);
    let iqr = q75 - q25;
    let fence_lo = q25 - 1.5 * iqr;
    let fence_hi = q75 + 1.5 * iqr;
    let whisker_lo = values
        .iter()
        .cloned()
        .find(|v| *v >= fence_lo)
        .unwrap_or(q25);
    let whisker_hi = values
        .iter()
        .rev()
        .cloned()
        .find(|v| *v <= fence_hi)
        .unwrap_or(q75);
    let n_outliers = values
        .iter()
        .filter(|v| **v < whisker_lo || **v > whisker_hi)
        .count();
    ParamSummary {
        name: name.to_string(),
        rmse,
        bias,
        median,
        q25,
        q75,
        whisker_lo,
        whisker_hi,
        n_outliers,
    }
}

/// Aggregates one estimator's replication outcomes against the truth.
/// Point estimators produce one row per slope parameter; the bounds
/// estimator produces `lower`/`upper` rows plus coverage shares of zero and
/// of the treatment coefficient at `treatment_param`.
pub fn summarize(
    estimator: Estimator,
    outcomes: &[RepOutcome],
    truth: &[f64],
    treatment_param: Option<usize>,
) -> Result<EstimatorSummary> {
    let n_failed_reps = outcomes
        .iter()
        .filter(|o| matches!(o, RepOutcome::Failed(_)))
        .count();
    let used: Vec<&RepOutcome> = outcomes
        .iter()
        .filter(|o| !matches!(o, RepOutcome::Failed(_)))
        .collect();
    if used.is_empty() {
        return Err(Error::Empty {
            estimator: estimator.to_string(),
        });
    }

    let mut params = Vec::new();
    let mut contains_zero = None;
    let mut contains_truth = None;
    match used[0] {
        RepOutcome::Point(first) => {
            for j in 0..first.len() {
                let mut vals: Vec<f64> = used
                    .iter()
                    .map(|o| match o {
                        RepOutcome::Point(v) => v[j],
                        _ => unreachable!("mixed outcome kinds"),
                    })
                    .collect();
                params.push(boxplot_stats(
                    &format!("beta{}", j + 1),
                    &mut vals,
                    truth[j],
                ));
            }
        }
        RepOutcome::Interval { .. } => {
            let t_idx = treatment_param.unwrap_or(0);
            let t_truth = truth[t_idx];
            let (mut lows, mut highs) = (Vec::new(), Vec::new());
            let (mut zero_in, mut truth_in) = (0usize, 0usize);
            for o in &used {
                let RepOutcome::Interval { lower, upper } = o else {
                    unreachable!("mixed outcome kinds")
                };
                lows.push(*lower);
                highs.push(*upper);
                if *lower <= 0.0 && 0.0 <= *upper {
                    zero_in += 1;
                }
                if *lower <= t_truth && t_truth <= *upper {
                    truth_in += 1;
                }
            }
            params.push(boxplot_stats("lower", &mut lows, t_truth));
            params.push(boxplot_stats("upper", &mut highs, t_truth));
            contains_zero = Some(zero_in as f64 / used.len() as f64);
            contains_truth = Some(truth_in as f64 / used.len() as f64);
        }
        RepOutcome::Failed(_) => unreachable!(),
    }

    Ok(EstimatorSummary {
        estimator,
        params,
        n_used: used.len(),
        n_failed_reps,
        contains_zero,
        contains_truth,
    })
}

fn linear_selection_design(x: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), 1 + x.cols());
    for i in 0..x.rows() {
        let row = z.row_mut(i);
        row[0] = 1.0;
        row[1..].copy_from_slice(x.row(i));
    }
    z
}

fn point_outcome(fit: crate::error::Result<BaselineFit>) -> RepOutcome {
    match fit {
        Ok(f) if f.converged => RepOutcome::Point(f.slopes().to_vec()),
        Ok(_) => RepOutcome::Failed("did not converge".into()),
        Err(e) => RepOutcome::Failed(e.to_string()),
    }
}

fn run_estimator(
    estimator: Estimator,
    data: &SimDataset,
    spec: &DgpSpec,
    first_spec: &BasisSpec,
    second_spec: &BasisSpec,
) -> RepOutcome {
    match estimator {
        Estimator::Tpm => point_outcome(baselines::tpm_ols(&data.y, &data.x, &data.d)),
        Estimator::Hs2step => {
            let z = linear_selection_design(&data.x);
            point_outcome(baselines::heckman_two_step(&data.y, &data.x, &data.d, &z))
        }
        Estimator::Hsmle => {
            let z = linear_selection_design(&data.x);
            point_outcome(baselines::heckman_mle(&data.y, &data.x, &data.d, &z))
        }
        Estimator::Oracle => point_outcome(baselines::oracle_estimate(
            &data.y,
            &data.x,
            &data.d,
            &data.zpoly,
        )),
        Estimator::Kimlee => {
            let continuous = spec.continuous_cols();
            let expanded = match expand(&data.x, &continuous, first_spec) {
                Ok((m, _)) => m,
                Err(e) => return RepOutcome::Failed(e.to_string()),
            };
            let first = match fit_sieve_binary(&data.d, &expanded) {
                Ok(f) => f,
                Err(e) => return RepOutcome::Failed(e.to_string()),
            };
            if !first.usable() {
                return RepOutcome::Failed("first stage did not converge".into());
            }
            match sls_estimate(&data.y, &data.x, &data.d, &first.p_hat, second_spec) {
                Ok(fit) => RepOutcome::Point(fit.beta),
                Err(e) => RepOutcome::Failed(e.to_string()),
            }
        }
        Estimator::Lee => {
            let Some(tcol) = spec.first_binary_col() else {
                return RepOutcome::Failed("no binary covariate for lee bounds".into());
            };
            let t: Vec<u8> = (0..data.x.rows())
                .map(|i| u8::from(data.x.get(i, tcol) != 0.0))
                .collect();
            match baselines::lee_bounds(&data.y, &data.d, &t) {
                Ok(b) => RepOutcome::Interval {
                    lower: b.lower,
                    upper: b.upper,
                },
                Err(e) => RepOutcome::Failed(e.to_string()),
            }
        }
    }
}

/// Runs the configured replications. Replication `r` draws from
/// `RngStream::substream(base_seed, r)`, every estimator sees the same
/// sample, failures are excluded from summaries with their count reported,
/// and the result is identical regardless of `max_parallel`.
pub fn run_mc(config: &McConfig) -> Result<McRun> {
    let spec = config.resolve_spec();
    config.validate(&spec)?;
    let first_spec =
        BasisSpec::cubic(config.knots_first - 2).with_placement(config.placement);
    let second_spec =
        BasisSpec::cubic(config.knots_second - 2).with_placement(config.placement);

    let one_rep = |r: usize| -> Vec<RepOutcome> {
        let mut rng = RngStream::substream(config.base_seed, r as u64);
        match draw_sample(&spec, &mut rng) {
            Ok(data) => config
                .estimators
                .iter()
                .map(|e| run_estimator(*e, &data, &spec, &first_spec, &second_spec))
                .collect(),
            Err(e) => config
                .estimators
                .iter()
                .map(|_| RepOutcome::Failed(e.to_string()))
                .collect(),
        }
    };

    let records: Vec<Vec<RepOutcome>> = if config.max_parallel == 1 {
        (0..config.reps).map(one_rep).collect()
    } else if config.max_parallel == 0 {
        (0..config.reps).into_par_iter().map(one_rep).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.max_parallel)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..config.reps).into_par_iter().map(one_rep).collect())
    };

    let truth = spec.slopes().to_vec();
    let treatment_param = spec.first_binary_col();
    let mut estimators_summary = Vec::new();
    for (idx, est) in config.estimators.iter().enumerate() {
        let outcomes: Vec<RepOutcome> = records.iter().map(|r| r[idx].clone()).collect();
        match summarize(*est, &outcomes, &truth, treatment_param) {
            Ok(s) => estimators_summary.push(s),
            Err(Error::Empty { .. }) => {
                let first = outcomes
                    .iter()
                    .find_map(|o| match o {
                        RepOutcome::Failed(msg) => Some(msg.clone()),
                        _ => None,
                    })
                    .unwrap_or_default();
                return Err(Error::AllRepsFailed {
                    estimator: est.to_string(),
                    reps: config.reps,
                    first,
                });
            }
            Err(e) => return Err(e),
        }
    }

    Ok(McRun {
        summary: McSummary {
            truth,
            estimators: estimators_summary,
        },
        records,
        estimators: config.estimators.clone(),
    })
}
