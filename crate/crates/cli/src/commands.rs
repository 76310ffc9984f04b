//! The five commands behind the dispatch layer, as library functions so the
//! binary stays thin and tests can call them directly.

use crate::dataset::{load_columns, load_csv, TabularDataset};
use crate::error::{AppError, AppResult};
use crate::output::{fmt_g, render_csv, render_table, OutputFormat};
use crate::request::EstimationRequest;
use selsieve_core::baselines::lee_bounds;
use selsieve_core::basis::BasisSpec;
use selsieve_core::dgp::{draw_sample, DgpSpec, SimDataset};
use selsieve_core::first_stage::{
    expand_with, fit_sieve_binary, lr_nonlinearity_test, ExpandOptions, FirstStageFit,
};
use selsieve_core::montecarlo::{self, McConfig, McRun, RepOutcome};
use selsieve_core::numerics::{cholesky, solve_ls};
use selsieve_core::second_stage::{sls_estimate, EstimateReport};
use selsieve_core::{Matrix, RngStream};
use serde::Serialize;
use std::path::Path;

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FirstStageInfo {
    pub k: usize,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct LrInfo {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject_linearity: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateOutput {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se_classical: Vec<f64>,
    pub se_robust: Vec<f64>,
    pub n: usize,
    pub n_selected: usize,
    pub first_stage: Option<FirstStageInfo>,
    pub lr: Option<LrInfo>,
    pub identification_warning: Option<String>,
    pub note: Option<String>,
}

fn linear_probit_design(x: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), 1 + x.cols());
    for i in 0..x.rows() {
        let row = z.row_mut(i);
        row[0] = 1.0;
        row[1..].copy_from_slice(x.row(i));
    }
    z
}

fn fit_first_stage(
    data: &TabularDataset,
    req: &EstimationRequest,
) -> AppResult<(FirstStageFit, usize)> {
    let spec =
        BasisSpec::cubic(req.knots_first - 2).with_placement(req.placement);
    let options = ExpandOptions {
        interact_dummies: req.interact_dummies,
        ..ExpandOptions::default()
    };
    let (expanded, expansion) = expand_with(
        &data.covariates,
        &req.continuous_indices(),
        &spec,
        options,
    )?;
    let fit = fit_sieve_binary(&data.selection, &expanded)?;
    Ok((fit, expansion.k_fs))
}

fn ols_with_sandwich(
    y: &[f64],
    design: &Matrix,
) -> AppResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let sol = solve_ls(design, y)?;
    let fitted = design.mul_vec(&sol.coefficients);
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let k = design.cols();
    let dof = design.rows().saturating_sub(k).max(1);
    let sigma2 = resid.iter().map(|e| e * e).sum::<f64>() / dof as f64;
    let inv = cholesky(&design.gram())?.inverse();
    let mut meat = Matrix::zeros(k, k);
    for i in 0..design.rows() {
        let e2 = resid[i] * resid[i];
        let row = design.row(i);
        for a in 0..k {
            for b in 0..k {
                let v = meat.get(a, b) + e2 * row[a] * row[b];
                meat.set(a, b, v);
            }
        }
    }
    let robust = inv.mul(&meat).mul(&inv);
    let se_c = (0..k).map(|j| (sigma2 * inv.get(j, j)).sqrt()).collect();
    let se_r = (0..k).map(|j| robust.get(j, j).max(0.0).sqrt()).collect();
    Ok((sol.coefficients, se_c, se_r))
}

/// The two-step workflow: sieve probit on the full sample, nonlinearity
/// diagnostic against the linear index, then partial-linear sieve least
/// squares on the selected subsample. A sample with everyone selected falls
/// back to plain OLS with the diagnostic marked unavailable.
pub fn run_estimate(req: &EstimationRequest) -> AppResult<EstimateOutput> {
    req.validate()?;
    let data = load_csv(&req.data, req)?;
    if data.n == 0 {
        return Err(AppError::data("the dataset has no rows"));
    }
    let y = data.outcome_vec();
    let n_selected = data.selection.iter().map(|&v| v as usize).sum::<usize>();
    if n_selected == 0 {
        return Err(AppError::Numeric("no selected observations".into()));
    }

    if n_selected == data.n {
        // Degenerate first stage: proceed as OLS.
        let design = linear_probit_design(&data.covariates);
        let (coef, se_c, se_r) = ols_with_sandwich(&y, &design)?;
        let mut names = vec!["(intercept)".to_string()];
        names.extend(data.covariate_names.iter().cloned());
        return Ok(EstimateOutput {
            names,
            beta: coef,
            se_classical: se_c,
            se_robust: se_r,
            n: data.n,
            n_selected,
            first_stage: None,
            lr: None,
            identification_warning: None,
            note: Some(
                "every row is selected; fit is ordinary least squares and the \
                 selection diagnostic is unavailable"
                    .to_string(),
            ),
        });
    }

    let (first, k_fs) = fit_first_stage(&data, req)?;
    let linear = fit_sieve_binary(&data.selection, &linear_probit_design(&data.covariates))?;
    let lr = lr_nonlinearity_test(
        first.loglik,
        k_fs,
        linear.loglik,
        1 + data.covariates.cols(),
    )?;

    let second_spec =
        BasisSpec::cubic(req.knots_second - 2).with_placement(req.placement);
    let fit = sls_estimate(&y, &data.covariates, &data.selection, &first.p_hat, &second_spec)
        .map_err(|e| match e {
            selsieve_core::Error::CollinearWithLambda { column } => AppError::Numeric(format!(
                "identification failure: covariate '{}' is collinear with the \
                 selection-probability basis. The selection probability looks like a \
                 deterministic function of that covariate (e.g. a strictly monotone \
                 index of a single regressor), which the model cannot separate from \
                 the selection-bias term",
                data.covariate_names
                    .get(column)
                    .cloned()
                    .unwrap_or_else(|| format!("#{column}"))
            )),
            other => AppError::from(other),
        })?;
    let report = EstimateReport::from_fit(data.covariate_names.clone(), &fit, data.n, Some(lr))?;

    let reject = lr.p_value <= req.alpha;
    let identification_warning = (!reject).then(|| {
        format!(
            "linearity of the selection process is not rejected (LR p = {:.4}); \
             without nonlinearity the coefficients are not identified",
            lr.p_value
        )
    });
    let note = (!first.usable()).then(|| {
        format!(
            "first stage did not converge after {} iterations; estimates use the \
             last iterate",
            first.iterations
        )
    });

    Ok(EstimateOutput {
        names: report.names,
        beta: report.beta,
        se_classical: report.se_classical,
        se_robust: report.se_robust,
        n: report.n,
        n_selected: report.n_selected,
        first_stage: Some(FirstStageInfo {
            k: k_fs,
            loglik: first.loglik,
            iterations: first.iterations,
            converged: first.converged,
            separation: first.separation,
        }),
        lr: Some(LrInfo {
            statistic: lr.statistic,
            df: lr.df,
            p_value: lr.p_value,
            alpha: req.alpha,
            reject_linearity: reject,
        }),
        identification_warning,
        note,
    })
}

pub fn format_estimate(out: &EstimateOutput, format: OutputFormat, robust: bool) -> String {
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(out).unwrap() + "\n",
        OutputFormat::Csv => {
            let mut rows = vec![vec![
                "coefficient".to_string(),
                "estimate".to_string(),
                "se_classical".to_string(),
                "se_robust".to_string(),
            ]];
            for i in 0..out.names.len() {
                rows.push(vec![
                    out.names[i].clone(),
                    format!("{}", out.beta[i]),
                    format!("{}", out.se_classical[i]),
                    format!("{}", out.se_robust[i]),
                ]);
            }
            render_csv(&rows)
        }
        OutputFormat::Table => {
            let se_label = if robust { "se (robust)" } else { "se" };
            let mut rows = vec![vec![
                "coefficient".to_string(),
                "estimate".to_string(),
                se_label.to_string(),
            ]];
            for i in 0..out.names.len() {
                let se = if robust {
                    out.se_robust[i]
                } else {
                    out.se_classical[i]
                };
                rows.push(vec![
                    out.names[i].clone(),
                    fmt_g(out.beta[i]),
                    format!("({})", fmt_g(se)),
                ]);
            }
            let mut text = render_table(&rows);
            text.push_str(&format!(
                "n = {}, selected = {}\n",
                out.n, out.n_selected
            ));
            if let Some(lr) = &out.lr {
                text.push_str(&format!(
                    "first-stage nonlinearity LR = {:.3} (df {}), p = {:.4} -> {}\n",
                    lr.statistic,
                    lr.df,
                    lr.p_value,
                    if lr.reject_linearity {
                        "reject linearity"
                    } else {
                        "fail to reject linearity"
                    }
                ));
            }
            if let Some(w) = &out.identification_warning {
                text.push_str(&format!("warning: {w}\n"));
            }
            if let Some(nt) = &out.note {
                text.push_str(&format!("note: {nt}\n"));
            }
            text
        }
    }
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseOutput {
    pub loglik_sieve: f64,
    pub k_sieve: usize,
    pub loglik_linear: f64,
    pub k_linear: usize,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject_linearity: bool,
}

/// Fits the sieve and linear-index probits on the same data and reports the
/// likelihood-ratio nonlinearity test.
pub fn run_diagnose(req: &EstimationRequest) -> AppResult<DiagnoseOutput> {
    req.validate()?;
    let data = load_csv(&req.data, req)?;
    let (first, k_fs) = fit_first_stage(&data, req)?;
    let linear = fit_sieve_binary(&data.selection, &linear_probit_design(&data.covariates))?;
    let k_linear = 1 + data.covariates.cols();
    let lr = lr_nonlinearity_test(first.loglik, k_fs, linear.loglik, k_linear)?;
    Ok(DiagnoseOutput {
        loglik_sieve: first.loglik,
        k_sieve: k_fs,
        loglik_linear: linear.loglik,
        k_linear,
        statistic: lr.statistic,
        df: lr.df,
        p_value: lr.p_value,
        alpha: req.alpha,
        reject_linearity: lr.p_value <= req.alpha,
    })
}

pub fn format_diagnose(out: &DiagnoseOutput, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(out).unwrap() + "\n",
        OutputFormat::Csv => render_csv(&[
            vec![
                "loglik_sieve".into(),
                "k_sieve".into(),
                "loglik_linear".into(),
                "k_linear".into(),
                "statistic".into(),
                "df".into(),
                "p_value".into(),
                "reject_linearity".into(),
            ],
            vec![
                format!("{}", out.loglik_sieve),
                format!("{}", out.k_sieve),
                format!("{}", out.loglik_linear),
                format!("{}", out.k_linear),
                format!("{}", out.statistic),
                format!("{}", out.df),
                format!("{}", out.p_value),
                format!("{}", out.reject_linearity),
            ],
        ]),
        OutputFormat::Table => format!(
            "sieve log-likelihood  {:.4} (K = {})\n\
             linear log-likelihood {:.4} (K = {})\n\
             LR statistic          {:.4} (df {})\n\
             p-value               {:.6}\n\
             at alpha = {}: {}\n",
            out.loglik_sieve,
            out.k_sieve,
            out.loglik_linear,
            out.k_linear,
            out.statistic,
            out.df,
            out.p_value,
            out.alpha,
            if out.reject_linearity {
                "reject linearity (nonlinearity supports identification)"
            } else {
                "fail to reject linearity (identification is suspect)"
            }
        ),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Renders a simulated dataset as CSV. Floats use shortest-round-trip
/// formatting, so reading the file back reproduces every bit.
pub fn simulate_csv(spec: &DgpSpec, seed: u64, include_latent: bool) -> AppResult<String> {
    let mut rng = RngStream::from_seed(seed);
    let data: SimDataset = draw_sample(spec, &mut rng)?;
    let k = data.x.cols();
    let mut text = String::new();
    for j in 0..k {
        text.push_str(&format!("x{},", j + 1));
    }
    text.push_str("d,y");
    if include_latent {
        text.push_str(",p0,y_star");
    }
    text.push('\n');
    for i in 0..spec.n {
        for j in 0..k {
            text.push_str(&format!("{},", data.x.get(i, j)));
        }
        text.push_str(&format!("{},{}", data.d[i], data.y[i]));
        if include_latent {
            text.push_str(&format!(",{},{}", data.p0[i], data.y_star[i]));
        }
        text.push('\n');
    }
    Ok(text)
}

// ---------------------------------------------------------------------------
// mc
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct McFiles {
    pub summary_csv: String,
    pub boxplot_csv: String,
    pub table: String,
}

/// Runs the Monte Carlo and renders the Tables-style summary plus the
/// boxplot-statistics CSV (median, quartiles, whiskers, outlier values).
pub fn run_mc_files(config: &McConfig) -> AppResult<McFiles> {
    let run: McRun = montecarlo::run_mc(config)?;
    Ok(render_mc(&run))
}

pub fn render_mc(run: &McRun) -> McFiles {
    let mut summary = vec![vec![
        "estimator".to_string(),
        "parameter".to_string(),
        "rmse".to_string(),
        "bias".to_string(),
        "n_used".to_string(),
        "n_failed".to_string(),
        "contains_zero".to_string(),
        "contains_truth".to_string(),
    ]];
    for s in &run.summary.estimators {
        for p in &s.params {
            summary.push(vec![
                s.estimator.to_string(),
                p.name.clone(),
                format!("{}", p.rmse),
                format!("{}", p.bias),
                format!("{}", s.n_used),
                format!("{}", s.n_failed_reps),
                s.contains_zero.map(|v| format!("{v}")).unwrap_or_default(),
                s.contains_truth.map(|v| format!("{v}")).unwrap_or_default(),
            ]);
        }
    }

    let mut boxplot = vec![vec![
        "estimator".to_string(),
        "parameter".to_string(),
        "median".to_string(),
        "q25".to_string(),
        "q75".to_string(),
        "whisker_lo".to_string(),
        "whisker_hi".to_string(),
        "n_outliers".to_string(),
        "outliers".to_string(),
    ]];
    for (e_idx, s) in run.summary.estimators.iter().enumerate() {
        for (p_idx, p) in s.params.iter().enumerate() {
            // Collect the raw values again to list the outliers themselves.
            let values: Vec<f64> = run
                .records
                .iter()
                .filter_map(|rec| match &rec[e_idx] {
                    RepOutcome::Point(v) => Some(v[p_idx]),
                    RepOutcome::Interval { lower, upper } => {
                        Some(if p_idx == 0 { *lower } else { *upper })
                    }
                    RepOutcome::Failed(_) => None,
                })
                .collect();
            let outliers: Vec<String> = values
                .iter()
                .filter(|v| **v < p.whisker_lo || **v > p.whisker_hi)
                .map(|v| format!("{v}"))
                .collect();
            boxplot.push(vec![
                s.estimator.to_string(),
                p.name.clone(),
                format!("{}", p.median),
                format!("{}", p.q25),
                format!("{}", p.q75),
                format!("{}", p.whisker_lo),
                format!("{}", p.whisker_hi),
                format!("{}", p.n_outliers),
                outliers.join(";"),
            ]);
        }
    }

    // Text table shaped like the published summaries: one block of rmse and
    // bias rows per parameter, estimators as columns. Cells align by
    // parameter name, since the bounds estimator reports lower/upper rows
    // while point estimators report beta rows.
    let mut table_rows = Vec::new();
    let mut header = vec!["metric".to_string(), "parameter".to_string()];
    for s in &run.summary.estimators {
        header.push(s.estimator.to_string());
    }
    table_rows.push(header);
    let mut param_names: Vec<String> = Vec::new();
    for s in &run.summary.estimators {
        for p in &s.params {
            if !param_names.contains(&p.name) {
                param_names.push(p.name.clone());
            }
        }
    }
    for metric in ["rmse", "bias"] {
        for pname in &param_names {
            let mut row = vec![metric.to_string(), pname.clone()];
            for s in &run.summary.estimators {
                match s.params.iter().find(|p| &p.name == pname) {
                    Some(p) => {
                        row.push(fmt_g(if metric == "rmse" { p.rmse } else { p.bias }))
                    }
                    None => row.push(String::new()),
                }
            }
            table_rows.push(row);
        }
    }
    let mut table = render_table(&table_rows);
    for s in &run.summary.estimators {
        if s.n_failed_reps > 0 {
            table.push_str(&format!(
                "{}: {} of {} replications failed and were excluded\n",
                s.estimator,
                s.n_failed_reps,
                s.n_used + s.n_failed_reps
            ));
        }
        if let (Some(z), Some(t)) = (s.contains_zero, s.contains_truth) {
            table.push_str(&format!(
                "{}: interval covers zero in {:.1}% and the true effect in {:.1}% of replications\n",
                s.estimator,
                100.0 * z,
                100.0 * t
            ));
        }
    }

    McFiles {
        summary_csv: render_csv(&summary),
        boxplot_csv: render_csv(&boxplot),
        table,
    }
}

// ---------------------------------------------------------------------------
// lee-bounds
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LeeRow {
    pub group: Option<String>,
    pub n: usize,
    pub lower: f64,
    pub upper: f64,
    pub trim_proportion: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LeeOutput {
    pub rows: Vec<LeeRow>,
}

/// Lee bounds from a CSV file; an optional group column computes bounds per
/// distinct group value.
pub fn run_lee_bounds(
    data: &Path,
    outcome: &str,
    selection: &str,
    treatment: &str,
    group_by: Option<&str>,
) -> AppResult<LeeOutput> {
    let mut names = vec![outcome, selection, treatment];
    if let Some(g) = group_by {
        names.push(g);
    }
    let cols = load_columns(data, &names)?;
    let n = cols[0].len();
    let to_binary = |v: f64, row: usize, what: &str| -> AppResult<u8> {
        if v == 0.0 {
            Ok(0)
        } else if v == 1.0 {
            Ok(1)
        } else {
            Err(AppError::data(format!(
                "row {row}, column '{what}': expected 0 or 1, got {v}"
            )))
        }
    };
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let row = i + 2;
        let si = to_binary(cols[1][i], row, selection)?;
        let yi = cols[0][i];
        if yi.is_nan() && si == 1 {
            return Err(AppError::data(format!(
                "row {row}: outcome '{outcome}' is missing but the row is selected"
            )));
        }
        y.push(if yi.is_nan() { 0.0 } else { yi });
        s.push(si);
        t.push(to_binary(cols[2][i], row, treatment)?);
    }

    let mut rows = Vec::new();
    if let Some(g) = group_by {
        let gcol = &cols[3];
        if gcol.iter().any(|v| v.is_nan()) {
            return Err(AppError::data(format!(
                "group column '{g}' has missing values"
            )));
        }
        let mut levels: Vec<f64> = gcol.to_vec();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for level in levels {
            let idx: Vec<usize> = (0..n).filter(|&i| gcol[i] == level).collect();
            let yy: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let ss: Vec<u8> = idx.iter().map(|&i| s[i]).collect();
            let tt: Vec<u8> = idx.iter().map(|&i| t[i]).collect();
            let b = lee_bounds(&yy, &ss, &tt)?;
            rows.push(LeeRow {
                group: Some(format!("{level}")),
                n: idx.len(),
                lower: b.lower,
                upper: b.upper,
                trim_proportion: b.trim_proportion,
            });
        }
    } else {
        let b = lee_bounds(&y, &s, &t)?;
        rows.push(LeeRow {
            group: None,
            n,
            lower: b.lower,
            upper: b.upper,
            trim_proportion: b.trim_proportion,
        });
    }
    Ok(LeeOutput { rows })
}

pub fn format_lee(out: &LeeOutput, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(out).unwrap() + "\n",
        OutputFormat::Csv => {
            let mut rows = vec![vec![
                "group".to_string(),
                "n".to_string(),
                "lower".to_string(),
                "upper".to_string(),
                "trim_proportion".to_string(),
            ]];
            for r in &out.rows {
                rows.push(vec![
                    r.group.clone().unwrap_or_default(),
                    format!("{}", r.n),
                    format!("{}", r.lower),
                    format!("{}", r.upper),
                    format!("{}", r.trim_proportion),
                ]);
            }
            render_csv(&rows)
        }
        OutputFormat::Table => {
            let mut rows = vec![vec![
                "group".to_string(),
                "n".to_string(),
                "bounds".to_string(),
                "trim".to_string(),
            ]];
            for r in &out.rows {
                rows.push(vec![
                    r.group.clone().unwrap_or_else(|| "(all)".to_string()),
                    format!("{}", r.n),
                    format!("[{}, {}]", fmt_g(r.lower), fmt_g(r.upper)),
                    fmt_g(r.trim_proportion),
                ]);
            }
            render_table(&rows)
        }
    }
}
