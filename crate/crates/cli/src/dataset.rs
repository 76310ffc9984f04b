//! CSV ingestion with the validation the estimators rely on: covariates
//! never missing, outcomes missing only where unselected, selection strictly
//! 0/1. Every rejection names the offending row and column; rows are counted
//! as in the file, the header being line 1.

use crate::error::{AppError, AppResult};
use crate::request::EstimationRequest;
use selsieve_core::Matrix;
use std::path::Path;

/// A validated, typed slice of a CSV file.
#[derive(Clone, Debug)]
pub struct TabularDataset {
    pub n: usize,
    /// Outcome column; `None` marks a missing value (allowed only where
    /// unselected).
    pub outcome: Vec<Option<f64>>,
    pub selection: Vec<u8>,
    pub covariates: Matrix,
    pub covariate_names: Vec<String>,
}

impl TabularDataset {
    /// Outcome as a dense vector with missing entries as 0.0 (they only
    /// occur where selection = 0, and every estimator masks on selection).
    pub fn outcome_vec(&self) -> Vec<f64> {
        self.outcome.iter().map(|v| v.unwrap_or(0.0)).collect()
    }
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field == "NA"
}

fn parse_value(field: &str, row: usize, col: &str) -> AppResult<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        AppError::data(format!("row {row}, column '{col}': cannot parse '{field}'"))
    })
}

/// Loads and validates the columns named by `request`.
pub fn load_csv(path: &Path, request: &EstimationRequest) -> AppResult<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();

    let col_index = |name: &str| -> AppResult<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AppError::data(format!("missing column '{name}'")))
    };

    let outcome_idx = col_index(&request.outcome)?;
    let selection_idx = col_index(&request.selection)?;
    let cov_idx: Vec<usize> = request
        .covariates
        .iter()
        .map(|c| col_index(c))
        .collect::<AppResult<_>>()?;

    let mut outcome = Vec::new();
    let mut selection = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is line 1
        let record = record.map_err(|e| AppError::data(format!("row {row}: {e}")))?;
        let field = |idx: usize| record.get(idx).unwrap_or("");

        let sel_raw = field(selection_idx);
        let sel = match sel_raw {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                let v = parse_value(other, row, &request.selection)?;
                if v == 0.0 {
                    0
                } else if v == 1.0 {
                    1
                } else {
                    return Err(AppError::data(format!(
                        "row {row}, column '{}': selection must be 0 or 1, got '{other}'",
                        request.selection
                    )));
                }
            }
        };

        let out_raw = field(outcome_idx);
        let out = if is_missing(out_raw) {
            if sel == 1 {
                return Err(AppError::data(format!(
                    "row {row}: outcome '{}' is missing but the row is selected",
                    request.outcome
                )));
            }
            None
        } else {
            Some(parse_value(out_raw, row, &request.outcome)?)
        };

        let mut cov = Vec::with_capacity(cov_idx.len());
        for (name, &idx) in request.covariates.iter().zip(&cov_idx) {
            let raw = field(idx);
            if is_missing(raw) {
                return Err(AppError::data(format!(
                    "row {row}, column '{name}': covariates may not be missing"
                )));
            }
            cov.push(parse_value(raw, row, name)?);
        }

        outcome.push(out);
        selection.push(sel);
        cov_rows.push(cov);
    }

    let covariates = Matrix::from_rows(&cov_rows)
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    Ok(TabularDataset {
        n: outcome.len(),
        outcome,
        selection,
        covariates,
        covariate_names: request.covariates.clone(),
    })
}

/// Loads arbitrary numeric columns (used by `lee-bounds`, which has its own
/// column roles). Missing values are rejected outright.
pub fn load_columns(path: &Path, names: &[&str]) -> AppResult<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| AppError::data(format!("missing column '{n}'")))
        })
        .collect::<AppResult<_>>()?;
    let mut out = vec![Vec::new(); names.len()];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| AppError::data(format!("row {row}: {e}")))?;
        for (j, &c) in idx.iter().enumerate() {
            let raw = record.get(c).unwrap_or("");
            if is_missing(raw) {
                // Lee bounds tolerate missing outcomes only on unselected
                // rows; resolve after load. Encode as NaN for the caller.
                out[j].push(f64::NAN);
            } else {
                out[j].push(parse_value(raw, row, names[j])?);
            }
        }
    }
    Ok(out)
}
