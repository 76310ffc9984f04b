//! Request and run configurations, loaded from TOML files.

use crate::error::{AppError, AppResult};
use selsieve_core::basis::KnotPlacement;
use selsieve_core::dgp::{BuiltinDgp, DgpSpec};
use selsieve_core::montecarlo::{DgpSource, Estimator, McConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_knots_first() -> usize {
    5
}
fn default_knots_second() -> usize {
    7
}
fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    0.05
}

/// Configuration of one estimation (or diagnosis) run on a CSV file.
///
/// Knot counts follow the source convention of counting every knot of the
/// piecewise polynomial, boundaries included: `knots_first = 5` is a cubic
/// spline with 3 interior knots.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationRequest {
    pub data: PathBuf,
    pub outcome: String,
    pub selection: String,
    pub covariates: Vec<String>,
    /// Subset of `covariates` treated as continuous (sieve bases are built
    /// on these); the rest are 0/1 dummies.
    pub continuous: Vec<String>,
    #[serde(default = "default_true")]
    pub interact_dummies: bool,
    #[serde(default = "default_knots_first")]
    pub knots_first: usize,
    #[serde(default = "default_knots_second")]
    pub knots_second: usize,
    #[serde(default)]
    pub placement: KnotPlacement,
    /// Significance level of the nonlinearity diagnostic.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl EstimationRequest {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
        let req: EstimationRequest = toml::from_str(&text)
            .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> AppResult<()> {
        if self.covariates.is_empty() {
            return Err(AppError::data("at least one covariate is required"));
        }
        if self.continuous.is_empty() {
            return Err(AppError::data(
                "at least one continuous covariate is required",
            ));
        }
        for c in &self.continuous {
            if !self.covariates.contains(c) {
                return Err(AppError::data(format!(
                    "continuous column '{c}' is not among the covariates"
                )));
            }
        }
        if self.knots_first < 2 || self.knots_second < 2 {
            return Err(AppError::data(
                "knot counts include the two boundary knots and must be at least 2",
            ));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(AppError::data(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Positions of the continuous covariates within `covariates`.
    pub fn continuous_indices(&self) -> Vec<usize> {
        self.covariates
            .iter()
            .enumerate()
            .filter(|(_, c)| self.continuous.contains(c))
            .map(|(i, _)| i)
            .collect()
    }
}

/// TOML shape of a Monte Carlo run: either `dgp = "dgp1"` or a full
/// `[dgp_spec]` table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfigFile {
    #[serde(default)]
    pub dgp: Option<String>,
    #[serde(default)]
    pub dgp_spec: Option<DgpSpec>,
    pub estimators: Vec<String>,
    #[serde(default = "default_mc_n")]
    pub n: usize,
    #[serde(default = "default_mc_reps")]
    pub reps: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_knots_first")]
    pub knots_first: usize,
    #[serde(default = "default_knots_second")]
    pub knots_second: usize,
    #[serde(default)]
    pub placement: KnotPlacement,
    #[serde(default)]
    pub max_parallel: usize,
}

fn default_mc_n() -> usize {
    5000
}
fn default_mc_reps() -> usize {
    1000
}

impl McConfigFile {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
    }

    pub fn into_config(self) -> AppResult<McConfig> {
        let dgp = match (self.dgp, self.dgp_spec) {
            (Some(name), None) => {
                DgpSource::Builtin(name.parse::<BuiltinDgp>().map_err(AppError::from)?)
            }
            (None, Some(spec)) => DgpSource::Custom(spec),
            (Some(_), Some(_)) => {
                return Err(AppError::data(
                    "specify either 'dgp' or a [dgp_spec] table, not both",
                ))
            }
            (None, None) => {
                return Err(AppError::data(
                    "one of 'dgp' or a [dgp_spec] table is required",
                ))
            }
        };
        let estimators: Vec<Estimator> = self
            .estimators
            .iter()
            .map(|s| s.parse::<Estimator>().map_err(AppError::from))
            .collect::<AppResult<_>>()?;
        let mut config = McConfig::new(dgp, estimators);
        config.n = self.n;
        config.reps = self.reps;
        config.base_seed = self.base_seed;
        config.knots_first = self.knots_first;
        config.knots_second = self.knots_second;
        config.placement = self.placement;
        config.max_parallel = self.max_parallel;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimation_request_parses_and_validates() {
        let text = r#"
            data = "wages.csv"
            outcome = "log_wage"
            selection = "employed"
            covariates = ["age", "exp", "female"]
            continuous = ["age", "exp"]
            knots_first = 5
        "#;
        let req: EstimationRequest = toml::from_str(text).unwrap();
        req.validate().unwrap();
        assert_eq!(req.continuous_indices(), vec![0, 1]);
        assert_eq!(req.knots_second, 7);
        assert!(req.interact_dummies);
    }

    #[test]
    fn estimation_request_rejects_unknown_continuous() {
        let text = r#"
            data = "wages.csv"
            outcome = "y"
            selection = "d"
            covariates = ["a"]
            continuous = ["b"]
        "#;
        let req: EstimationRequest = toml::from_str(text).unwrap();
        assert!(req.validate().is_err());
    }

    #[test]
    fn mc_config_builtin_round_trip() {
        let text = r#"
            dgp = "dgp2"
            estimators = ["tpm", "kimlee", "lee"]
            n = 2000
            reps = 10
            base_seed = 7
        "#;
        let file: McConfigFile = toml::from_str(text).unwrap();
        let config = file.into_config().unwrap();
        assert_eq!(config.reps, 10);
        assert_eq!(config.knots_first, 5);
        assert_eq!(config.estimators.len(), 3);
    }

    #[test]
    fn mc_config_custom_spec() {
        let text = r#"
            estimators = ["kimlee"]
            reps = 5

            [dgp_spec]
            beta = [0.5, 1.0]
            outcome_noise_scale = 1.0
            alpha = [0.2, 0.5, -0.4]
            terms = ["1", "x1", "x1^2"]
            covariates = ["standard-normal"]
            error_corr = 0.5
            n = 100
        "#;
        let file: McConfigFile = toml::from_str(text).unwrap();
        let config = file.into_config().unwrap();
        match &config.dgp {
            DgpSource::Custom(spec) => assert_eq!(spec.terms.len(), 3),
            _ => panic!("expected custom spec"),
        }
    }
}
