use thiserror::Error;

/// Errors produced by the estimation and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Least-squares problem with zero rows or zero columns.
    #[error("least-squares problem is empty ({rows} rows, {cols} cols)")]
    EmptyProblem { rows: usize, cols: usize },

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// Knot placement on a constant sample.
    #[error("cannot place knots: all {n} values equal {value}")]
    DegenerateSupport { n: usize, value: f64 },

    /// Binary response is constant; no MLE exists.
    #[error("selection indicator takes a single value ({value}); cannot fit a binary model")]
    OneClassOnly { value: u8 },

    /// LR test called with a sieve model no larger than the linear one.
    #[error("models are not nested: sieve has {k_sieve} parameters, linear has {k_linear}")]
    NotNested { k_sieve: usize, k_linear: usize },

    /// Too few selected observations for the requested regression.
    #[error("only {selected} selected observations for {params} parameters")]
    TooFewSelected { selected: usize, params: usize },

    /// A regressor is linearly dependent on the selection-probability basis.
    /// This is the identification failure of the model: the selection
    /// probability is (numerically) a deterministic function of that
    /// regressor, so its coefficient cannot be separated from the
    /// selection-bias term.
    #[error(
        "regressor column {column} is collinear with the selection-probability basis; \
         the coefficient is not identified (the selection probability appears to be a \
         deterministic function of this regressor)"
    )]
    CollinearWithLambda { column: usize },

    /// A treatment arm has no usable observations.
    #[error("treatment arm {arm} has no {what}")]
    EmptyArm { arm: u8, what: &'static str },

    /// No selection in either arm; trimming bounds are undefined.
    #[error("selection rate is zero in the higher-selection arm")]
    DegenerateSelection,

    /// A selection-index term references an undeclared covariate.
    #[error("term '{term}' references covariate x{index} but only {n_covariates} are declared")]
    UnknownTerm {
        term: String,
        index: usize,
        n_covariates: usize,
    },

    /// Summary requested over an empty set of records.
    #[error("no records to summarize for estimator '{estimator}'")]
    Empty { estimator: String },

    /// Every Monte Carlo replication failed for an estimator.
    #[error("all {reps} replications failed for estimator '{estimator}'; first failure: {first}")]
    AllRepsFailed {
        estimator: String,
        reps: usize,
        first: String,
    },

    /// Invalid configuration or mismatched input shapes.
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
