use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coupling diverges at {what}")]
    DivergentCoupling { what: String },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// `1 - C A` is numerically singular: the gate post-selects a state
    /// orthogonal to the current one.
    #[error("singular correlation-matrix update (|1 + t c| = {residual:.3e}) at gate ({a}, {b})")]
    SingularUpdate { a: usize, b: usize, residual: f64 },

    #[error("parity is indeterminate (|Pf C| = {0:.3e})")]
    IndeterminateParity(f64),

    #[error("dense oracle refuses M = {0} (limit 6)")]
    RefusedScale(usize),

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("topological invariant is indeterminate (|det R'| = {0:.3e})")]
    IndeterminateInvariant(f64),

    #[error("conductance does not decay with length (slope {slope:.4})")]
    NotLocalized { slope: f64 },

    #[error("conductance does not grow logarithmically (prefactor {prefactor:.4})")]
    NotMetallic { prefactor: f64 },

    #[error("zero mode does not decay with system size (slope {slope:.4})")]
    NoDecay { slope: f64 },

    #[error("collapse infeasible: {0}")]
    CollapseInfeasible(String),

    #[error("all {requested} realizations at point {point} were dropped: {diagnostics}")]
    PointFailed {
        point: usize,
        requested: usize,
        diagnostics: String,
    },

    #[error("refusing to resume: {0}")]
    RefusedResume(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("linear algebra: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}
