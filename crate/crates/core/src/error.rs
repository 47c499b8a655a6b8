use thiserror::Error;

/// Errors raised across the analytic, simulation and estimation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("assumption check failed: {0}")]
    AssumptionViolated(String),

    #[error("non-finite value at x = {x}: {what}")]
    NonFinite { x: f64, what: String },

    #[error("quadrature did not converge: last refinement changed the value by {change:e} (tol {tol:e})")]
    QuadratureNonConvergence { change: f64, tol: f64 },

    #[error("truncation domain too small: {0}")]
    Truncation(String),

    #[error("grid under-resolves oscillation: spacing {spacing:e} > period {period:e} / {min_nodes}")]
    Aliasing {
        spacing: f64,
        period: f64,
        min_nodes: usize,
    },

    #[error("scale function not monotone near x = {x}")]
    NonMonotone { x: f64 },

    #[error("inconsistent centering: |H(upper)| = {drift:e}")]
    CenteringDrift { drift: f64 },

    #[error("Dirichlet-form mismatch {gap:e} exceeds {limit:e}")]
    DirichletGap { gap: f64, limit: f64 },

    #[error("replicate {replicate} blew up at step {step} (|x| = {state:e})")]
    BlowUp {
        replicate: u64,
        step: u64,
        state: f64,
    },

    #[error("underpowered run: {got} replicates, need at least {need}")]
    Underpowered { got: usize, need: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
