use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular evaluation: query coincides with source {index}")]
    Singularity { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown toy dataset '{0}'")]
    UnknownDataset(String),

    #[error("batch of {requested} points exceeds dataset of {available}")]
    BatchTooLarge { requested: usize, available: usize },

    #[error("degenerate field at z = {z}: |v_z| = {v_z_abs:e} below floor (|v_x| = {v_x_norm})")]
    DegenerateField {
        z: f64,
        v_z_abs: f64,
        v_x_norm: f64,
    },

    #[error("non-finite state at t' = {t}")]
    NonFinite { t: f64 },

    #[error("non-finite divergence difference along coordinate {coordinate}")]
    NonFiniteDivergence { coordinate: usize },

    #[error("step budget of {budget} exhausted")]
    StepBudget { budget: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! domain {
    ($($arg:tt)*) => {
        $crate::error::Error::Domain(alloc::format!($($arg)*))
    };
}

pub(crate) use domain;
