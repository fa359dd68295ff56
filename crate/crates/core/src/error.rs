use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Blocks of the model (or an input vector) disagree on a dimension.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A modelling assumption does not hold for the supplied coefficients.
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// An argument lies outside the domain where a quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {message} (gradient norm {gradient_norm:e})")]
    Numerical {
        message: String,
        last_iterate: Vec<f64>,
        gradient_norm: f64,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The explicit time step violates the scheme's stability bound.
    #[error("dt={dt:e} exceeds the stable step {stable_dt:e}")]
    Unstable { dt: f64, stable_dt: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A state-feedback policy produced a control outside the admissible set.
    #[error("policy inadmissible on path {path} at t={t}: x={x:?}, h={h:?}")]
    InadmissiblePolicy {
        path: usize,
        t: f64,
        x: Vec<f64>,
        h: Vec<f64>,
    },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, last: &[f64], gradient_norm: f64) -> Self {
        Error::Numerical {
            message: message.into(),
            last_iterate: last.to_vec(),
            gradient_norm,
        }
    }
}
