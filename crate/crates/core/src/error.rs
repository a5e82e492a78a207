use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("instance too large for exhaustive search: {size} candidates (limit {limit})")]
    InstanceTooLarge { size: usize, limit: usize },

    #[error("class {class} has no active examples left at epoch {epoch}")]
    ClassExhausted { class: usize, epoch: usize },

    #[error("degenerate budget for class {class}: k = {k} medoids for {size} examples would isolate every point")]
    DegenerateBudget { class: usize, k: usize, size: usize },

    #[error("numerical divergence{}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    NumericalDivergence { epoch: Option<usize> },

    #[error("target gradient is zero; alignment is undefined")]
    DegenerateTarget,

    #[error("attack does not succeed with the full poison set; no effective subset exists")]
    NoEffectiveSubset,

    #[error("loss {loss} at trajectory point {index} lies below the assumed minimum {min}")]
    InvalidSurface { index: usize, loss: f64, min: f64 },

    #[error("step size times PL constant is {eta_mu}, outside (0, 1)")]
    OutOfRegime { eta_mu: f64 },

    #[error("malformed dump at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
