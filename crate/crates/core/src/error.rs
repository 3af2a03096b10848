use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("activation with slope {slope:e} is not invertible")]
    NonInvertibleActivation { slope: f64 },

    #[error("gamma of channel {channel} is {value:e}, magnitude below guard {guard:e}")]
    GammaSingular {
        channel: usize,
        value: f64,
        guard: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("saved state belongs to strategy {saved}, backward requested {requested}")]
    StrategyMismatch {
        saved: &'static str,
        requested: &'static str,
    },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
