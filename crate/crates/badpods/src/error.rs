use thiserror::Error;

/// Which weight layer of the nested ensemble degenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightLevel {
    State,
    Param,
}

impl std::fmt::Display for WeightLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightLevel::State => write!(f, "state"),
            WeightLevel::Param => write!(f, "parameter"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// All unnormalized weights underflowed at one level of the nested
    /// filter. This signals a likelihood underflow (a model or clamp bug),
    /// not a situation to renormalize through.
    #[error("degenerate weights at the {level} level (max log-weight {max_log_weight})")]
    DegenerateWeights {
        level: WeightLevel,
        max_log_weight: f64,
    },

    #[error("non-finite value in {context}{}", particle.map(|p| format!(" (particle {p})")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        particle: Option<usize>,
    },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failure: {0}")]
    Serialization(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
