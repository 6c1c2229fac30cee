use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("CAPE {cape:.3} J/kg below operator threshold {cape_min:.3} J/kg")]
    BelowThreshold { cape: f64, cape_min: f64 },

    #[error("degenerate perturbation direction: tangent-linear response is zero")]
    DegenerateDirection,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient samples: need at least 2, got {0}")]
    InsufficientSamples(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("grid dimension {size} not divisible by factor {factor}")]
    NotDivisible { size: usize, factor: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Config(#[from] toml::de::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidProfile(_) => "invalid-profile",
            Error::BelowThreshold { .. } => "below-threshold",
            Error::DegenerateDirection => "degenerate-direction",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InsufficientSamples(_) => "insufficient-samples",
            Error::NonFinite(_) => "non-finite",
            Error::NotDivisible { .. } => "divisibility",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "io",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
