use thiserror::Error;

/// Errors raised across the scaler, simulator and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: unbound metric `{0}`")]
    UnboundMetric(String),

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("prediction error: {0}")]
    Prediction(String),

    #[error("unknown service `{0}`")]
    UnknownService(String),

    #[error("scale target {target} for `{service}` outside bounds [{min}, {max}]")]
    ScaleOutOfBounds {
        service: String,
        target: u32,
        min: u32,
        max: u32,
    },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Toml(_) | Error::UnknownService(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
