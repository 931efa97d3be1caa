use thiserror::Error;

/// Errors produced anywhere in the model, data and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config ({invariant}): {detail}")]
    Config {
        invariant: &'static str,
        detail: String,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("unknown component tag `{0}`")]
    UnknownComponent(String),

    #[error("parameter registry is empty")]
    EmptyRegistry,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("invalid run config: {0}")]
    RunConfig(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
