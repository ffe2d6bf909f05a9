use std::path::PathBuf;

/// Errors raised by the engine.
///
/// Variants map onto the CLI exit-code classes: [`Error::Config`] and
/// [`Error::Usage`] are caller mistakes, [`Error::Numerics`] is a numerical
/// failure, everything else is a data error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numerics error in `{tensor}`: {detail}")]
    Numerics { tensor: String, detail: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("unsupported prompt layout: {0}")]
    UnsupportedPrompt(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numerics(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerics {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
