use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid model, profile, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent data (shapes, labels, sample counts).
    #[error("data error: {0}")]
    Data(String),

    /// An API was driven in an order or with arguments it does not accept.
    #[error("usage error: {0}")]
    Usage(String),

    /// On-disk dataset or checkpoint does not match its manifest.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A continual-learning strategy could not complete a step.
    #[error("strategy error: {0}")]
    Strategy(String),

    /// The non-negative QP behind a gradient projection did not reach its
    /// KKT tolerance.
    #[error(
        "strategy error: dual QP did not converge after {iterations} iterations \
         (stationarity residual {stationarity:.3e}, complementarity residual {complementarity:.3e}, tolerance {tolerance:.1e})"
    )]
    QpNonConvergence {
        iterations: usize,
        stationarity: f64,
        complementarity: f64,
        tolerance: f64,
    },

    /// A metric is not defined for the given inputs (e.g. one class absent).
    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
