use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] clstream_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot parse {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    /// A results directory holds experiments run under different protocols.
    #[error("report error: {dir} mixes incompatible experiments (fingerprints {})", fingerprints.join(", "))]
    MixedResults { dir: PathBuf, fingerprints: Vec<String> },

    #[error("report error: {0}")]
    Report(String),

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

    /// True for problems with the user's inputs rather than with a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Toml { .. }
                | Error::Core(clstream_core::Error::Config(_))
                | Error::Core(clstream_core::Error::Usage(_))
        )
    }
}
