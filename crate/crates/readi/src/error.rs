use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] readi_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid config {}: {source}", path.display())]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("{stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for bad configuration, 3 for anything that
    /// failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Toml { .. } | Self::Core(readi_core::Error::Config(_)) => 2,
            Self::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

/// Tag errors from one pipeline stage with its name.
pub trait StageExt<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage: name.to_string(), source: Box::new(e.into()) })
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
