use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller violated an operation contract: bad index, shape mismatch,
    /// invalid argument value.
    #[error("{0}")]
    Usage(String),
    /// A network configuration failed validation. Carries the offending layer
    /// index when one exists.
    #[error("config error{}: {msg}", .layer.map(|i| format!(" (layer {i})")).unwrap_or_default())]
    Config { layer: Option<usize>, msg: String },
    /// A checkpoint file is corrupt, truncated, or inconsistent with its
    /// embedded configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training produced a non-finite value in the named parameter group.
    #[error("training error: non-finite {what} in `{name}`")]
    NonFinite { what: &'static str, name: String },
    /// The gradient-check oracle could not run.
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(layer: impl Into<Option<usize>>, msg: impl Into<String>) -> Self {
        Error::Config { layer: layer.into(), msg: msg.into() }
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    /// True for errors caused by bad user input (as opposed to runtime
    /// failures such as I/O or divergence). The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config { .. })
    }
}
