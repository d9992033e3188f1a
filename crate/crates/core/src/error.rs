use std::path::PathBuf;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Extents of two operands disagree, or a geometry yields an empty output.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A non-finite value appeared where only finite values are allowed.
    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content (image, manifest, checkpoint, config).
    #[error("{what}: {detail}")]
    Format { what: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { what: what.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for faults that should surface as a numeric failure rather than a usage error.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
