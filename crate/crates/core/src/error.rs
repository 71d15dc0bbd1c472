use alloc::string::String;
use core::fmt;

/// Errors surfaced by the modeling stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor dimensions are incompatible with the requested operation.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// An operation produced or consumed a NaN/Inf where a finite value is
    /// required.
    NonFinite {
        op: &'static str,
    },
    /// A row mask selected no rows where at least one is required.
    EmptyMask {
        op: &'static str,
    },
    /// Invalid record data; `line` is 1-based when the source is a line
    /// oriented file.
    Data {
        line: Option<usize>,
        detail: String,
    },
    /// Invalid configuration value.
    Config {
        detail: String,
    },
    /// A metric is undefined for the given inputs (e.g. AUC on a single
    /// class).
    Metric {
        detail: String,
    },
    /// Training produced a non-finite loss.
    Divergence {
        epoch: usize,
        last_loss: f64,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn data(line: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Data {
            line,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config {
            detail: detail.into(),
        }
    }

    pub(crate) fn metric(detail: impl Into<String>) -> Self {
        Error::Metric {
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value in {op}"),
            Error::EmptyMask { op } => write!(f, "empty row mask in {op}"),
            Error::Data { line: Some(n), detail } => write!(f, "invalid data at line {n}: {detail}"),
            Error::Data { line: None, detail } => write!(f, "invalid data: {detail}"),
            Error::Config { detail } => write!(f, "invalid config: {detail}"),
            Error::Metric { detail } => write!(f, "metric undefined: {detail}"),
            Error::Divergence { epoch, last_loss } => {
                write!(f, "training diverged at epoch {epoch} (last finite loss {last_loss})")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
