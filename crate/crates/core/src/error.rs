use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid arguments or configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// A computation would exceed a fixed combinatorial or memory budget.
    #[error("size error: {what} is {size}, budget is {budget}")]
    Size {
        what: &'static str,
        size: usize,
        budget: usize,
    },

    /// A numerical procedure did not reach its tolerance.
    #[error("numeric error: {msg} (achieved {achieved:.3e})")]
    Numeric { msg: String, achieved: f64 },

    /// Picard iteration gap grew for several consecutive iterations.
    #[error("picard iteration diverged, gap history {history:?}")]
    Divergence { history: Vec<f64> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>, achieved: f64) -> Self {
        Error::Numeric {
            msg: msg.into(),
            achieved,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Size { .. } | Error::Json(_) => 2,
            Error::Numeric { .. } | Error::Divergence { .. } => 4,
            Error::Io(_) | Error::Csv(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
