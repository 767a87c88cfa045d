//! Crate-wide error type.
//!
//! Variants map onto the process exit codes used by the CLI: configuration
//! problems (2), numerical failures such as Courant violations or non-finite
//! state (3), and I/O failures (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("tensor-train error: {0}")]
    Tt(String),

    #[error("SVD failed on a {rows}x{cols} unfolding ({detail})")]
    Svd {
        rows: usize,
        cols: usize,
        detail: String,
    },

    #[error("Courant violation in {context}: max |c| = {max_c:.6} >= 1")]
    Courant { context: String, max_c: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("spectral transform left imaginary residue {residue:.3e} > bound {bound:.3e}")]
    ImaginaryResidue { residue: f64, bound: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::Tt(_)
            | Error::Svd { .. }
            | Error::Courant { .. }
            | Error::Numerical(_)
            | Error::ImaginaryResidue { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
