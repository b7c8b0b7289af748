use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
///
/// The CLI maps variants onto distinct exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("format version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("wrong artifact type: expected {expected}, found {found}")]
    TypeTag { expected: String, found: String },

    #[error("infeasible deployment plan: {}", .0.join("; "))]
    Infeasible(Vec<String>),

    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    OutputExists(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit status for the CLI. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Divergence(_) | Error::NonFinite(_) => 4,
            Error::Format(_)
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::TypeTag { .. } => 5,
            Error::Infeasible(_) => 6,
            Error::OutputExists(_) => 7,
            Error::Shape(_) | Error::Contract(_) => 8,
            Error::Io(_) => 1,
        }
    }

    /// Short category name printed alongside CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Divergence(_) | Error::NonFinite(_) => "divergence",
            Error::Format(_)
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::TypeTag { .. } => "format",
            Error::Infeasible(_) => "infeasible",
            Error::OutputExists(_) => "output-exists",
            Error::Shape(_) | Error::Contract(_) => "internal",
            Error::Io(_) => "io",
        }
    }
}
