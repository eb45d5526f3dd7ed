use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit codes: validation
/// problems exit 2, numerical failures exit 3, and I/O or format problems
/// exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor or configuration value violated a documented invariant.
    #[error("validation: {0}")]
    Validation(String),

    /// Two grids that must share a shape did not.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: String,
        right: String,
    },

    /// An iterative solver failed to reach its tolerance.
    #[error("solver did not converge: {context} (residual {residual:.3e} after {iterations} iterations)")]
    NoConvergence {
        context: &'static str,
        residual: f64,
        iterations: usize,
    },

    /// A non-finite value surfaced where the pipeline requires finite math.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Optimization aborted; carries a snapshot of the loss terms at abort.
    #[error("optimization aborted at level {level}, iteration {iteration}: {reason}")]
    OptimizationAborted {
        level: usize,
        iteration: usize,
        reason: String,
    },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format: {path}: {message}")]
    ImageFormat { path: PathBuf, message: String },

    #[error("flow format: {path}: {message}")]
    FlowFormat { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    /// A gradient audit exceeded its tolerance.
    #[error(
        "gradient audit breach: {primitive} at relative error {rel_error:.3e} (tolerance {tolerance:.0e})"
    )]
    GradientAudit {
        primitive: String,
        rel_error: f64,
        tolerance: f64,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn dimension_mismatch(
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::DimensionMismatch {
            context,
            left: format!("{}x{}", left.0, left.1),
            right: format!("{}x{}", right.0, right.1),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::DimensionMismatch { .. } | Error::Config(_) => 2,
            Error::NoConvergence { .. }
            | Error::NonFinite(_)
            | Error::OptimizationAborted { .. }
            | Error::GradientAudit { .. } => 3,
            Error::Io { .. } | Error::ImageFormat { .. } | Error::FlowFormat { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
