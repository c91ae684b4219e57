use thiserror::Error;

/// Errors raised by the pruning engine.
///
/// Variants are grouped by the caller-facing category they belong to, see
/// [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes {found:?}, expected \"ZTPT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated trace payload while reading {what}")]
    Truncated { what: &'static str },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("attention row does not sum to 1 (layer {layer}, head {head}, row {row}: sum {sum})")]
    RowSum {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },

    #[error("attention entry outside [0, 1] (layer {layer}, head {head}, row {row}, col {col}: {value})")]
    EntryRange {
        layer: usize,
        head: usize,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid signal: {0}")]
    Signal(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("block {block}: {source}")]
    AtBlock {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing tensor: {0}")]
    MissingTensor(String),

    #[error("non-finite value at WPR iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("WPR did not reach tolerance {tol} within {max_iterations} iterations")]
    NotConverged { tol: f64, max_iterations: usize },

    #[error("no budget-feasible schedule after {attempts} attempts")]
    InfeasibleSpace { attempts: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed or inconsistent configuration (schedules, parameters).
    Config,
    /// Malformed input data (trace files, signals, shapes).
    Input,
    /// Numerical failure during computation.
    Numerical,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::NonFinite { .. }
            | Error::RowSum { .. }
            | Error::EntryRange { .. }
            | Error::Geometry(_)
            | Error::Shape(_)
            | Error::Signal(_)
            | Error::MissingTensor(_) => ErrorCategory::Input,
            Error::InvalidParameter(_) | Error::Schedule(_) | Error::InfeasibleSpace { .. } => {
                ErrorCategory::Config
            }
            Error::Diverged { .. } | Error::NotConverged { .. } => ErrorCategory::Numerical,
            Error::AtBlock { source, .. } => source.category(),
            Error::Io(_) => ErrorCategory::Io,
        }
    }

    /// Wraps with a 1-based block number.
    pub(crate) fn at_block(self, block: usize) -> Self {
        Error::AtBlock {
            block,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
