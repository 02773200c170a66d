//! Error type shared across the crate.
//!
//! Numeric kernels, graph construction, model code and file I/O all report
//! failures through [`SpellError`] so callers (library users and the CLI)
//! handle one type. Parse errors carry the file and 1-based line number so
//! a bad CSV row can be located directly.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpellError>;

#[derive(Debug, Error)]
pub enum SpellError {
    /// Incompatible shapes fed to a numeric kernel. `lhs`/`rhs` are
    /// human-readable shape strings such as `"4x3"`.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Batch statistics are undefined on fewer than two rows.
    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    /// Classification labels must be 0 or 1.
    #[error("label at index {index} must be 0 or 1, got {value}")]
    InvalidLabel { index: usize, value: u8 },

    /// `backward` was called on a layer that has no cached training-mode
    /// forward pass.
    #[error("{layer}: backward called without a cached training-mode forward")]
    NoCachedForward { layer: String },

    /// The model-level backward pass was invoked twice on one forward cache.
    #[error("backward already applied for this forward pass")]
    BackwardConsumed,

    /// A gradient became NaN or infinite during optimisation.
    #[error("non-finite gradient in tensor '{name}'")]
    NonFiniteGrad { name: String },

    /// The training loss left the finite range.
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: u32 },

    /// Average precision is undefined when no positive labels exist.
    #[error("no positive labels present; average precision is undefined")]
    NoPositives,

    /// Catch-all for invalid arguments and inconsistent inputs.
    #[error("{0}")]
    Validation(String),

    /// Malformed content in a tracks/config/feature/checkpoint file.
    /// `line` is 1-based; 0 means the error is not tied to a line.
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// A track row has no matching row in the feature store index.
    #[error("no feature row for node ({video_id}, t={time:.6}, {entity_id})")]
    MissingFeature {
        video_id: String,
        time: f64,
        entity_id: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SpellError {
    /// Shorthand used by kernels when two shapes disagree.
    pub fn shapes(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        SpellError::ShapeMismatch {
            op,
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        SpellError::Validation(msg.into())
    }

    pub fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        SpellError::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
