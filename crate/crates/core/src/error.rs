use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range (bound {bound}) in {context}")]
    Index {
        index: usize,
        bound: usize,
        context: &'static str,
    },

    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("missing dependency artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numerical divergence in stage `{stage}`: {detail}")]
    Divergence { stage: String, detail: String },

    #[error("performance gap is undefined: P_T ({ceiling}) equals P_S ({baseline})")]
    UndefinedGap { baseline: f64, ceiling: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
