use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("split count {s} does not divide input channels {c}")]
    Divisor { c: usize, s: usize },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("non-finite value in layer `{layer}` during {stage}")]
    NonFinite { layer: String, stage: &'static str },

    #[error("training diverged at epoch {epoch}: loss {loss:e}")]
    Diverged {
        epoch: usize,
        loss: f64,
        report: Box<crate::trainer::TrainReport>,
    },

    #[error("unsupported format version {found} (expected major {expected})")]
    Version { found: String, expected: u32 },

    #[error("manifest references missing blob `{0}`")]
    DanglingBlob(String),

    #[error("blob `{name}`: {detail}")]
    BlobFormat { name: String, detail: String },

    #[error("blob `{name}` is truncated: header implies {expected} bytes, found {found}")]
    BlobLength {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("blob `{0}` checksum mismatch")]
    Checksum(String),

    #[error("shape chain broken at layer `{layer}`: {detail}")]
    ShapeChain { layer: String, detail: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset pairing mismatch: {inputs} inputs vs {targets} targets")]
    Pairing { inputs: usize, targets: usize },

    #[error("plan error for layer `{layer}`: {detail}")]
    Plan { layer: String, detail: String },

    #[error("invalid sharing plan: {}", .0.join("; "))]
    Sharing(Vec<String>),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
