use thiserror::Error;

/// Errors produced by the stabilization core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("degenerate warp at {context}: node sum vanished")]
    DegenerateWarp { context: String },

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("solver diverged (non-finite loss) at {context}")]
    Divergence { context: String },

    #[error("frame {got} out of order (expected {expected})")]
    Sequencing { expected: u64, got: u64 },

    #[error("metric fit failed: {0}")]
    Fit(String),

    #[error("weight file error: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
