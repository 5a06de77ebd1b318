use thiserror::Error;

/// Errors raised anywhere in the scoring head, its losses, data files and trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("infeasible rotation: need d >= K, got d={d}, K={k}")]
    InfeasibleRotation { d: usize, k: usize },

    #[error("degenerate prototype: row {0} has zero norm")]
    DegeneratePrototype(usize),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("incompatible file version {found} (supported: {supported})")]
    IncompatibleVersion { found: u32, supported: u32 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
