use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("no numeric columns in {0}")]
    NoNumericColumns(String),
    #[error("requested column `{0}` is absent")]
    MissingColumn(String),
    #[error("series has {len} timestamps, shorter than window length {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("batch carries no scaling metadata")]
    MissingScale,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("diffusion step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("odd {what} length {len}")]
    OddLength { what: &'static str, len: usize },
    #[error("length {len} is not divisible by 2^{levels}")]
    Divisibility { len: usize, levels: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("too few windows: need at least {need}, got {got}")]
    TooFewWindows { need: usize, got: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("fewer points ({points}) than requested components ({components})")]
    TooFewPoints { points: usize, components: usize },
    #[error("rendering failed: {0}")]
    Render(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
