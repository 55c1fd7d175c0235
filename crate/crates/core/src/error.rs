use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid STFT configuration: {0}")]
    InvalidStftConfig(String),

    #[error("empty signal")]
    EmptySignal,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("{0} has zero energy")]
    ZeroEnergy(&'static str),

    #[error("signal too short: {frames} frames, need more than {required}")]
    TooShort { frames: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular system at frequency {bin} even after diagonal loading")]
    Singular { bin: usize },

    #[error("missing close-talk mixture: tap configuration requires one")]
    MissingCloseTalk,

    #[error("empty pool: {0}")]
    EmptyPool(&'static str),

    #[error("training step {step} on {scene} failed: {source}")]
    Step {
        step: u64,
        scene: String,
        #[source]
        source: Box<Error>,
    },

    #[error("expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRate { expected: u32, found: u32 },

    #[error("invalid manifest (line {line}): {reason}")]
    Manifest { line: usize, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns the index of the first non-finite value, if any.
pub(crate) fn first_non_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<usize> {
    values.into_iter().position(|v| !v.is_finite())
}
