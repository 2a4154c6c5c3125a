use std::path::PathBuf;

/// Errors produced anywhere in the pretraining / fine-tuning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus must contain ≥ 1 video")]
    EmptyCorpus,

    #[error("video `{video}`: {reason}")]
    Video { video: String, reason: String },

    #[error("non-contiguous frames in video `{video}`: expected frame {expected}, found {found}")]
    NonContiguousFrames {
        video: String,
        expected: usize,
        found: usize,
    },

    #[error("image shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("video too short for positive sampling (M = {frames})")]
    EmptyPositiveSupport { frames: usize },

    #[error("no valid intra-video negatives (a = {anchor}, Δ = {exclusion}, M = {frames})")]
    EmptyNegativeSupport {
        anchor: usize,
        exclusion: usize,
        frames: usize,
    },

    #[error(
        "video `{video}` (M = {frames}) has no intra-video negatives at Δ = {exclusion} after \
         {attempts} anchor draws; use longer videos or a smaller Δ"
    )]
    SamplerExhausted {
        video: String,
        frames: usize,
        exclusion: usize,
        attempts: usize,
    },

    #[error("queue not warmed up")]
    QueueEmpty,

    #[error("requested top-{requested} negatives but only {available} cross-video entries are queued")]
    NotEnoughNegatives { requested: usize, available: usize },

    #[error("embedding is not unit-norm (‖z‖ = {norm}){}", zero_hint(*norm))]
    NotNormalized { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("temperature must be > 0, got {0}")]
    Temperature(f64),

    #[error("non-finite value in loss inputs")]
    NonFinite,

    #[error("encoder parameters are not structurally identical")]
    StructureMismatch,

    #[error("cross-video negatives require ≥ 2 videos")]
    SingleVideo,

    #[error("step {step}: {cause}")]
    Step { step: u64, cause: Box<Error> },

    #[error("fold {fold}: class `{class}` missing from the training split")]
    FoldMissingClass { fold: usize, class: String },

    #[error("label `{0}` is not in the class vocabulary")]
    UnknownLabel(String),

    #[error("label vocabulary mismatch: classifier has {expected:?}, data has {got:?}")]
    VocabularyMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}: {cause}")]
    Image { path: PathBuf, cause: image::ImageError },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

fn zero_hint(norm: f64) -> &'static str {
    if norm == 0.0 {
        "; the encoder output is identically zero, try a wider encoder or another seed"
    } else {
        ""
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        Error::Step {
            step,
            cause: Box::new(self),
        }
    }

    /// True when the error came from invalid configuration rather than a runtime fault.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
