use std::path::PathBuf;

use crate::task::TaskSpecViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid task spec: {}", format_violations(.0))]
    InvalidTaskSpec(Vec<TaskSpecViolation>),
    #[error("unknown dataset `{0}` (expected `casme2` or `samm`)")]
    UnknownDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty prompt: {0}")]
    EmptyPrompt(String),
    #[error("requested {requested} trainable layers but the encoder has {available}")]
    LayerCountExceeded { requested: usize, available: usize },

    #[error("frame size mismatch: onset {onset:?} vs apex {apex:?}")]
    SizeMismatch { onset: (usize, usize), apex: (usize, usize) },
    #[error("flow estimator failed: {0}")]
    EstimatorFailure(String),
    #[error("magnification factor must be positive, got {0}")]
    NonPositiveFactor(f64),
    #[error("landmark ({x}, {y}) lies outside the {w}x{h} image")]
    OutOfBounds { x: f64, y: f64, w: usize, h: usize },

    #[error("token group is empty")]
    EmptyGroup,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("emotion `{emotion}` receives no contributing AU under the filter")]
    EmptyContribution { emotion: String },
    #[error("emotion spec error: {0}")]
    EmotionSpec(String),

    #[error("LOSO needs at least two distinct subjects")]
    SingleSubject,
    #[error("metric accumulator is empty")]
    EmptyAccumulator,
    #[error("loss diverged at epoch {epoch} (fold `{fold}`): {detail}")]
    DivergedLoss { fold: String, epoch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing file {path} (manifest row {row})")]
    MissingFile { row: usize, path: PathBuf },
    #[error("unknown AU label `{label}` in manifest row {row}")]
    UnknownAULabel { row: usize, label: String },
    #[error("malformed manifest row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },
    #[error("synthetic region for AU{au} lies outside the {size}x{size} image")]
    RegionOutOfBounds { au: u32, size: usize },
    #[error("missing emotion labels: {0}")]
    MissingEmotionLabels(String),
    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

fn format_violations(v: &[TaskSpecViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
