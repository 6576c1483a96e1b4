use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: unsupported window {win_h}x{win_w} on a map of width {map_w}")]
    UnsupportedWindow {
        op: &'static str,
        win_h: usize,
        win_w: usize,
        map_w: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardAlreadyRun,

    #[error("unknown parameter path `{0}`")]
    UnknownParam(String),

    #[error("invalid label {0}, expected 0 or 1")]
    InvalidLabel(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },

    #[error("lesion could not be placed inside the breast after {0} tries")]
    LesionPlacement(usize),

    #[error("no foreground found after background removal")]
    EmptyForeground,

    #[error("chest-wall fit rejected: rms residual {residual:.3} px exceeds {limit:.3} px")]
    ChestWallFit { residual: f64, limit: f64 },

    #[error("chest-wall fit rejected: angle {angle_deg:.2} degrees out of range")]
    ChestWallAngle { angle_deg: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey {
        path: PathBuf,
        line: usize,
        key: String,
    },

    #[error("{path}:{line}: bad value for `{key}`: {detail}")]
    BadValue {
        path: PathBuf,
        line: usize,
        key: String,
        detail: String,
    },

    #[error("{path}:{line}: malformed line, expected `key = value`")]
    MalformedLine { path: PathBuf, line: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
