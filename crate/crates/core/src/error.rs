use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: orthonormality deviation {deviation:.3e}")]
    InvalidRotation { deviation: f64 },
    #[error("constraint error: {0}")]
    Constraint(String),
    #[error("azimuth undefined: camera center coincides with the target axis")]
    UndefinedAzimuth,
    #[error("translation direction undefined for a zero vector")]
    UndefinedDirection,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("sampler diverged at step {step}: non-finite velocity")]
    Divergence { step: usize },
    #[error("dimensions {h}x{w} are not divisible by patch size {patch}")]
    IndivisiblePatch { h: usize, w: usize, patch: usize },
    #[error("attention row {row} has every key masked")]
    FullyMaskedRow { row: usize },
    #[error("count mismatch for {what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("visibility error: {0}")]
    Visibility(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("probabilities do not form a simplex: {0}")]
    Simplex(String),
    #[error("curriculum schedule is empty")]
    EmptySchedule,
    #[error("no admissible view subset within [{lo}, {hi}] degrees")]
    CurriculumExhausted { lo: f64, hi: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("pose estimation failed: {0}")]
    Estimation(String),
    #[error("correspondence set is empty")]
    EmptyCorrespondences,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
