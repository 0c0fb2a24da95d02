use thiserror::Error;

#[derive(Debug, Error)]
pub enum LelsdError {
    #[error("latent space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown part `{0}`")]
    UnknownPart(String),
    #[error("unsupported capability: {0}")]
    UnsupportedCapability(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("calibration target out of range: {0}")]
    CalibrationOutOfRange(String),
    #[error("distance is not monotone in |alpha|: {0}")]
    NonMonotoneDistance(String),
    #[error("generator fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("unsupported bank format version {0}")]
    UnsupportedVersion(u64),
    #[error("malformed bank: {0}")]
    MalformedBank(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl LelsdError {
    /// Machine-readable name of the error variant.
    pub fn code(&self) -> &'static str {
        match self {
            LelsdError::SpaceMismatch(_) => "SpaceMismatch",
            LelsdError::InvalidEdit(_) => "InvalidEdit",
            LelsdError::ShapeMismatch(_) => "ShapeMismatch",
            LelsdError::InvalidInput(_) => "InvalidInput",
            LelsdError::UnknownPart(_) => "UnknownPart",
            LelsdError::UnsupportedCapability(_) => "UnsupportedCapability",
            LelsdError::TrainingDiverged(_) => "TrainingDiverged",
            LelsdError::CalibrationOutOfRange(_) => "CalibrationOutOfRange",
            LelsdError::NonMonotoneDistance(_) => "NonMonotoneDistance",
            LelsdError::FingerprintMismatch { .. } => "FingerprintMismatch",
            LelsdError::UnsupportedVersion(_) => "UnsupportedVersion",
            LelsdError::MalformedBank(_) => "MalformedBank",
            LelsdError::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, LelsdError>;
