use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("step index {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("discriminator domain mismatch: expected {expected}, got {actual}")]
    Domain {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("conditioning violation: {0}")]
    Conditioning(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("unknown content id {0}")]
    UnknownContent(usize),

    #[error("audio: {0}")]
    Audio(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schedule(_) => "schedule",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::Shape { .. } => "shape",
            Error::Empty(_) => "empty",
            Error::NonFinite(_) => "non_finite",
            Error::Domain { .. } => "domain",
            Error::Config(_) => "config",
            Error::Conditioning(_) => "conditioning",
            Error::Checkpoint(_) => "checkpoint",
            Error::Geometry(_) => "geometry",
            Error::Corpus(_) => "corpus",
            Error::UnknownContent(_) => "unknown_content",
            Error::Audio(_) => "audio",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
