use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// A mask that a loss normalizes by has zero mass.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("missing input for {stage}: {field}")]
    MissingInput { stage: &'static str, field: &'static str },
    /// The optimizer produced a non-finite loss, usually a step size that is too large.
    #[error("optimization diverged at level {level}, iteration {iteration}")]
    Diverged { level: usize, iteration: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::DegenerateMask(_) | Error::Diverged { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_) | Error::Codec(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_same_shape(
    what: &str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}
