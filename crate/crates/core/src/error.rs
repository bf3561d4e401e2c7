use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed NIfTI file: {0}")]
    Nifti(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("insufficient overlap: {voxels} masked voxels, need at least {required}")]
    InsufficientOverlap { voxels: usize, required: usize },

    #[error("field of view violated: {0}")]
    FieldOfView(String),

    #[error("reference build failed, data too corrupted ({rejected} of {total} slices rejected)")]
    ReferenceBuildFailed { rejected: usize, total: usize },

    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    #[error("zero variance in node '{0}'")]
    ZeroVariance(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::UndefinedSimilarity(_)
                | Error::InsufficientOverlap { .. }
                | Error::ReferenceBuildFailed { .. }
                | Error::IllPosed(_)
                | Error::Numerical(_)
        )
    }
}
