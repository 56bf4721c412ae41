use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (max |m - m^dagger| = {deviation:.3e})")]
    NonHermitian { deviation: f64 },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid lattice size {size} for {kind} model (need at least {min})")]
    InvalidSize {
        kind: &'static str,
        size: usize,
        min: usize,
    },

    #[error("failed to parse Hamiltonian file: {0}")]
    Parse(String),

    #[error("index ({row}, {col}) out of range for size {size}")]
    IndexOutOfRange { row: usize, col: usize, size: usize },

    #[error("detector site {0} listed more than once")]
    DuplicateSite(usize),

    #[error("detector site {site} outside lattice of size {size}")]
    SiteOutOfRange { site: usize, size: usize },

    #[error("detector covers all {0} sites; a detector must have rank below the lattice size")]
    FullSpaceDetector(usize),

    #[error("detector has no sites")]
    EmptyDetector,

    #[error("state is not normalized (norm {0:.12})")]
    NotNormalized(f64),

    #[error("measurement period must be positive, got {0}")]
    InvalidTau(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical residue too large: {0}")]
    NumericalResidue(String),

    #[error("mean measurement count undefined: the initial state is never detected")]
    UndefinedForDarkState,

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
