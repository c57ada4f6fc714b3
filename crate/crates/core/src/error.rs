//! Error and warning types shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format { path: String, offset: u64, msg: String },

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("unknown label id {0}")]
    UnknownLabel(u32),

    #[error("zero-norm vector passed to {0}")]
    ZeroVector(String),

    #[error("empty phrase after normalization")]
    EmptyPhrase,

    #[error("degenerate extent: {0}")]
    DegenerateExtent(String),

    #[error("box is fully outside the grid")]
    OutOfBounds,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Non-fatal conditions surfaced alongside results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    /// Input intensities were constant; the normalized output is all zeros.
    DegenerateIntensity,
    /// A selected label has no voxels in the grid; it contributed a zero prior.
    MissingRegion(u32),
    /// The box intersects the grid but contains no voxel centers.
    EmptySegment,
    /// K exceeded the table size; the ranking was truncated.
    TruncatedTopK { requested: usize, available: usize },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::DegenerateIntensity => write!(f, "constant intensities; output zeroed"),
            Warning::MissingRegion(id) => write!(f, "label {id} has no voxels; zero prior"),
            Warning::EmptySegment => write!(f, "box contains no voxel centers"),
            Warning::TruncatedTopK {
                requested,
                available,
            } => write!(f, "top-k truncated: requested {requested}, table has {available}"),
        }
    }
}
