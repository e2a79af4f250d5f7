//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("feature data size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("metadata error at {path}:{line}: {reason}")]
    Metadata {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate image entry: id {image_id:?}, view {view}")]
    DuplicateImage { image_id: String, view: String },

    #[error("tracklet {tracklet} spans cameras {camera_a} and {camera_b}")]
    TrackletCameraConflict {
        tracklet: u32,
        camera_a: u32,
        camera_b: u32,
    },

    #[error("feature/metadata length mismatch: {features} rows vs {metas} records")]
    LengthMismatch { features: usize, metas: usize },

    #[error("zero-norm feature row {row}")]
    ZeroRow { row: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("features not normalized; run l2_normalize first")]
    NotNormalized,

    #[error("unknown camera id {camera} at row {row}")]
    UnknownCamera { camera: u32, row: usize },

    #[error("no tracklet aggregate for row {row}")]
    MissingTracklet { row: usize },

    #[error("image id {image_id:?} missing from input set {set}")]
    MissingImage { image_id: String, set: usize },

    #[error("metadata for image {image_id:?} disagrees across input sets on {field}")]
    MetaConflict {
        image_id: String,
        field: &'static str,
    },

    #[error("image id order mismatch at position {index}: {left:?} vs {right:?}")]
    IdOrderMismatch {
        index: usize,
        left: String,
        right: String,
    },

    #[error("concatenated dimension overflows supported size")]
    DimOverflow,

    #[error("matrix shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("distance matrices disagree on {axis} ids at position {index}")]
    MatrixIdMismatch { axis: &'static str, index: usize },

    #[error("distance matrix is not a valid square dissimilarity: {reason}")]
    NotSymmetric { reason: String },

    #[error("gallery too small: {gallery} points, need at least {needed}")]
    GalleryTooSmall { gallery: usize, needed: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("query {query_id:?} has no unmasked gallery candidates")]
    EmptyCandidates { query_id: String },

    #[error("identity label missing for image {image_id:?}")]
    MissingIdentity { image_id: String },

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("stage `{stage}`: {reason}")]
    StageOrder { stage: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
