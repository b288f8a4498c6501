use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PLY parse error: {0}")]
    Ply(String),

    #[error("PFM parse error: {0}")]
    Pfm(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("camera file error: {0}")]
    Camera(String),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid gaussian: {0}")]
    InvalidGaussian(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("neighbor index needs at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("point id {id} out of range for cloud of {len} points")]
    IdOutOfRange { id: usize, len: usize },

    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("budget M={m} is invalid for a cloud of N={n} points")]
    Budget { m: usize, n: usize },

    #[error("point cloud has no normals")]
    MissingNormals,

    #[error("gaussian set has no lidar normal associations")]
    MissingAssociations,

    #[error("too few gaussians: need at least {need}, have {have}")]
    TooFewGaussians { need: usize, have: usize },

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("empty valid set: {0}")]
    EmptyValidSet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training step aborted: {0}")]
    StepAborted(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Ply(_) => "ply",
            Error::Pfm(_) => "pfm",
            Error::Image { .. } => "image",
            Error::Camera(_) => "camera",
            Error::InvalidCloud(_) => "invalid_cloud",
            Error::InvalidGaussian(_) => "invalid_gaussian",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::TooFewPoints(_) => "too_few_points",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::DegenerateNeighborhood(_) => "degenerate_neighborhood",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Budget { .. } => "budget",
            Error::MissingNormals => "missing_normals",
            Error::MissingAssociations => "missing_associations",
            Error::TooFewGaussians { .. } => "too_few_gaussians",
            Error::ImageTooSmall(_) => "image_too_small",
            Error::EmptyValidSet(_) => "empty_valid_set",
            Error::Config(_) => "config",
            Error::StepAborted(_) => "step_aborted",
            Error::Json(_) => "json",
        }
    }
}
