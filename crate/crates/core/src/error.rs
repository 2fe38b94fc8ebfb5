use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("empty manifest: {path}")]
    EmptyManifest { path: PathBuf },
    #[error("malformed manifest row {line} in {path}: {msg}")]
    ManifestRow {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("referenced file missing: {path} (from manifest {manifest}, row {line})")]
    MissingReference {
        path: PathBuf,
        manifest: PathBuf,
        line: usize,
    },
    #[error("mask dimensions {mask_w}x{mask_h} do not match image {img_w}x{img_h}")]
    MaskMismatch {
        img_w: u32,
        img_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("sample has no parsing mask but the operation requires one")]
    MaskRequired,
    #[error("requested {requested} identities but manifest has only {available}")]
    NotEnoughIdentities { requested: usize, available: usize },
    #[error("K must be at least 2 (a positive pair is required), got {0}")]
    KTooSmall(usize),
    #[error("image size {h}x{w} too small, minimum is {min_h}x{min_w}")]
    ImageTooSmall {
        h: usize,
        w: usize,
        min_h: usize,
        min_w: usize,
    },
    #[error("crop {crop_h}x{crop_w} larger than padded image {avail_h}x{avail_w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        avail_h: usize,
        avail_w: usize,
    },
    #[error("shape mismatch in {op}: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },
    #[error("spatial size {h}x{w} too small for pyramid pooling (need at least 4x4)")]
    SpatialTooSmall { h: usize, w: usize },
    #[error("channel count {c} not usable with reduction {reduction}")]
    BadChannelCount { c: usize, reduction: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch of size {0} too small, need at least 2 samples")]
    BatchTooSmall(usize),
    #[error("anchor {anchor} has no {kind} sample in the batch")]
    DegenerateAnchor { anchor: usize, kind: &'static str },
    #[error("embedding row {row} has zero norm; cosine similarity undefined")]
    ZeroNormEmbedding { row: usize },
    #[error("non-finite value in loss term {term}: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("epoch {epoch} outside schedule range 0..{total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid config: {msg}")]
    InvalidConfig { msg: String },
    #[error("unknown config key `{key}`")]
    UnknownConfigKey { key: String },
    #[error("config key `{key}`: {msg}")]
    BadConfigValue { key: String, msg: String },
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("no queries retained after protocol filtering")]
    NoRetainedQueries,
    #[error("input size {h}x{w} incompatible with backbone strides")]
    BadInputSize { h: usize, w: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
