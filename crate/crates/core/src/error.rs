use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis} axis (expected {expected}, got {actual})")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("unknown graph node {0}")]
    UnknownNode(usize),

    #[error("unknown tap `{name}` (valid taps: {})", valid.join(", "))]
    UnknownTap { name: String, valid: Vec<String> },

    #[error("duplicate tap `{0}`")]
    DuplicateTap(String),

    #[error("input size {height}x{width} is not divisible by {divisor} (2^depth)")]
    Divisibility {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty pixel set")]
    EmptyPixelSet,

    #[error("pixel ({i}, {j}) is outside the {height}x{width} mask")]
    PixelOutOfBounds {
        i: usize,
        j: usize,
        height: usize,
        width: usize,
    },

    #[error("class id {class} out of range (model has {num_classes} classes)")]
    BadClass { class: usize, num_classes: usize },

    #[error("heatmap has negative value {0}; expected a post-ReLU map")]
    NegativeHeat(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("netpbm error at byte {offset}: {message}")]
    Pnm { offset: usize, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),

    #[error("checkpoint header parse failure: {0}")]
    Header(String),

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint payload length {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
}
