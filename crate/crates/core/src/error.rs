use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("coordinate {0} lies outside the unit interval")]
    CoordOutOfRange(f64),

    #[error("bin index {idx} out of range for {bins} bins")]
    BinOutOfRange { idx: usize, bins: usize },

    #[error("touch point ({x}, {y}) lies outside a {width}x{height} image")]
    TouchOutOfBounds { x: f64, y: f64, width: u32, height: u32 },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown inpainting backend '{0}'")]
    UnknownBackend(String),

    #[error("sequence of length {len} exceeds the context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("out-of-vocabulary word '{0}'")]
    UnknownWord(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("resolution mismatch: model expects {expected}x{expected}, got {width}x{height}")]
    Resolution { expected: u32, width: u32, height: u32 },

    #[error("schema version mismatch: expected '{expected}', found '{found}'")]
    SchemaVersion { expected: String, found: String },

    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },

    #[error("record '{0}' has no ground truth")]
    MissingGroundTruth(String),

    #[error("sample {index}: no usable object after {retries} retries")]
    GenerationExhausted { index: usize, retries: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Codec(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
