use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("missing mask for image {0}")]
    MissingMask(String),

    #[error("unknown class id {value} in mask {id} (declared: {declared:?})")]
    UnknownClass {
        id: String,
        value: u8,
        declared: Vec<u8>,
    },

    #[error("size mismatch for {id}: image is {image:?}, mask is {mask:?}")]
    SizeMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough samples: need {needed}, have {available}")]
    NotEnoughSamples { needed: usize, available: usize },

    #[error("degenerate mask: {0}")]
    Degenerate(String),

    #[error("every pixel in the batch is unknown")]
    AllUnknown,

    #[error("no labeled pixel of class {class} in the support set; its prototype cannot be built")]
    MissingPrototype { class: u8 },

    #[error("annotation style `{0}` has no countable user input")]
    UnsupportedStyle(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("task leakage: {0}")]
    Leakage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
