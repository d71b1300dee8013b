use std::path::PathBuf;

use thiserror::Error;
use vocseg_nn::NnError;

pub type Result<T> = std::result::Result<T, SegError>;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split list {0} does not exist")]
    MissingSplit(PathBuf),
    #[error("sample {id}: {kind} file {path} does not exist")]
    MissingFile {
        id: String,
        kind: &'static str,
        path: PathBuf,
    },
    #[error("sample {id} is listed in both the {first} and {second} splits")]
    OverlappingSplits {
        id: String,
        first: &'static str,
        second: &'static str,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("mask {path}: {msg}")]
    MaskFormat { path: PathBuf, msg: String },
    #[error("palette index {index} at (x={x}, y={y}) is not a VOC class or the void label")]
    PaletteIndex { index: u8, x: usize, y: usize },
    #[error("class id {class} out of range at pixel {pixel}")]
    ClassRange { class: u8, pixel: usize },
    #[error("degenerate raster {width}x{height}")]
    EmptyRaster { width: usize, height: usize },
    #[error("batch size must be at least 1, got {0}")]
    BatchSize(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
    #[error("layer {layer}: {msg}")]
    Plan { layer: String, msg: String },
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{path}: line {line}: {msg}")]
    MetricsLog {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("plot {path}: {msg}")]
    Plot { path: PathBuf, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl SegError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SegError {
        let path = path.into();
        move |source| SegError::Io { path, source }
    }

    pub(crate) fn config(key: &str, msg: impl Into<String>) -> SegError {
        SegError::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
