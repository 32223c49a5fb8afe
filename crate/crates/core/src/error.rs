use std::path::PathBuf;

use slicefusion_autograd::GraphError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload {file} has {actual} bytes, header implies {expected}")]
    SizeInconsistency { file: PathBuf, expected: usize, actual: usize },
    #[error("label value {value} at index {index} is outside 0..=3")]
    InvalidLabel { value: u8, index: usize },
    #[error("invalid stack: {0}")]
    InvalidStack(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot group slices: only {0} heart-containing slices (need at least 3)")]
    Ungroupable(usize),
    #[error("network error: {0}")]
    Graph(#[from] GraphError),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    Exists(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
