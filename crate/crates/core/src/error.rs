use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("simulation diverged: {0}")]
    Diverged(String),
    #[error("degenerate triangle: gripper positions are collinear")]
    DegenerateTriangle,
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autograd(#[from] autograd::AutogradError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.as_ref().display().to_string();
    move |source| Error::Io { path, source }
}
