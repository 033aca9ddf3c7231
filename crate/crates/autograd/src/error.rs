use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    /// Operand shapes do not fit the operation. `node` names the op or layer.
    #[error("shape error in `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing gradient: {0}")]
    MissingGradient(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err<T>(node: &str, detail: impl Into<String>) -> Result<T> {
    Err(AutogradError::Shape {
        node: node.to_string(),
        detail: detail.into(),
    })
}
