use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Frames or chunks delivered out of order.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// Input values that violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A tensor required by the topology is absent from the weight set.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    /// Non-finite intermediate value.
    #[error("numeric failure in {module}: {detail}")]
    Numeric {
        module: &'static str,
        detail: String,
    },

    /// Snapshot blob could not be decoded.
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn sequencing(msg: impl Into<String>) -> Self {
        Error::Sequencing(msg.into())
    }
}
