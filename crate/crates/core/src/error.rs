use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller violated a shape or slot-count contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite activation at step {step}, layer {layer}")]
    NumericalDivergence { step: usize, layer: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("instance too large for the reference oracle: {0}")]
    OracleRefused(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialize(String),
}

impl SimError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
