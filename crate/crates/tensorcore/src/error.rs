use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {phase} at node {node} ({op})")]
    NonFinite {
        phase: &'static str,
        node: usize,
        op: &'static str,
    },

    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("leaf node {node} is not reachable from the loss")]
    DisconnectedGraph { node: usize },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
