//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major tensors, a tape-style graph
//! built per forward pass, analytic backward rules for every op, an Adam
//! optimizer, and a binary checkpoint format. There is no broadcasting beyond
//! bias-add, no dynamic shapes, and no parallel execution inside a pass, which
//! keeps training trajectories bitwise reproducible under a fixed seed.
//!
//! Training normally runs in `f32`; the whole graph is generic over
//! [`Scalar`] so gradient verification can run the same code in `f64`, where
//! central finite differences have enough headroom.

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod init;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::TensorError;
pub use gradcheck::{check_loss_gradients, GradCheckReport};
pub use graph::{Graph, Var};
pub use init::xavier_uniform;
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::TensorData;

pub type Result<V> = std::result::Result<V, TensorError>;
