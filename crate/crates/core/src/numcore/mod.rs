//! Dense f64 tensors, a single-use differentiation tape, and an Adam optimizer.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, OptimizerState};
pub use params::{CheckpointHeader, ParamId, ParamStore};
pub use tape::{Gradients, Segment, Tape, Var, LOG_FLOOR};
pub use tensor::{matmul, Tensor};
