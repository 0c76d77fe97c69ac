//! Dense 64-bit tensors with tape-based reverse-mode differentiation, the
//! layer set used by the extraction and classification networks, Adam, and
//! a named-tensor checkpoint format.

pub mod checkpoint;
mod conv;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod layers;
mod lstm;
pub mod optim;
mod params;
mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_inputs};
pub use graph::{adaptive_windows, Conv1dSpec, CustomOp, Gradients, Graph, Var};
pub use optim::{adam_step, AdamState, LrAction, LrScheduler};
pub use params::{fnv1a, Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
