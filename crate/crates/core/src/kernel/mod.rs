//! Small dense-array kernel: forward ops, a reverse-mode tape and Adam.
//!
//! Everything runs in `f32`. Only the operations the topology model needs
//! are provided.

mod array;
pub mod ops;
mod store;
mod tape;

pub use array::Array;
pub use ops::{gru_cell, layer_norm, linear, sigmoid, softmax, GruWeights};
pub use store::{AdamConfig, Gradients, ParamStore};
pub use tape::{GruVars, Tape, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
}
