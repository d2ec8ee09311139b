//! Minimal `f64` tensor engine with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{BnUpdate, Gradients, Graph, Mode, Var, NORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{Declarations, Init, ParamEntry, ParamKind, ParamSpec, ParamStore, Scope};
pub use tensor::Tensor;
