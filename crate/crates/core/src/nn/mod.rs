//! Minimal tensors, parameter sets and a reverse-mode autodiff tape.

pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{ConvGeom, Graph, Var};
pub use params::{Param, Params};
pub use tensor::{Real, Tensor};
