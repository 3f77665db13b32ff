//! Minimal reverse-mode differentiation and the kernels the network needs.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{ConvGeom, PadMode, Pads};
pub use params::{Bound, ParamStore};
