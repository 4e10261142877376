//! Minimal dense autograd engine used by the acoustic model and the
//! reference encoder.

pub mod graph;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;

pub use graph::{Grads, Graph, Var};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
