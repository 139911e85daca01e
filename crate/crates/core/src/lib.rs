#![cfg_attr(not(test), no_std)]
extern crate alloc;
pub mod attention;
pub mod capsule;
pub mod check;
mod error;
pub mod graph;
pub mod layers;
pub mod model;
mod ops;
pub mod rng;
pub mod tensor;
pub use error::{CoreError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Element, Tensor};
