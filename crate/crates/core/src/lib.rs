//! Deep multi-scale hierarchical networks for single-image bokeh rendering.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod infer;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
