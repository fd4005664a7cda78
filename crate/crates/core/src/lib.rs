pub mod attention;
pub mod config;
pub mod error;
pub mod glow;
pub mod io;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Grads, Mask, Tape, Tensor, Var};
