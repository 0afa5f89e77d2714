pub mod data;
pub mod error;
pub mod gating;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
