//! Dense tensors and a reverse-mode gradient tape.

mod array;
pub mod checkpoint;
mod gradcheck;
mod ops;
mod scalar;
mod tape;

pub use array::Tensor;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use ops::{sigmoid, Elementwise, Reduction};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{BackwardCtx, BackwardFn, Tape, Var};
