//! Tensors with reverse-mode autodiff, neural-network primitives, an
//! architecture IR with the EraseReLU rewrite, a deterministic training
//! harness and a gradient-shattering analysis.

pub mod arch;
pub mod erase;
pub mod error;
pub mod io;
mod linalg;
pub mod nn;
pub mod rng;
pub mod shatter;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::CounterRng;
pub use tensor::{DType, Fill, Primitive, Scalar, Tape, Tensor, Var};
