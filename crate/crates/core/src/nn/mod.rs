//! Neural-network primitives recorded on the [`Tape`](crate::tensor::Tape).
//!
//! Each submodule adds forward methods to `Tape` and provides the matching
//! backward rule.

pub(crate) mod activation;
pub(crate) mod conv;
mod dropout;
pub(crate) mod linear;
mod loss;
pub(crate) mod norm;
pub(crate) mod pool;

pub use activation::PReLUState;
pub use conv::conv_out_dim;
pub use norm::{BatchNormState, BatchStats, Mode, BN_EPSILON, BN_MOMENTUM, LN_EPSILON};

/// Dropout rate used by the 12-layer MLP.
pub const MLP_DROPOUT: f64 = 0.2;
