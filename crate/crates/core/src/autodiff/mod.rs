//! Reverse-mode kernels for the fixed encoder architecture.
//!
//! Each layer is a forward function returning its output plus a cache, and
//! a backward function mapping an output gradient (and the cache) to input
//! and parameter gradients. There is no general graph; the encoder chains
//! the kernels by hand.

mod adam;
mod checkpoint;
pub(crate) use checkpoint::{read_f64s, read_u32, read_u64, write_f64s};
mod gradcheck;
pub mod init;
mod ops;
mod store;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{read_store, write_store, STORE_MAGIC, STORE_VERSION};
pub use gradcheck::{grad_check, numeric_gradient, relative_error};
pub use ops::*;
pub use store::{GradBuffer, Param, ParamId, ParamStore};
pub use tensor::Tensor;
