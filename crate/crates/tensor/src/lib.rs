//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The crate is deliberately small: a [`Tensor`] value type, a [`Tape`] that
//! records differentiable ops, a [`ParamStore`] of named trainable tensors,
//! an [`Adam`] optimizer and a flat binary [`checkpoint`] container.

pub mod adam;
pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, softmax_in_place, Tape, Var};
pub use tensor::Tensor;
