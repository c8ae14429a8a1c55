//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The crate is organised around a [`Tape`]: every operation records enough
//! information during the forward pass to drive a single reverse sweep that
//! produces gradients for all leaf values that asked for them. Operations are
//! deterministic — reductions always run in row-major order — so repeated runs
//! over the same inputs produce bit-identical values and gradients.
//!
//! Everything is generic over the scalar type through the [`Real`] trait
//! (implemented for `f32` and `f64`); the `*64` aliases below are the
//! concrete types used by downstream crates.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckError, GradEntry, GradReport};
pub use params::{Bindings, ParamId, ParamStore, Parameter, StoreError};
pub use scalar::{fl, Real};
pub use tape::{Gradients, Tape, TapeError, ValueId};
pub use tensor::{ShapeError, Tensor};

/// Concrete 64-bit instantiations; the default precision for training and
/// gradient checking.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Gradients64 = Gradients<f64>;

/// 32-bit instantiations, available for memory-constrained inference.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type ParamStore32 = ParamStore<f32>;
