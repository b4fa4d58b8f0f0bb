//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! Every forward pass records onto a [`Tape`]; calling [`Tape::backward`] on a
//! scalar walks the tape in reverse and returns [`Gradients`] for every leaf
//! that requires them. Convolutions are lowered to im2col + GEMM so that
//! training small image networks on a CPU is practical.
//!
//! The engine is generic over [`Real`] (`f32` and `f64`): models train in
//! `f32`, while finite-difference checks run the same code paths in `f64`.

mod conv;
mod error;
pub mod init;
mod ops;
mod optim;
mod params;
mod tape;

pub use conv::Conv2dOptions;
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};

/// Floating point element type supported by the engine.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into the engine's element type.
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}
