//! Minimal CPU neural-network substrate: layers with explicit forward/backward
//! passes over `ndarray` tensors, generic over `f32`/`f64`.
//!
//! Training uses `f32`; gradient verification runs the same code in `f64`.
//! Layers own their parameters, gradients, and forward caches; a single
//! controller drives forward/backward/update, so nothing here locks.

pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod ops;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;

use ndarray::{ArrayViewD, ArrayViewMutD, ScalarOperand};
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type for all tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float
    + ScalarOperand
    + ndarray::LinalgScalar
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Display
    + Debug
    + Send
    + Sync
    + serde::Serialize
    + 'static
{
    const DTYPE: Dtype;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}
impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// On-disk element type tag for checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Lossless-enough cast from f64 into the working element type.
#[inline]
pub fn fromf<F: Scalar>(v: f64) -> F {
    F::from(v).expect("f64 -> scalar cast")
}

/// What a parameter does; decides weight-decay treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

/// A mutable view of one trainable tensor plus its gradient accumulator.
pub struct Param<'a, F: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// A read-only named tensor (parameters and buffers) for checkpointing.
pub struct StateEntry<'a, F: Scalar> {
    pub name: String,
    pub value: ArrayViewD<'a, F>,
}

/// Mutable counterpart of [`StateEntry`] used when loading checkpoints.
pub struct StateEntryMut<'a, F: Scalar> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
}

/// Fixed batch-chunk width for parallel convolution. Chunk boundaries are a
/// constant so reductions happen in a deterministic order at any thread count.
pub const PAR_CHUNK: usize = 8;
