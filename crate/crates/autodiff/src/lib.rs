//! Minimal dense tensors and a reverse-mode differentiation tape.
//!
//! Every operation the re-identification network needs is recorded on a
//! [`Tape`]; [`Tape::backward`] replays the record in reverse and returns the
//! gradient of a scalar loss with respect to every variable that asked for one.
//! The numeric type is generic so the same code paths can be checked against
//! finite differences in double precision and trained in single precision.

mod error;
pub mod gradcheck;
mod ops;
mod optim;
mod tape;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use error::{Result, TensorError};
pub use ops::conv::{conv_output_extent, Padding};
pub use optim::{sgd_step, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts a literal or an `f64` intermediate.
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
