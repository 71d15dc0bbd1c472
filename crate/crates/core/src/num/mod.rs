//! Dense `f64` tensor kernel with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major buffer (1-D or 2-D here). Plain
//! `Tensor` methods compute values only; the same operations recorded
//! through a [`GradTape`] additionally build a backward pass. One tape per
//! training step; tensors without gradient tracking are freely shareable
//! across threads.

pub mod adam;
pub mod check;
pub(crate) mod kernels;
pub mod tape;
pub mod tensor;
pub mod track;

pub use adam::Adam;
pub use check::finite_diff_check;
pub use tape::{GradStore, GradTape};
pub use tensor::{NodeId, Tensor};

/// Negative slope of the leaky rectifier used by the graph layer.
pub const LEAKY_SLOPE: f64 = 0.01;
