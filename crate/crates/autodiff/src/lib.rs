//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The engine is a Wengert tape: forward calls on [`Graph`] record one node
//! per operation, `backward` replays the tape in reverse and accumulates
//! adjoints. Everything is generic over the scalar type through the
//! [`Scalar`] trait (`f32` or `f64`); pipelines that need double-precision
//! gradient checks instantiate `f64`, throwaway experiments can use `f32`.
//!
//! Evaluation is strictly sequential and allocation-order deterministic:
//! identical inputs produce bit-identical values and gradients across runs.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub use graph::{Graph, Var};
pub use nn::{Conv2d, Linear, ParamId, ParamStore};
pub use optim::Adam;
pub use tensor::Tensor;

/// Scalar type the engine is generic over: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for literals in generic code.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Concrete aliases for the common instantiations.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
