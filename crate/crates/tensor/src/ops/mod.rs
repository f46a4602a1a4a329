//! Standard differentiable operations.

mod basic;
mod conv;
mod norm;
mod pool;

pub use basic::{add, concat_outer, mul, relu, reshape, sum};
pub use conv::{conv2d, conv2d_forward, ConvGeometry};
pub use norm::frozen_batch_norm;
pub use pool::max_pool2d;
