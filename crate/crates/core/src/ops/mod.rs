//! Primitive numerical operations every architecture is composed from.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::relu;
pub use conv::{conv2d, ConvKernel};
pub use linear::{linear_softmax_ce, softmax_cross_entropy};
pub use norm::{batch_norm, BatchNormState, Mode};
pub use pool::global_avg_pool;
