//! Inputs shared by the benchmarks in `benches/`.

use mgnetlab::{synthetic_batch, Scalar, Tensor4};

/// Deterministic uniform tensor of the given shape.
pub fn input<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor4<T> {
    synthetic_batch(seed, shape, 1).expect("valid shape").images.cast()
}
