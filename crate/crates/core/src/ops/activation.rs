use crate::tensor::{Scalar, Tensor4};

/// `max(0, x)` elementwise.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output. The subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(out: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    out.zip_with(dy, |o, g| if o > T::zero() { g } else { T::zero() })
        .expect("relu output and gradient share a shape")
}
