use crate::error::Result;
use crate::ops::conv::output_dim;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Mean over each `h x w` plane; output is `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let inv = T::one() / T::from_usize(p).expect("plane size");
    let data = x.data().chunks_exact(p).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape4, dy: &Tensor4<T>) -> Tensor4<T> {
    let p = input.plane();
    let inv = T::one() / T::from_usize(p).expect("plane size");
    let mut dx = Vec::with_capacity(input.len());
    for &g in dy.data() {
        dx.extend(std::iter::repeat(g * inv).take(p));
    }
    Tensor4::from_vec(input, dx).expect("input shape")
}

/// 3x3 max pooling with stride 2 and padding 1 (padded sites never win).
/// Returns the pooled tensor and, for each output, the flat input index
/// that produced it.
pub fn max_pool_3x3_s2<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let s = x.shape();
    let (oh, ow) = (output_dim(s.h, 3, 2), output_dim(s.w, 3, 2));
    let out_shape = Shape4::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    for plane_idx in 0..s.n * s.c {
        let base = plane_idx * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * s.w + ix as usize;
                        if x.data()[i] > best || best_i == usize::MAX {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (Tensor4::from_vec(out_shape, out).expect("pooled shape"), arg)
}

pub fn max_pool_backward<T: Scalar>(input: Shape4, argmax: &[usize], dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut dx = Tensor4::zeros(input);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_plane() {
        let x = Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
    }

    #[test]
    fn constant_plane() {
        let x = Tensor4::<f64>::full([2, 3, 5, 7], -1.25);
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), Shape4::new(2, 3, 1, 1));
        assert!(y.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn per_channel_means() {
        let x = Tensor4::<f64>::from_vec([1, 2, 2, 2], vec![0.0, 0.0, 0.0, 4.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn max_pool_halves_and_routes_gradient() {
        let x = Tensor4::<f64>::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let (y, arg) = max_pool_3x3_s2(&x);
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = max_pool_backward(x.shape(), &arg, &Tensor4::full([1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx.at(0, 0, 1, 1), 1.0);
    }
}
