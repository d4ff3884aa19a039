//! Helpers shared by integration tests.

use mgnetlab::Tensor4;

/// Convolution by direct summation, zero padding `(k - 1) / 2`.
pub fn direct(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: Option<&[f64]>, stride: usize) -> Tensor4<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let pad = (k - 1) / 2;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let mut y = Tensor4::zeros([xs.n, ws.n, oh, ow]);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let i = y.index(n, co, oy, ox);
                    y.data_mut()[i] = acc;
                }
            }
        }
    }
    y
}

/// Uniform entries in `[-1, 1)` from a fixed LCG.
pub fn tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut s = seed;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor4::from_vec(shape, data).unwrap()
}
