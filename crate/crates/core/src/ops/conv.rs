//! Zero-padded 2-D cross-correlation with stride 1 or 2.
//!
//! The kernel is lowered to a patch matrix (im2col) per sample and
//! multiplied with the flattened weights. For odd kernel size `k` the
//! padding is `(k - 1) / 2` on every side, so stride 1 preserves the spatial
//! size and stride 2 yields `ceil(dim / 2)`; output index `i` reads padded
//! input rows starting at `stride * i`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Kernel sizes the models use: 1x1 projections, 3x3 blocks, 7x7 stems.
pub const SUPPORTED_KERNELS: [usize; 3] = [1, 3, 7];

/// Convolution weights `(c_out, c_in, k, k)` with stride and optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    weights: Tensor4<T>,
    stride: usize,
    bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor4<T>, stride: usize, bias: Option<Vec<T>>) -> Result<Self> {
        let s = weights.shape();
        validate_geometry(s, stride)?;
        if let Some(b) = &bias {
            if b.len() != s.n {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    s.n
                )));
            }
        }
        Ok(ConvKernel { weights, stride, bias })
    }

    pub fn weights(&self) -> &Tensor4<T> {
        &self.weights
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn size(&self) -> usize {
        self.weights.shape().h
    }

    pub fn padding(&self) -> usize {
        (self.size() - 1) / 2
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_raw(x, &self.weights, self.bias.as_deref(), self.stride)
    }
}

/// Applies `k` to `x`.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    k.apply(x)
}

pub(crate) fn validate_geometry(w: Shape4, stride: usize) -> Result<()> {
    if w.h != w.w || !SUPPORTED_KERNELS.contains(&w.h) {
        return Err(Error::Config(format!(
            "unsupported kernel size {}x{} (expected square 1, 3 or 7)",
            w.h, w.w
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("unsupported stride {stride} (expected 1 or 2)")));
    }
    Ok(())
}

/// Output spatial size for one dimension.
#[inline]
pub fn output_dim(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: Shape4, w: Shape4, stride: usize) -> Result<Self> {
        validate_geometry(w, stride)?;
        if x.c != w.c {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {} (input {x}, kernel {w})",
                w.c, x.c
            )));
        }
        let k = w.h;
        Ok(Geometry {
            c_in: x.c,
            h: x.h,
            w: x.w,
            k,
            stride,
            pad: (k - 1) / 2,
            oh: output_dim(x.h, k, stride),
            ow: output_dim(x.w, k, stride),
        })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1 stride-1 convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

impl Geometry {
    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // ox * s + kx - pad >= 0
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        // ox * s + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / s + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Fills `cols` (`patch_rows x out_plane`, row-major) from one sample.
fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let p = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `cols` back into one sample's input gradient.
fn col2im_add<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let p = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let first = lo * g.stride + kx - g.pad;
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(src_row) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution on raw weights `(c_out, c_in, k, k)`.
pub fn conv2d_raw<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = Geometry::new(xs, ws, stride)?;
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::shape(format!("bias has {} entries for {} channels", b.len(), ws.n)));
        }
    }
    let c_out = ws.n;
    let kk = g.patch_rows();
    let p = g.out_plane();
    let mut out = Tensor4::zeros(Shape4::new(xs.n, c_out, g.oh, g.ow));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    let out_sample = c_out * p;
    for n in 0..xs.n {
        let xn = x.sample(n);
        let patches: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut cols);
            &cols
        };
        let yn = &mut out.data_mut()[n * out_sample..(n + 1) * out_sample];
        T::gemm(c_out, kk, p, T::one(), w.data(), kk, 1, patches, p, 1, T::zero(), yn, p, 1);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                yn[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the upstream gradient `dy`.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Tensor4<T>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    stride: usize,
    dy: &Tensor4<T>,
    want_dx: bool,
    want_db: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = Geometry::new(xs, ws, stride)?;
    let c_out = ws.n;
    let expect = Shape4::new(xs.n, c_out, g.oh, g.ow);
    if dy.shape() != expect {
        return Err(Error::shape(format!("upstream gradient {} but output is {expect}", dy.shape())));
    }
    let kk = g.patch_rows();
    let p = g.out_plane();
    let pointwise = g.is_pointwise();
    let mut dw = Tensor4::zeros(ws);
    let mut dx = want_dx.then(|| Tensor4::zeros(xs));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcols = if want_dx && !pointwise { vec![T::zero(); kk * p] } else { Vec::new() };
    let out_sample = c_out * p;
    for n in 0..xs.n {
        let dyn_ = &dy.data()[n * out_sample..(n + 1) * out_sample];
        let xn = x.sample(n);
        let patches: &[T] = if pointwise {
            xn
        } else {
            im2col(&g, xn, &mut cols);
            &cols
        };
        // dW += dY_n * cols^T
        T::gemm(c_out, p, kk, T::one(), dyn_, p, 1, patches, 1, p, T::one(), dw.data_mut(), kk, 1);
        if let Some(dx) = dx.as_mut() {
            let s = xs.sample();
            let dxn = &mut dx.data_mut()[n * s..(n + 1) * s];
            if pointwise {
                // dX_n = W^T * dY_n, written straight into the sample.
                T::gemm(kk, c_out, p, T::one(), w.data(), 1, kk, dyn_, p, 1, T::zero(), dxn, p, 1);
            } else {
                T::gemm(kk, c_out, p, T::one(), w.data(), 1, kk, dyn_, p, 1, T::zero(), &mut dcols, p, 1);
                col2im_add(&g, &dcols, dxn);
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = vec![T::zero(); c_out];
        for n in 0..xs.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * out_sample + co * p;
                *acc += dy.data()[start..start + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(ConvGrads { dx, dw, db })
}
