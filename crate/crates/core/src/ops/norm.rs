//! Per-channel batch normalization over `(n, h, w)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Scale/shift plus running statistics for one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(DEFAULT_EPS),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x`. Train mode uses batch statistics and folds them into
    /// the running estimates; infer mode reads only the running estimates.
    pub fn apply(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match mode {
            Mode::Train => {
                let (y, cache) = train_forward(x, &self.gamma, &self.beta, self.eps)?;
                update_running(
                    &mut self.running_mean,
                    &mut self.running_var,
                    &cache,
                    self.momentum,
                    x.shape().n * x.shape().plane(),
                );
                Ok(y)
            }
            Mode::Infer => {
                infer_forward(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, self.eps)
            }
        }
    }
}

/// Applies `batch_norm` in the given mode.
pub fn batch_norm<T: Scalar>(x: &Tensor4<T>, s: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor4<T>> {
    s.apply(x, mode)
}

/// Saved values for the train-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn check_channels<T: Scalar>(x: &Tensor4<T>, c: usize) -> Result<()> {
    if x.shape().c != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels applied to input {}",
            x.shape()
        )));
    }
    Ok(())
}

pub fn train_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let s = x.shape();
    check_channels(x, gamma.len())?;
    let p = s.plane();
    let m = T::from_usize(s.n * p).expect("count");
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in mean.iter_mut().enumerate() {
            let start = x.index(n, c, 0, 0);
            *acc += x.data()[start..start + p].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = x.index(n, c, 0, 0);
            let mu = mean[c];
            var[c] += x.data()[start..start + p].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = x.index(n, c, 0, 0);
            for i in start..start + p {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                x_hat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }
    Ok((y, BnCache { x_hat, inv_std, mean, var }))
}

/// Running-statistics update; the variance estimate is unbiased.
pub fn update_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BnCache<T>,
    momentum: T,
    count: usize,
) {
    let correction = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    let keep = T::one() - momentum;
    for c in 0..running_mean.len() {
        running_mean[c] = keep * running_mean[c] + momentum * cache.mean[c];
        running_var[c] = keep * running_var[c] + momentum * cache.var[c] * correction;
    }
}

pub fn infer_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    check_channels(x, gamma.len())?;
    let p = s.plane();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] / (running_var[c] + eps).sqrt();
            let shift = beta[c] - running_mean[c] * scale;
            let start = x.index(n, c, 0, 0);
            y.data_mut()[start..start + p].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(y)
}

/// Full chain rule through the batch statistics.
pub fn train_backward<T: Scalar>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let p = s.plane();
    let m = T::from_usize(s.n * p).expect("count");
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = dy.index(n, c, 0, 0);
            for i in start..start + p {
                let g = dy.data()[i];
                dbeta[c] += g;
                dgamma[c] += g * cache.x_hat.data()[i];
            }
        }
    }
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma[c] * cache.inv_std[c] / m;
            let start = dy.index(n, c, 0, 0);
            for i in start..start + p {
                dx.data_mut()[i] = k * (m * dy.data()[i] - dbeta[c] - cache.x_hat.data()[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through the affine inference-mode map. `x_hat` is the input
/// normalized with the running statistics.
pub fn infer_backward<T: Scalar>(
    x_hat: &Tensor4<T>,
    gamma: &[T],
    running_var: &[T],
    eps: T,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let p = s.plane();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] / (running_var[c] + eps).sqrt();
            let start = dy.index(n, c, 0, 0);
            for i in start..start + p {
                let g = dy.data()[i];
                dbeta[c] += g;
                dgamma[c] += g * x_hat.data()[i];
                dx.data_mut()[i] = g * scale;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor4<f64> {
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 23) as f64) * 0.3 - 2.0).collect();
        Tensor4::from_vec([2, 3, 4, 4], data).unwrap()
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = sample();
        let mut s = BatchNormState::<f64>::new(3);
        let y = batch_norm(&x, &mut s, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 4, i % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
        assert!(s.running_mean.iter().any(|&v| v != 0.0));
        assert!(s.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = sample();
        let mut s = BatchNormState::<f64>::new(3);
        s.gamma = vec![0.0; 3];
        s.beta = vec![0.5, -1.0, 2.0];
        let y = batch_norm(&x, &mut s, Mode::Train).unwrap();
        for c in 0..3 {
            assert!((0..2).all(|n| (0..16).all(|i| y.at(n, c, i / 4, i % 4) == s.beta[c])));
        }
    }

    #[test]
    fn infer_mode_with_unit_stats() {
        let x = sample();
        let mut s = BatchNormState::<f64>::new(3);
        let before = s.clone();
        let y = batch_norm(&x, &mut s, Mode::Infer).unwrap();
        let want = x.map(|v| v / (1.0 + DEFAULT_EPS).sqrt());
        assert!(y.max_abs_diff(&want).unwrap() < 1e-15);
        assert_eq!(s, before, "infer mode must not touch running statistics");
    }

    #[test]
    fn channel_mismatch() {
        let mut s = BatchNormState::<f64>::new(2);
        assert!(matches!(batch_norm(&sample(), &mut s, Mode::Train), Err(Error::Shape { .. })));
    }
}
