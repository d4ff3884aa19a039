//! Fully connected classifier head with softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// `logits = features * W^T + b`. `features` is flattened per sample;
/// `w` is `(classes, features, 1, 1)`. Output is `(n, classes, 1, 1)`.
pub fn linear<T: Scalar>(features: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<Tensor4<T>> {
    let fs = features.shape();
    let ws = w.shape();
    let dim = fs.sample();
    if ws.c * ws.h * ws.w != dim {
        return Err(Error::shape(format!(
            "linear layer expects {} features, got {dim} (input {fs})",
            ws.c * ws.h * ws.w
        )));
    }
    let classes = ws.n;
    if b.len() != classes {
        return Err(Error::shape(format!("bias has {} entries for {classes} classes", b.len())));
    }
    let mut out = vec![T::zero(); fs.n * classes];
    for row in out.chunks_exact_mut(classes) {
        row.copy_from_slice(b);
    }
    T::gemm(fs.n, dim, classes, T::one(), features.data(), dim, 1, w.data(), 1, dim, T::one(), &mut out, classes, 1);
    Tensor4::from_vec(Shape4::new(fs.n, classes, 1, 1), out)
}

/// Gradients of [`linear`]: `(d_features, d_w, d_b)`.
pub fn linear_backward<T: Scalar>(
    features: &Tensor4<T>,
    w: &Tensor4<T>,
    dlogits: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let n = features.shape().n;
    let dim = features.shape().sample();
    let classes = w.shape().n;
    let mut dfeat = Tensor4::zeros(features.shape());
    T::gemm(n, classes, dim, T::one(), dlogits.data(), classes, 1, w.data(), dim, 1, T::zero(), dfeat.data_mut(), dim, 1);
    let mut dw = Tensor4::zeros(w.shape());
    T::gemm(classes, n, dim, T::one(), dlogits.data(), 1, classes, features.data(), dim, 1, T::zero(), dw.data_mut(), dim, 1);
    let mut db = vec![T::zero(); classes];
    for row in dlogits.data().chunks_exact(classes) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (dfeat, dw, db)
}

/// Numerically stable softmax per row of `(n, classes, 1, 1)` logits.
pub fn softmax<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let classes = logits.shape().c;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

pub fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against `labels`, using the
/// log-sum-exp form so large logits do not overflow.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<T> {
    let s = logits.shape();
    check_labels(labels, s.n, s.c)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(s.c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[label];
    }
    Ok(total / T::from_usize(s.n).unwrap())
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(p - onehot) / n`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor4<T>, labels: &[usize], upstream: T) -> Tensor4<T> {
    let s = probs.shape();
    let scale = upstream / T::from_usize(s.n).unwrap();
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_exact_mut(s.c).zip(labels) {
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v = *v * scale);
    }
    g
}

/// Combined head: logits and mean loss.
pub fn linear_softmax_ce<T: Scalar>(
    features: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    labels: &[usize],
) -> Result<(T, Tensor4<T>)> {
    let logits = linear(features, w, b)?;
    let loss = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, logits))
}

/// Index of the largest logit per sample; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor4<T>) -> Vec<usize> {
    let classes = logits.shape().c;
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
