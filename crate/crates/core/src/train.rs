//! Initialization, SGD with momentum, and the train/evaluate loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_stats_updates, Eval, GradStore, ParamKind, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::forward::{forward_record, logits};
use crate::model::graph::ModelGraph;
use crate::ops::linear::argmax_rows;
use crate::ops::norm::Mode;
use crate::tensor::{Precision, Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is divided by 10.
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
    pub precision: Precision,
    /// Random 4-pixel-padded crops and horizontal flips.
    #[serde(default)]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 2,
            decay_epochs: Vec::new(),
            seed: 0,
            precision: Precision::Single,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `lr0 / 10^k` where `k` counts decay epochs not after `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr0 / 10f64.powi(k as i32)
}

/// Kaiming normal weights: convolutions with variance `2 / fan_out`
/// (`c_out * k * k`), the head with `2 / fan_in`. Norm scales are 1,
/// shifts and biases 0, running statistics reset.
pub fn kaiming_init<T: Scalar>(g: &mut ModelGraph<T>, seed: u64) {
    init_params(&mut g.params, seed);
    g.reset_stats();
}

pub fn init_params<T: Scalar>(params: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in params.iter_mut() {
        let s = p.value.shape();
        let fill = match p.kind {
            ParamKind::ConvWeight => Some((2.0 / (s.n * s.h * s.w) as f64).sqrt()),
            ParamKind::LinearWeight => Some((2.0 / (s.c * s.h * s.w) as f64).sqrt()),
            ParamKind::NormScale => {
                p.value.fill(T::one());
                None
            }
            ParamKind::NormShift | ParamKind::Bias => {
                p.value.fill(T::zero());
                None
            }
        };
        if let Some(std) = fill {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in p.value.data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor4<T>>,
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub step: usize,
    pub epoch: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        OptimizerState {
            velocity: params.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect(),
            lr: T::from_f64_lossy(cfg.lr0),
            momentum: T::from_f64_lossy(cfg.momentum),
            weight_decay: T::from_f64_lossy(cfg.weight_decay),
            step: 0,
            epoch: 0,
        }
    }
}

/// `v <- m v + (g + wd w)`, `w <- w - lr v`. Decay skips norm parameters
/// and biases.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &GradStore<T>, s: &mut OptimizerState<T>) -> Result<()> {
    if grads.len() != params.len() || s.velocity.len() != params.len() {
        return Err(Error::Internal(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            s.velocity.len()
        )));
    }
    for (id, p) in params.iter_mut() {
        let g = grads.get(id);
        let v = &mut s.velocity[id.0];
        if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::Internal(format!("gradient shape {} for parameter `{}` {}", g.shape(), p.name, p.value.shape())));
        }
        let wd = if p.kind.decays() { s.weight_decay } else { T::zero() };
        for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = s.momentum * *vi + (gi + wd * *w);
            *w -= s.lr * *vi;
        }
    }
    s.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// One recorded train-mode step on a batch. Returns the batch loss.
pub fn train_step<T: Scalar>(g: &mut ModelGraph<T>, x: Tensor4<T>, labels: &[usize], s: &mut OptimizerState<T>) -> Result<T> {
    let (loss, node, tape) = forward_record(g, Mode::Train, x, labels)?;
    let grads = tape.backward(node)?;
    let updates = tape.stats_updates().to_vec();
    drop(tape);
    apply_stats_updates(&mut g.stats, &updates, g.momentum);
    sgd_step(&mut g.params, &grads, s)?;
    Ok(loss)
}

/// Inference-mode class predictions.
pub fn predict<T: Scalar>(g: &ModelGraph<T>, x: &Tensor4<T>) -> Result<Vec<usize>> {
    let mut ev = Eval::new(g.context(Mode::Infer));
    let z = logits(g, &mut ev, x)?;
    Ok(argmax_rows(&z))
}

/// Fraction of argmax-correct predictions in inference mode.
pub fn evaluate<T: Scalar>(g: &ModelGraph<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk)?;
        correct += predict(g, &x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn augment<T: Scalar>(x: &mut Tensor4<T>, rng: &mut ChaCha8Rng) {
    let s = x.shape();
    let src = x.clone();
    for n in 0..s.n {
        let (dy, dx) = (rng.random_range(-4i64..=4), rng.random_range(-4i64..=4));
        let flip = rng.random_bool(0.5);
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let sw = if flip { s.w - 1 - w } else { w } as i64 + dx;
                    let sh = h as i64 + dy;
                    let v = if sh < 0 || sw < 0 || sh >= s.h as i64 || sw >= s.w as i64 {
                        T::zero()
                    } else {
                        src.at(n, c, sh as usize, sw as usize)
                    };
                    let i = x.index(n, c, h, w);
                    x.data_mut()[i] = v;
                }
            }
        }
    }
}

/// Shuffled minibatch SGD for `cfg.epochs` epochs, evaluating on `test`
/// after each. `on_epoch` sees every record as it is produced.
pub fn train_and_evaluate<T: Scalar>(
    g: &mut ModelGraph<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("training and test sets must be non-empty".into()));
    }
    let mut state = OptimizerState::new(&g.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        state.lr = T::from_f64_lossy(lr);
        state.epoch = epoch;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = train.batch::<T>(chunk)?;
            if cfg.augment {
                augment(&mut x, &mut rng);
            }
            let loss = train_step(g, x, &y, &mut state)?;
            if !loss.is_finite() {
                return Err(Error::Internal(format!("loss diverged at epoch {epoch}, step {}", state.step)));
            }
            total += loss.to_f64_lossy();
            batches += 1;
        }
        let test_accuracy = evaluate(g, test, cfg.batch_size.max(256))?;
        let rec = EpochRecord { epoch, lr, train_loss: total / batches as f64, test_accuracy, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok(history)
}
