//! Reverse-mode differentiation over the primitive ops.
//!
//! Model code is written once against [`Executor`]. [`Eval`] runs it on
//! plain tensors; [`Tape`] runs the same primitive kernels while recording a
//! node per primitive so [`Tape::backward`] can produce parameter gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{activation, conv, linear, norm, pool};
use crate::ops::norm::{BnCache, Mode};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is, which drives initialization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Weight decay applies to weights only, never to norm parameters or
    /// biases.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Running statistics of one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Parameters and statistics slot of one batch-norm site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// First of `sites` consecutive running-statistics slots, one per
    /// application of the unit within a forward pass.
    pub stats: usize,
    pub sites: usize,
}

/// Hands each application of a normalization its own statistics slot:
/// the k-th use of a slot in one pass reads and updates `stats + k`.
#[derive(Debug, Default)]
struct SiteCounter(Vec<usize>);

impl SiteCounter {
    fn next(&mut self, slot: NormSlot) -> Result<NormSlot> {
        if self.0.len() <= slot.stats {
            self.0.resize(slot.stats + 1, 0);
        }
        let k = self.0[slot.stats];
        if k >= slot.sites {
            return Err(Error::Config(format!("normalization slot {} used more than {} times in one pass", slot.stats, slot.sites)));
        }
        self.0[slot.stats] += 1;
        Ok(NormSlot { stats: slot.stats + k, sites: 1, ..slot })
    }
}

/// Read-only view of everything a forward pass needs.
#[derive(Clone, Copy)]
pub struct Context<'a, T> {
    pub params: &'a ParamStore<T>,
    pub stats: &'a [RunningStats<T>],
    pub eps: T,
    pub mode: Mode,
}

/// Batch statistics observed by a train-mode normalization, to be folded
/// into the running estimates once the pass is done.
#[derive(Debug, Clone)]
pub struct StatsUpdate<T> {
    pub stats: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Applies collected updates to running statistics.
pub fn apply_stats_updates<T: Scalar>(stats: &mut [RunningStats<T>], updates: &[StatsUpdate<T>], momentum: T) {
    for u in updates {
        let cache = BnCache { x_hat: Tensor4::zeros([1, 1, 1, 1]), inv_std: Vec::new(), mean: u.mean.clone(), var: u.var.clone() };
        let s = &mut stats[u.stats];
        norm::update_running(&mut s.mean, &mut s.var, &cache, momentum, u.count);
    }
}

/// The primitive vocabulary shared by plain and recorded evaluation.
pub trait Executor<T: Scalar> {
    type Var: Clone;

    fn value<'v>(&'v self, v: &'v Self::Var) -> &'v Tensor4<T>;
    fn input(&mut self, x: Tensor4<T>) -> Self::Var;
    fn param(&mut self, id: ParamId) -> Self::Var;
    fn conv(&mut self, x: &Self::Var, w: ParamId, bias: Option<ParamId>, stride: usize) -> Result<Self::Var>;
    fn batch_norm(&mut self, x: &Self::Var, slot: NormSlot) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn max_pool(&mut self, x: &Self::Var) -> Self::Var;
    fn global_avg_pool(&mut self, x: &Self::Var) -> Self::Var;
    fn linear(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var>;
    /// Mean softmax cross-entropy as a `1x1x1x1` tensor.
    fn softmax_ce(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var>;
    fn sum(&mut self, x: &Self::Var) -> Self::Var;
}

fn bn_forward<T: Scalar>(
    ctx: &Context<'_, T>,
    x: &Tensor4<T>,
    slot: NormSlot,
) -> Result<(Tensor4<T>, BnSaved<T>, Option<StatsUpdate<T>>)> {
    let gamma = ctx.params.value(slot.gamma).data();
    let beta = ctx.params.value(slot.beta).data();
    match ctx.mode {
        Mode::Train => {
            let (y, cache) = norm::train_forward(x, gamma, beta, ctx.eps)?;
            let update = StatsUpdate {
                stats: slot.stats,
                mean: cache.mean.clone(),
                var: cache.var.clone(),
                count: x.shape().n * x.shape().plane(),
            };
            Ok((y, BnSaved::Train { x_hat: cache.x_hat, inv_std: cache.inv_std }, Some(update)))
        }
        Mode::Infer => {
            let st = &ctx.stats[slot.stats];
            let ones = vec![T::one(); gamma.len()];
            let zeros = vec![T::zero(); gamma.len()];
            let x_hat = norm::infer_forward(x, &ones, &zeros, &st.mean, &st.var, ctx.eps)?;
            let y = norm::infer_forward(x, gamma, beta, &st.mean, &st.var, ctx.eps)?;
            Ok((y, BnSaved::Infer { x_hat }, None))
        }
    }
}

fn conv_forward<T: Scalar>(
    ctx: &Context<'_, T>,
    x: &Tensor4<T>,
    w: ParamId,
    bias: Option<ParamId>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let b = bias.map(|id| ctx.params.value(id).data());
    conv::conv2d_raw(x, ctx.params.value(w), b, stride)
}

fn ce_forward<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let loss = linear::softmax_cross_entropy(logits, labels)?;
    let probs = linear::softmax(logits);
    Ok((Tensor4::full([1, 1, 1, 1], loss), probs))
}

fn scalar_tensor<T: Scalar>(v: T) -> Tensor4<T> {
    Tensor4::full([1, 1, 1, 1], v)
}

/// Folds ReLU masks and pooling choices into a fingerprint, so callers can
/// tell whether two passes took the same piecewise-linear branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSignature(u64);

impl Default for BranchSignature {
    fn default() -> Self {
        BranchSignature(0xcbf2_9ce4_8422_2325)
    }
}

impl BranchSignature {
    /// splitmix64 finalizer over the running state, so a flip in any bit
    /// of any word reaches every bit of the result.
    fn mix(&mut self, word: u64) {
        let mut z = (self.0 ^ word).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        self.0 = z ^ (z >> 31);
    }

    fn absorb_mask<T: Scalar>(&mut self, x: &Tensor4<T>) {
        for chunk in x.data().chunks(64) {
            let mut word = 0u64;
            for (i, v) in chunk.iter().enumerate() {
                if *v > T::zero() {
                    word |= 1 << i;
                }
            }
            self.mix(word);
        }
    }

    fn absorb_indices(&mut self, idx: &[usize]) {
        for &i in idx {
            self.mix(i as u64);
        }
    }
}

/// Plain evaluation: no recording, values only.
pub struct Eval<'a, T> {
    ctx: Context<'a, T>,
    updates: Vec<StatsUpdate<T>>,
    sites: SiteCounter,
    signature: BranchSignature,
    ops: usize,
}

impl<'a, T: Scalar> Eval<'a, T> {
    pub fn new(ctx: Context<'a, T>) -> Self {
        Eval { ctx, updates: Vec::new(), sites: SiteCounter::default(), signature: BranchSignature::default(), ops: 0 }
    }

    pub fn stats_updates(&self) -> &[StatsUpdate<T>] {
        &self.updates
    }

    pub fn into_stats_updates(self) -> Vec<StatsUpdate<T>> {
        self.updates
    }

    pub fn signature(&self) -> BranchSignature {
        self.signature
    }

    /// Number of primitives evaluated so far (the node count a tape would
    /// have for the same program).
    pub fn op_count(&self) -> usize {
        self.ops
    }

    fn tick(&mut self) -> usize {
        self.ops += 1;
        self.ops - 1
    }
}

impl<'a, T: Scalar> Executor<T> for Eval<'a, T> {
    type Var = Tensor4<T>;

    fn value<'v>(&'v self, v: &'v Tensor4<T>) -> &'v Tensor4<T> {
        v
    }

    fn input(&mut self, x: Tensor4<T>) -> Tensor4<T> {
        self.tick();
        x
    }

    fn param(&mut self, id: ParamId) -> Tensor4<T> {
        self.tick();
        self.ctx.params.value(id).clone()
    }

    fn conv(&mut self, x: &Tensor4<T>, w: ParamId, bias: Option<ParamId>, stride: usize) -> Result<Tensor4<T>> {
        let id = self.tick();
        conv_forward(&self.ctx, x, w, bias, stride).map_err(|e| e.at_node(id))
    }

    fn batch_norm(&mut self, x: &Tensor4<T>, slot: NormSlot) -> Result<Tensor4<T>> {
        let id = self.tick();
        let slot = self.sites.next(slot).map_err(|e| e.at_node(id))?;
        let (y, _, update) = bn_forward(&self.ctx, x, slot).map_err(|e| e.at_node(id))?;
        self.updates.extend(update);
        Ok(y)
    }

    fn relu(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.tick();
        let y = activation::relu(x);
        self.signature.absorb_mask(&y);
        y
    }

    fn add(&mut self, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        let id = self.tick();
        a.add(b).map_err(|e| e.at_node(id))
    }

    fn sub(&mut self, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        let id = self.tick();
        a.sub(b).map_err(|e| e.at_node(id))
    }

    fn max_pool(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.tick();
        let (y, arg) = pool::max_pool_3x3_s2(x);
        self.signature.absorb_indices(&arg);
        y
    }

    fn global_avg_pool(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.tick();
        pool::global_avg_pool(x)
    }

    fn linear(&mut self, x: &Tensor4<T>, w: ParamId, b: ParamId) -> Result<Tensor4<T>> {
        let id = self.tick();
        linear::linear(x, self.ctx.params.value(w), self.ctx.params.value(b).data()).map_err(|e| e.at_node(id))
    }

    fn softmax_ce(&mut self, logits: &Tensor4<T>, labels: &[usize]) -> Result<Tensor4<T>> {
        self.tick();
        Ok(ce_forward(logits, labels)?.0)
    }

    fn sum(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.tick();
        scalar_tensor(x.sum())
    }
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum BnSaved<T> {
    Train { x_hat: Tensor4<T>, inv_std: Vec<T> },
    Infer { x_hat: Tensor4<T> },
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: NodeId, w: ParamId, bias: Option<ParamId>, stride: usize },
    BatchNorm { x: NodeId, slot: NormSlot, saved: BnSaved<T> },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    AvgPool { x: NodeId },
    Linear { x: NodeId, w: ParamId, b: ParamId },
    SoftmaxCe { probs: Tensor4<T>, labels: Vec<usize> },
    Sum { x: NodeId },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    /// Whether any parameter feeds this node.
    needs_grad: bool,
    /// Input of a softmax node (the logits), kept apart from `op` so the
    /// backward loop can borrow it.
    logits: Option<NodeId>,
}

/// Recorded forward computation.
pub struct Tape<'a, T> {
    ctx: Context<'a, T>,
    nodes: Vec<Node<T>>,
    updates: Vec<StatsUpdate<T>>,
    sites: SiteCounter,
}

impl<T> fmt::Debug for Tape<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(ctx: Context<'a, T>) -> Self {
        Tape { ctx, nodes: Vec::new(), updates: Vec::new(), sites: SiteCounter::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn stats_updates(&self) -> &[StatsUpdate<T>] {
        &self.updates
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, logits: None });
        NodeId(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    /// The tape is left untouched, so this can run more than once.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore<T>> {
        let ls = self.nodes[loss.0].value.shape();
        if ls != Shape4::new(1, 1, 1, 1) {
            return Err(Error::Shape { node: Some(loss.0), msg: format!("backward needs a scalar, got {ls}") });
        }
        let params = self.ctx.params;
        let mut store = GradStore::zeros_like(params);
        let mut grads: Vec<Option<Tensor4<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(scalar_tensor(T::one()));

        fn accumulate<T: Scalar>(grads: &mut [Option<Tensor4<T>>], id: NodeId, g: Tensor4<T>) {
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate(*id, &g),
                Op::Conv { x, w, bias, stride } => {
                    let xv = &self.nodes[x.0].value;
                    let want_dx = self.needs(*x);
                    let cg = conv::conv2d_backward(xv, params.value(*w), *stride, &g, want_dx, bias.is_some())
                        .map_err(|e| e.at_node(i))?;
                    store.accumulate(*w, &cg.dw);
                    if let (Some(b), Some(db)) = (bias, cg.db) {
                        store.accumulate_slice(*b, &db);
                    }
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::BatchNorm { x, slot, saved } => {
                    let gamma = params.value(slot.gamma).data();
                    let (dx, dgamma, dbeta) = match saved {
                        BnSaved::Train { x_hat, inv_std } => {
                            let cache = BnCache { x_hat: x_hat.clone(), inv_std: inv_std.clone(), mean: Vec::new(), var: Vec::new() };
                            norm::train_backward(&cache, gamma, &g)
                        }
                        BnSaved::Infer { x_hat } => {
                            norm::infer_backward(x_hat, gamma, &self.ctx.stats[slot.stats].var, self.ctx.eps, &g)
                        }
                    };
                    store.accumulate_slice(slot.gamma, &dgamma);
                    store.accumulate_slice(slot.beta, &dbeta);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, activation::relu_backward(&node.value, &g));
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.scale(-T::one()));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if self.needs(*x) {
                        let dx = pool::max_pool_backward(self.nodes[x.0].value.shape(), argmax, &g)?;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::AvgPool { x } => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, pool::global_avg_pool_backward(self.nodes[x.0].value.shape(), &g));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let (dx, dw, db) = linear::linear_backward(xv, params.value(*w), &g);
                    store.accumulate(*w, &dw);
                    store.accumulate_slice(*b, &db);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SoftmaxCe { probs, labels } => {
                    let logits = node.logits.expect("softmax node records its logits");
                    if self.needs(logits) {
                        let dl = linear::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                        accumulate(&mut grads, logits, dl);
                    }
                }
                Op::Sum { x } => {
                    if self.needs(*x) {
                        let shape = self.nodes[x.0].value.shape();
                        accumulate(&mut grads, *x, Tensor4::full(shape, g.data()[0]));
                    }
                }
            }
        }
        Ok(store)
    }
}

impl<'a, T: Scalar> Executor<T> for Tape<'a, T> {
    type Var = NodeId;

    fn value<'v>(&'v self, v: &'v NodeId) -> &'v Tensor4<T> {
        &self.nodes[v.0].value
    }

    fn input(&mut self, x: Tensor4<T>) -> NodeId {
        self.push(x, Op::Input, false)
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.ctx.params.value(id).clone();
        self.push(v, Op::Param(id), true)
    }

    fn conv(&mut self, x: &NodeId, w: ParamId, bias: Option<ParamId>, stride: usize) -> Result<NodeId> {
        let id = self.next_id();
        let y = conv_forward(&self.ctx, &self.nodes[x.0].value, w, bias, stride).map_err(|e| e.at_node(id))?;
        Ok(self.push(y, Op::Conv { x: *x, w, bias, stride }, true))
    }

    fn batch_norm(&mut self, x: &NodeId, slot: NormSlot) -> Result<NodeId> {
        let id = self.next_id();
        let slot = self.sites.next(slot).map_err(|e| e.at_node(id))?;
        let (y, saved, update) = bn_forward(&self.ctx, &self.nodes[x.0].value, slot).map_err(|e| e.at_node(id))?;
        self.updates.extend(update);
        Ok(self.push(y, Op::BatchNorm { x: *x, slot, saved }, true))
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = activation::relu(&self.nodes[x.0].value);
        let needs = self.needs(*x);
        self.push(y, Op::Relu { x: *x }, needs)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let id = self.next_id();
        let y = self.nodes[a.0].value.add(&self.nodes[b.0].value).map_err(|e| e.at_node(id))?;
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(y, Op::Add { a: *a, b: *b }, needs))
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let id = self.next_id();
        let y = self.nodes[a.0].value.sub(&self.nodes[b.0].value).map_err(|e| e.at_node(id))?;
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(y, Op::Sub { a: *a, b: *b }, needs))
    }

    fn max_pool(&mut self, x: &NodeId) -> NodeId {
        let (y, argmax) = pool::max_pool_3x3_s2(&self.nodes[x.0].value);
        let needs = self.needs(*x);
        self.push(y, Op::MaxPool { x: *x, argmax }, needs)
    }

    fn global_avg_pool(&mut self, x: &NodeId) -> NodeId {
        let y = pool::global_avg_pool(&self.nodes[x.0].value);
        let needs = self.needs(*x);
        self.push(y, Op::AvgPool { x: *x }, needs)
    }

    fn linear(&mut self, x: &NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let id = self.next_id();
        let y = linear::linear(&self.nodes[x.0].value, self.ctx.params.value(w), self.ctx.params.value(b).data())
            .map_err(|e| e.at_node(id))?;
        Ok(self.push(y, Op::Linear { x: *x, w, b }, true))
    }

    fn softmax_ce(&mut self, logits: &NodeId, labels: &[usize]) -> Result<NodeId> {
        let id = self.next_id();
        let (loss, probs) = ce_forward(&self.nodes[logits.0].value, labels).map_err(|e| e.at_node(id))?;
        let needs = self.needs(*logits);
        let node = self.push(loss, Op::SoftmaxCe { probs, labels: labels.to_vec() }, needs);
        self.nodes[node.0].logits = Some(*logits);
        Ok(node)
    }

    fn sum(&mut self, x: &NodeId) -> NodeId {
        let y = scalar_tensor(self.nodes[x.0].value.sum());
        let needs = self.needs(*x);
        self.push(y, Op::Sum { x: *x }, needs)
    }
}

/// Per-parameter gradients, aligned shape-for-shape with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore<T> {
    grads: Vec<Tensor4<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        GradStore { grads: params.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor4<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor4<T>) {
        self.grads[id.0].add_assign(g).expect("gradient matches parameter shape");
    }

    fn accumulate_slice(&mut self, id: ParamId, g: &[T]) {
        let dst = self.grads[id.0].data_mut();
        assert_eq!(dst.len(), g.len(), "gradient matches parameter length");
        for (d, &v) in dst.iter_mut().zip(g) {
            *d += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<T: Scalar>(params: &ParamStore<T>) -> Context<'_, T> {
        Context { params, stats: &[], eps: T::from_f64_lossy(1e-5), mode: Mode::Train }
    }

    fn sig_of(x: &Tensor4<f64>) -> BranchSignature {
        let mut s = BranchSignature::default();
        s.absorb_mask(x);
        s
    }

    #[test]
    fn signature_sees_every_mask_flip() {
        let base = Tensor4::full([1, 3, 8, 8], 1.0);
        let b = sig_of(&base);
        for i in 0..base.len() {
            let mut t = base.clone();
            t.data_mut()[i] = 0.0;
            assert_ne!(sig_of(&t), b, "flip at {i}");
        }
        // High bits of several words flipping together used to cancel.
        for i in (63..base.len()).step_by(64) {
            for j in (i + 64..base.len()).step_by(64) {
                let mut t = base.clone();
                t.data_mut()[i] = 0.0;
                t.data_mut()[j] = 0.0;
                assert_ne!(sig_of(&t), b, "flips at {i} and {j}");
            }
        }
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let p = ps.push("p", ParamKind::ConvWeight, Tensor4::full([2, 3, 1, 1], 0.7));
        let unused = ps.push("q", ParamKind::Bias, Tensor4::full([1, 4, 1, 1], 1.0));
        let mut tape = Tape::new(ctx(&ps));
        let v = tape.param(p);
        let loss = tape.sum(&v);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).data().iter().all(|&v| v == 1.0));
        assert!(g.get(unused).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.get(p).shape(), ps.value(p).shape());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.push("w", ParamKind::ConvWeight, Tensor4::from_f64([2, 1, 3, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9, 0.2, 0.1, 0.0, -0.1, 0.3, 0.5, -0.2, 0.4, 0.6]).unwrap());
        let hw = ps.push("hw", ParamKind::LinearWeight, Tensor4::from_f64([3, 2, 1, 1], &[0.5, -1.0, 0.25, 0.75, -0.5, 1.5]).unwrap());
        let hb = ps.push("hb", ParamKind::Bias, Tensor4::zeros([1, 3, 1, 1]));
        let mut tape = Tape::new(ctx(&ps));
        let x = tape.input(Tensor4::from_f64([2, 1, 4, 4], &(0..32).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
        let y = tape.conv(&x, w, None, 2).unwrap();
        let y = tape.relu(&y);
        let y = tape.global_avg_pool(&y);
        let logits = tape.linear(&y, hw, hb).unwrap();
        let loss = tape.softmax_ce(&logits, &[0, 2]).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn shape_errors_carry_node_id() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.push("w", ParamKind::ConvWeight, Tensor4::zeros([1, 2, 3, 3]));
        let mut tape = Tape::new(ctx(&ps));
        let x = tape.input(Tensor4::zeros([1, 3, 4, 4]));
        let err = tape.conv(&x, w, None, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { node: Some(1), .. }), "{err}");
        let mut eval = Eval::new(ctx(&ps));
        let xv = eval.input(Tensor4::zeros([1, 3, 4, 4]));
        assert!(matches!(eval.conv(&xv, w, None, 1), Err(Error::Shape { node: Some(1), .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let ps = ParamStore::<f64>::new();
        let mut tape = Tape::new(ctx(&ps));
        let x = tape.input(Tensor4::zeros([1, 1, 2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
