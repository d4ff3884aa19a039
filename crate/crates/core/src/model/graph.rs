//! Parameter banks and wiring for every model family.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::autodiff::{Context, NormSlot, ParamId, ParamKind, ParamStore, RunningStats};
use crate::error::{Error, Result};
use crate::model::spec::{Family, ModelSpec, Sharing};
use crate::ops::norm::{Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Batch norm after every convolution.
    pub batch_norm: bool,
    /// Kernel size of the MgNet/GDFI transitions Π and R (3 or 1).
    pub transition_kernel: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { batch_norm: true, transition_kernel: 3 }
    }
}

impl BuildOptions {
    /// No normalization: the setting for exact algebraic checks.
    pub fn plain() -> Self {
        BuildOptions { batch_norm: false, ..Self::default() }
    }
}

/// Which group of the architecture a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bank {
    Stem,
    A,
    B,
    Pi,
    R,
    Projection,
    Head,
    Norm,
}

impl Bank {
    pub const ALL: [Bank; 8] = [Bank::Stem, Bank::A, Bank::B, Bank::Pi, Bank::R, Bank::Projection, Bank::Head, Bank::Norm];

    pub fn name(self) -> &'static str {
        match self {
            Bank::Stem => "stem",
            Bank::A => "A",
            Bank::B => "B",
            Bank::Pi => "Pi",
            Bank::R => "R",
            Bank::Projection => "projection",
            Bank::Head => "head",
            Bank::Norm => "batch_norm",
        }
    }
}

/// One convolution unit, optionally followed by batch norm. Copies of the
/// same unit used at several sites share kernel, scale and shift; each use
/// keeps its own running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub stride: usize,
    pub norm: Option<NormSlot>,
}

/// MgNet / GDFI grid: one A, a B per smoothing step (possibly the same unit
/// repeated), and the transitions to the next grid.
#[derive(Debug, Clone)]
pub struct MgLevel {
    pub a: ConvUnit,
    pub b: Vec<ConvUnit>,
    pub pi: Option<ConvUnit>,
    pub r: Option<ConvUnit>,
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub a: ConvUnit,
    pub b: ConvUnit,
    /// Set on the pooling block that opens every grid after the first.
    pub projection: Option<ConvUnit>,
}

#[derive(Debug, Clone)]
pub struct ResLevel {
    pub blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
pub enum Levels {
    Mg(Vec<MgLevel>),
    Res(Vec<ResLevel>),
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    pub spec: ModelSpec,
    pub options: BuildOptions,
    pub params: ParamStore<T>,
    pub stats: Vec<RunningStats<T>>,
    pub eps: T,
    pub momentum: T,
    pub stem: ConvUnit,
    pub levels: Levels,
    pub head_w: ParamId,
    pub head_b: ParamId,
    banks: Vec<Bank>,
}

struct Builder<T> {
    params: ParamStore<T>,
    banks: Vec<Bank>,
    stats: Vec<RunningStats<T>>,
    batch_norm: bool,
}

impl<T: Scalar> Builder<T> {
    /// `uses` is how many times one forward pass applies the unit.
    fn conv(&mut self, name: String, bank: Bank, c_out: usize, c_in: usize, k: usize, stride: usize, uses: usize) -> ConvUnit {
        let weight = self.params.push(name.clone(), ParamKind::ConvWeight, Tensor4::zeros([c_out, c_in, k, k]));
        self.banks.push(bank);
        let norm = self.batch_norm.then(|| {
            let gamma = self.params.push(format!("{name}.bn.gamma"), ParamKind::NormScale, Tensor4::full([1, c_out, 1, 1], T::one()));
            let beta = self.params.push(format!("{name}.bn.beta"), ParamKind::NormShift, Tensor4::zeros([1, c_out, 1, 1]));
            self.banks.push(Bank::Norm);
            self.banks.push(Bank::Norm);
            let stats = self.stats.len();
            self.stats.extend((0..uses).map(|_| RunningStats::new(c_out)));
            NormSlot { gamma, beta, stats, sites: uses }
        });
        ConvUnit { weight, stride, norm }
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Allocates every bank with zero kernels, unit norm scales and zero
    /// shifts. See [`crate::train::kaiming_init`] for random weights.
    pub fn new(spec: &ModelSpec, options: BuildOptions) -> Result<Self> {
        spec.validate()?;
        if !matches!(options.transition_kernel, 1 | 3) {
            return Err(Error::Config(format!("transition kernel must be 1 or 3, got {}", options.transition_kernel)));
        }
        let mut b = Builder { params: ParamStore::new(), banks: Vec::new(), stats: Vec::new(), batch_norm: options.batch_norm };
        let (stem_k, stem_s) = match spec.stem {
            crate::model::spec::Stem::Cifar => (3, 1),
            crate::model::spec::Stem::Imagenet => (7, 2),
        };
        let j = spec.levels();
        let stem = b.conv("stem".into(), Bank::Stem, spec.channels_f[0], spec.input_channels, stem_k, stem_s, 1);
        let levels = match spec.family {
            Family::MgNet | Family::Gdfi => Levels::Mg(Self::build_mg(&mut b, spec, options.transition_kernel)),
            Family::ResNet | Family::PreactResNet => Levels::Res(Self::build_res(&mut b, spec)),
        };
        let features = spec.channels_u[j - 1];
        let head_w = b.params.push("head.w", ParamKind::LinearWeight, Tensor4::zeros([spec.num_classes, features, 1, 1]));
        let head_b = b.params.push("head.b", ParamKind::Bias, Tensor4::zeros([1, spec.num_classes, 1, 1]));
        b.banks.extend([Bank::Head, Bank::Head]);
        Ok(ModelGraph {
            spec: spec.clone(),
            options,
            params: b.params,
            stats: b.stats,
            eps: T::from_f64_lossy(DEFAULT_EPS),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
            stem,
            levels,
            head_w,
            head_b,
            banks: b.banks,
        })
    }

    fn build_mg(b: &mut Builder<T>, spec: &ModelSpec, tk: usize) -> Vec<MgLevel> {
        let j = spec.levels();
        (0..j)
            .map(|l| {
                let (cu, cf) = (spec.channels_u[l], spec.channels_f[l]);
                let lv = l + 1;
                // A acts on u^{l,0} (or zeros on grid 1), after each of the
                // first nu - 1 steps, and once more before the transition.
                let a_uses = spec.nu[l] + usize::from(l + 1 < j);
                let a = b.conv(format!("l{lv}.A"), Bank::A, cf, cu, 3, 1, a_uses);
                let bs = match spec.b_sharing {
                    Sharing::PerLevel => vec![b.conv(format!("l{lv}.B"), Bank::B, cu, cf, 3, 1, spec.nu[l]); spec.nu[l]],
                    Sharing::PerIteration => {
                        (1..=spec.nu[l]).map(|i| b.conv(format!("l{lv}.B{i}"), Bank::B, cu, cf, 3, 1, 1)).collect()
                    }
                };
                let (pi, r) = if l + 1 < j {
                    let (cu2, cf2) = (spec.channels_u[l + 1], spec.channels_f[l + 1]);
                    (
                        Some(b.conv(format!("l{lv}.Pi"), Bank::Pi, cu2, cu, tk, 2, 1)),
                        Some(b.conv(format!("l{lv}.R"), Bank::R, cf2, cf, tk, 2, 1)),
                    )
                } else {
                    (None, None)
                };
                MgLevel { a, b: bs, pi, r }
            })
            .collect()
    }

    /// Grid 1 holds `nu[0]` plain blocks; every later grid opens with a
    /// pooling block followed by `nu[l] - 1` plain blocks.
    fn build_res(b: &mut Builder<T>, spec: &ModelSpec) -> Vec<ResLevel> {
        let ch = &spec.channels_u;
        (0..spec.levels())
            .map(|l| {
                let lv = l + 1;
                let c = ch[l];
                let plain = if l == 0 { spec.nu[l] } else { spec.nu[l] - 1 };
                let shared_a =
                    (spec.a_sharing == Sharing::PerLevel).then(|| b.conv(format!("l{lv}.A"), Bank::A, c, c, 3, 1, spec.nu[l]));
                let shared_b = (spec.b_sharing == Sharing::PerLevel && plain > 0)
                    .then(|| b.conv(format!("l{lv}.B"), Bank::B, c, c, 3, 1, plain));
                let mut blocks = Vec::with_capacity(spec.nu[l]);
                if l > 0 {
                    let projection = b.conv(format!("l{lv}.R"), Bank::Projection, c, ch[l - 1], 1, 2, 1);
                    let b0 = b.conv(format!("l{lv}.B0"), Bank::B, c, ch[l - 1], 3, 2, 1);
                    let a0 = shared_a.unwrap_or_else(|| b.conv(format!("l{lv}.A0"), Bank::A, c, c, 3, 1, 1));
                    blocks.push(ResBlock { a: a0, b: b0, projection: Some(projection) });
                }
                for i in 1..=plain {
                    let bi = shared_b.unwrap_or_else(|| b.conv(format!("l{lv}.B{i}"), Bank::B, c, c, 3, 1, 1));
                    let ai = shared_a.unwrap_or_else(|| b.conv(format!("l{lv}.A{i}"), Bank::A, c, c, 3, 1, 1));
                    blocks.push(ResBlock { a: ai, b: bi, projection: None });
                }
                ResLevel { blocks }
            })
            .collect()
    }

    pub fn bank(&self, id: ParamId) -> Bank {
        self.banks[id.0]
    }

    pub fn mg_levels(&self) -> Option<&[MgLevel]> {
        match &self.levels {
            Levels::Mg(l) => Some(l),
            Levels::Res(_) => None,
        }
    }

    pub fn mg_levels_mut(&mut self) -> Option<&mut Vec<MgLevel>> {
        match &mut self.levels {
            Levels::Mg(l) => Some(l),
            Levels::Res(_) => None,
        }
    }

    pub fn res_levels(&self) -> Option<&[ResLevel]> {
        match &self.levels {
            Levels::Res(l) => Some(l),
            Levels::Mg(_) => None,
        }
    }

    pub fn context(&self, mode: Mode) -> Context<'_, T> {
        Context { params: &self.params, stats: &self.stats, eps: self.eps, mode }
    }

    /// Distinct kernels in `bank`.
    pub fn kernel_count(&self, bank: Bank) -> usize {
        self.params
            .iter()
            .filter(|(id, p)| self.bank(*id) == bank && p.kind == ParamKind::ConvWeight)
            .count()
    }

    /// Distinct A kernels used at grid `level` (0-based).
    pub fn level_kernels(&self, level: usize, bank: Bank) -> usize {
        let ids: BTreeSet<ParamId> = match &self.levels {
            Levels::Mg(ls) => {
                let lv = &ls[level];
                match bank {
                    Bank::A => vec![lv.a.weight],
                    Bank::B => lv.b.iter().map(|u| u.weight).collect(),
                    Bank::Pi => lv.pi.iter().map(|u| u.weight).collect(),
                    Bank::R => lv.r.iter().map(|u| u.weight).collect(),
                    _ => Vec::new(),
                }
                .into_iter()
                .collect()
            }
            Levels::Res(ls) => ls[level]
                .blocks
                .iter()
                .filter_map(|blk| match bank {
                    Bank::A => Some(blk.a.weight),
                    Bank::B => Some(blk.b.weight),
                    Bank::Projection => blk.projection.map(|u| u.weight),
                    _ => None,
                })
                .collect(),
        };
        ids.len()
    }

    /// Resets running statistics to mean 0, variance 1.
    pub fn reset_stats(&mut self) {
        for s in &mut self.stats {
            s.mean.iter_mut().for_each(|v| *v = T::zero());
            s.var.iter_mut().for_each(|v| *v = T::one());
        }
    }

    /// Copies parameters by name from `other`. Every parameter of `self`
    /// must exist in `other` with the same shape.
    pub fn copy_params_from<U: Scalar>(&mut self, other: &ModelGraph<U>) -> Result<()> {
        for (_, p) in self.params.iter_mut() {
            let id = other.params.find(&p.name).ok_or_else(|| Error::Config(format!("no parameter `{}` to copy", p.name)))?;
            let src = other.params.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::shape(format!("parameter `{}`: {} vs {}", p.name, src.shape(), p.value.shape())));
            }
            p.value = src.cast();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.push(p.name.clone(), p.kind, p.value.cast());
        }
        ModelGraph {
            spec: self.spec.clone(),
            options: self.options,
            params,
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    var: s.var.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
            eps: U::from_f64_lossy(self.eps.to_f64_lossy()),
            momentum: U::from_f64_lossy(self.momentum.to_f64_lossy()),
            stem: self.stem,
            levels: self.levels.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
            banks: self.banks.clone(),
        }
    }

    /// Every convolution use in definition order. A shared unit appears once
    /// per block or smoothing step that uses it.
    pub fn conv_sites(&self) -> Vec<ConvUnit> {
        let mut out = vec![self.stem];
        match &self.levels {
            Levels::Mg(ls) => {
                for lv in ls {
                    out.push(lv.a);
                    out.extend(&lv.b);
                    out.extend(lv.pi);
                    out.extend(lv.r);
                }
            }
            Levels::Res(ls) => {
                for blk in ls.iter().flat_map(|l| &l.blocks) {
                    out.push(blk.b);
                    out.push(blk.a);
                    out.extend(blk.projection);
                }
            }
        }
        out
    }

    /// Parameters used at more than one site.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut seen = BTreeSet::new();
        let mut shared = BTreeSet::new();
        for u in self.conv_sites() {
            if !seen.insert(u.weight) {
                shared.insert(u.weight);
            }
        }
        shared.into_iter().collect()
    }

    /// The same network with every kernel untied (one per use), each copy
    /// holding the values of the kernel it replaces.
    pub fn untied(&self) -> Result<ModelGraph<T>> {
        let mut spec = self.spec.clone();
        spec.b_sharing = Sharing::PerIteration;
        if spec.family.is_resnet() {
            spec.a_sharing = Sharing::PerIteration;
        }
        let mut out = ModelGraph::<T>::new(&spec, self.options)?;
        let (src, dst) = (self.conv_sites(), out.conv_sites());
        debug_assert_eq!(src.len(), dst.len());
        // The k-th untied copy of a shared unit inherits its k-th statistics.
        let mut seen = BTreeMap::<usize, usize>::new();
        for (s, d) in src.iter().zip(&dst) {
            *out.params.value_mut(d.weight) = self.params.value(s.weight).clone();
            if let (Some(sn), Some(dn)) = (s.norm, d.norm) {
                *out.params.value_mut(dn.gamma) = self.params.value(sn.gamma).clone();
                *out.params.value_mut(dn.beta) = self.params.value(sn.beta).clone();
                let k = seen.entry(sn.stats).or_default();
                if dn.sites == sn.sites {
                    out.stats[dn.stats..dn.stats + dn.sites].clone_from_slice(&self.stats[sn.stats..sn.stats + sn.sites]);
                } else {
                    out.stats[dn.stats] = self.stats[sn.stats + *k].clone();
                }
                *k += 1;
            }
        }
        *out.params.value_mut(out.head_w) = self.params.value(self.head_w).clone();
        *out.params.value_mut(out.head_b) = self.params.value(self.head_b).clone();
        Ok(out)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut banks: Vec<(Bank, usize)> = Bank::ALL.iter().map(|&b| (b, 0)).collect();
        for (id, p) in self.params.iter() {
            let slot = banks.iter_mut().find(|(b, _)| *b == self.bank(id)).expect("every bank listed");
            slot.1 += p.value.len();
        }
        banks.retain(|(_, n)| *n > 0);
        ParamCount { total: self.params.scalar_count(), banks }
    }
}

/// Trainable-scalar count; running statistics are not parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub banks: Vec<(Bank, usize)>,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (b, n) in &self.banks {
            writeln!(f, "{:<12} {:>12}", b.name(), n)?;
        }
        write!(f, "{:<12} {:>12}  ({:.2}M)", "total", self.total, self.total as f64 / 1e6)
    }
}

/// Builds a graph and draws its weights with [`crate::train::kaiming_init`].
pub fn build_model<T: Scalar>(spec: &ModelSpec, options: BuildOptions, init_seed: u64) -> Result<ModelGraph<T>> {
    let mut g = ModelGraph::new(spec, options)?;
    crate::train::kaiming_init(&mut g, init_seed);
    Ok(g)
}

/// Parameter count of a spec without materializing random weights.
pub fn count_parameters(spec: &ModelSpec, options: BuildOptions) -> Result<ParamCount> {
    Ok(ModelGraph::<f32>::new(spec, options)?.count_parameters())
}
