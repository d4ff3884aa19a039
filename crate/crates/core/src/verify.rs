//! Numerical checks of the structural identities behind the models: the
//! feature/residual duality, the sign constraint, the GDFI special case,
//! reverse-mode gradients, and published parameter counts.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{BranchSignature, Eval, Executor, ParamId};
use crate::error::{Error, Result};
use crate::model::forward::{features, gdfi_forward, loss, mgnet_forward, preact_resnet_forward, forward_record, MgTrace};
use crate::model::graph::{count_parameters, BuildOptions, ModelGraph};
use crate::model::spec::{parse_model_spec, Family, ModelSpec, OperatorForm, Sharing, Stem};
use crate::ops::activation::relu;
use crate::ops::conv::conv2d_raw;
use crate::ops::norm::Mode;
use crate::tensor::{Precision, Tensor4};
use crate::train::kaiming_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
}

/// Pass condition on a report's metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    /// Negative controls: the metric must reach the threshold.
    AtLeast(f64),
}

impl Bound {
    fn holds(self, metric: f64) -> bool {
        match self {
            Bound::AtMost(t) => metric <= t,
            Bound::AtLeast(t) => metric >= t,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::AtMost(t) => write!(f, "<= {t:e}"),
            Bound::AtLeast(t) => write!(f, ">= {t:e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    pub spec: String,
    pub seed: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub check: String,
    pub status: Status,
    pub metric: f64,
    pub bound: Bound,
    pub fingerprint: Fingerprint,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl VerificationReport {
    pub fn new(check: impl Into<String>, metric: f64, bound: Bound, fingerprint: Fingerprint) -> Self {
        let status = if bound.holds(metric) { Status::Pass } else { Status::Fail };
        VerificationReport { check: check.into(), status, metric, bound, fingerprint, details: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {:<22} metric={:<12.4e} bound {:<10} spec={} seed={} precision={}",
            self.check, self.metric, self.bound.to_string(), self.fingerprint.spec, self.fingerprint.seed, self.fingerprint.precision
        )
    }
}

fn fingerprint(spec: &ModelSpec, seed: u64) -> Fingerprint {
    Fingerprint { spec: spec.to_string(), seed, precision: Precision::Double }
}

/// Standard-normal tensor.
pub fn normal_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor4<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor4::from_vec(shape, data).expect("shape matches data")
}

fn random_graph(spec: &ModelSpec, options: BuildOptions, seed: u64) -> Result<ModelGraph<f64>> {
    let mut g = ModelGraph::new(spec, options)?;
    kaiming_init(&mut g, seed);
    Ok(g)
}

fn conv(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize) -> Result<Tensor4<f64>> {
    conv2d_raw(x, w, None, stride)
}

/// Worst discrepancy between the residuals of the feature iteration,
/// `f - A * u^{l,i}`, and the residual iteration
/// `r <- r - A * σ(B_i * σ(r))` started from the same `r^{l,0}`.
fn duality_discrepancy(g: &ModelGraph<f64>, trace: &MgTrace<f64>) -> Result<f64> {
    let levels = g.mg_levels().ok_or_else(|| Error::Config("duality needs an MgNet graph".into()))?;
    let mut worst = 0.0f64;
    for (l, lv) in levels.iter().enumerate() {
        let a = g.params.value(lv.a.weight);
        let f = &trace.f[l];
        let mut r = f.sub(&conv(&trace.u[l][0], a, 1)?)?;
        for (i, b) in lv.b.iter().enumerate() {
            let t = relu(&conv(&relu(&r), g.params.value(b.weight), 1)?);
            r = r.sub(&conv(&t, a, 1)?)?;
            let from_features = f.sub(&conv(&trace.u[l][i + 1], a, 1)?)?;
            worst = worst.max(r.max_abs_diff(&from_features)?);
        }
    }
    Ok(worst)
}

/// First-grid residuals of a pre-activation network carrying `-A` and the
/// MgNet smoothers must match MgNet's `f - A * u^{1,nu}`.
fn residual_network_discrepancy(g: &ModelGraph<f64>, x: &Tensor4<f64>, trace: &MgTrace<f64>) -> Result<Option<f64>> {
    let spec = &g.spec;
    if spec.channels_u[0] != spec.channels_f[0] {
        return Ok(None);
    }
    let c = spec.channels_u[0];
    let text = format!("PreactResNet[{}]-[{c}]-Al-B{}", spec.nu[0], if spec.b_sharing == Sharing::PerLevel { "l" } else { "li" });
    let rspec = parse_model_spec(&text)?
        .with_classes(spec.num_classes)
        .with_input_channels(spec.input_channels)
        .with_stem(spec.stem);
    let mut rg = ModelGraph::<f64>::new(&rspec, BuildOptions::plain())?;
    let ml = &g.mg_levels().expect("MgNet graph")[0];
    *rg.params.value_mut(rg.stem.weight) = g.params.value(g.stem.weight).clone();
    let blocks = rg.res_levels().expect("residual graph")[0].blocks.clone();
    for (k, blk) in blocks.iter().enumerate() {
        *rg.params.value_mut(blk.a.weight) = g.params.value(ml.a.weight).scale(-1.0);
        *rg.params.value_mut(blk.b.weight) = g.params.value(ml.b[k].weight).clone();
    }
    let mut ev = Eval::new(rg.context(Mode::Infer));
    let r = preact_resnet_forward(&rg, &mut ev, x)?;
    let a = g.params.value(ml.a.weight);
    let expected = trace.f[0].sub(&conv(&trace.u[0][spec.nu[0]], a, 1)?)?;
    Ok(Some(r.max_abs_diff(&expected)?))
}

const DUALITY_TOL: f64 = 1e-10;

/// Feature-space MgNet iteration versus its residual-space counterpart.
/// Batch norm off, double precision, input `2 x C x 16 x 16`.
pub fn check_duality(spec: &ModelSpec, seed: u64) -> Result<VerificationReport> {
    if spec.family != Family::MgNet {
        return Err(Error::Config(format!("duality check needs an MgNet spec, got {spec}")));
    }
    let g = random_graph(spec, BuildOptions::plain(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = normal_tensor([2, spec.input_channels, 16, 16], &mut rng);
    duality_report(&g, &x, seed)
}

/// [`check_duality`] on a caller-supplied graph and input.
pub fn duality_report(g: &ModelGraph<f64>, x: &Tensor4<f64>, seed: u64) -> Result<VerificationReport> {
    let mut ev = Eval::new(g.context(Mode::Infer));
    let mut trace = MgTrace::default();
    mgnet_forward(g, &mut ev, x, Some(&mut trace))?;
    let d = duality_discrepancy(g, &trace)?;
    let mut details = vec![format!("residual recursion, all grids: {d:e}")];
    let mut metric = d;
    if let Some(rd) = residual_network_discrepancy(g, x, &trace)? {
        details.push(format!("pre-activation network, grid 1: {rd:e}"));
        metric = metric.max(rd);
    }
    Ok(VerificationReport::new("duality", metric, Bound::AtMost(DUALITY_TOL), fingerprint(&g.spec, seed)).with_details(details))
}

/// Sign-constraint scan over `trials` random weight and input draws.
/// Even trials run without batch norm, odd trials with train-mode batch
/// norm. Negative transition outputs are reported but are not violations.
pub fn check_positivity(spec: &ModelSpec, seed: u64, trials: usize) -> Result<VerificationReport> {
    if spec.family != Family::MgNet {
        return Err(Error::Config(format!("positivity check needs an MgNet spec, got {spec}")));
    }
    let mut violations = 0usize;
    let mut transitions_negative = 0usize;
    let mut transitions = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let opts = if t % 2 == 0 { BuildOptions::plain() } else { BuildOptions::default() };
        let g = random_graph(spec, opts, rng.random())?;
        let x = normal_tensor([2, spec.input_channels, 8, 8], &mut rng);
        let mut ev = Eval::new(g.context(Mode::Train));
        let mut tr = MgTrace::default();
        mgnet_forward(&g, &mut ev, &x, Some(&mut tr))?;
        for (l, us) in tr.u.iter().enumerate() {
            let start_nonneg = us[0].data().iter().all(|&v| v >= 0.0);
            if l > 0 {
                transitions += 1;
                transitions_negative += usize::from(!start_nonneg);
            }
            for w in us.windows(2) {
                violations += w[1].data().iter().zip(w[0].data()).filter(|(b, a)| !(*b - *a >= 0.0)).count();
                if start_nonneg {
                    violations += w[1].data().iter().filter(|&&v| !(v >= 0.0)).count();
                }
            }
        }
    }
    let details = vec![
        format!("{trials} trials, {violations} within-grid violations"),
        format!("transition outputs with negative entries: {transitions_negative} of {transitions} (informational)"),
    ];
    Ok(VerificationReport::new("positivity", violations as f64, Bound::AtMost(0.0), fingerprint(spec, seed)).with_details(details))
}

fn as_gdfi(spec: &ModelSpec, a: OperatorForm, b: OperatorForm) -> ModelSpec {
    ModelSpec { family: Family::Gdfi, a_sharing: Sharing::PerLevel, a_form: Some(a), b_form: Some(b), ..spec.clone() }
}

fn as_mgnet(spec: &ModelSpec) -> ModelSpec {
    ModelSpec { family: Family::MgNet, a_sharing: Sharing::PerLevel, a_form: None, b_form: None, ..spec.clone() }
}

/// Largest difference, over features and logits, between a GDFI graph and
/// an MgNet graph carrying the same weights.
pub fn gdfi_mgnet_difference(gdfi: &ModelGraph<f64>, x: &Tensor4<f64>, mode: Mode) -> Result<f64> {
    let mut mg = ModelGraph::<f64>::new(&as_mgnet(&gdfi.spec), gdfi.options)?;
    mg.copy_params_from(gdfi)?;
    mg.stats.clone_from(&gdfi.stats);
    let mut e1 = Eval::new(gdfi.context(mode));
    let h1 = gdfi_forward(gdfi, &mut e1, x)?;
    let mut e2 = Eval::new(mg.context(mode));
    let h2 = mgnet_forward(&mg, &mut e2, x, None)?;
    let z1 = crate::model::forward::logits(gdfi, &mut Eval::new(gdfi.context(mode)), x)?;
    let z2 = crate::model::forward::logits(&mg, &mut Eval::new(mg.context(mode)), x)?;
    Ok(h1.max_abs_diff(&h2)?.max(z1.max_abs_diff(&z2)?))
}

/// GDFI with `(K*, σ∘K*σ)` against MgNet under weight transplantation,
/// with and without batch norm.
pub fn check_gdfi_degeneracy(spec: &ModelSpec, seed: u64) -> Result<VerificationReport> {
    if spec.family != Family::Gdfi || spec.a_form != Some(OperatorForm::K) || spec.b_form != Some(OperatorForm::SKS) {
        return Err(Error::Config(format!("degeneracy check needs GDFI with A:K and B:sKs, got {spec}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6df1);
    let x = normal_tensor([2, spec.input_channels, 16, 16], &mut rng);
    let plain = gdfi_mgnet_difference(&random_graph(spec, BuildOptions::plain(), seed)?, &x, Mode::Infer)?;
    let normed = gdfi_mgnet_difference(&random_graph(spec, BuildOptions::default(), seed)?, &x, Mode::Train)?;
    let details = vec![format!("without batch norm: {plain:e}"), format!("with batch norm (train mode): {normed:e}")];
    Ok(VerificationReport::new("gdfi_degeneracy", plain.max(normed), Bound::AtMost(DUALITY_TOL), fingerprint(spec, seed))
        .with_details(details))
}

const NEGATIVE_CONTROL_MIN: f64 = 1e-6;

/// Every non-degenerate form pair on generic weights. Passes when at least
/// one pair departs from MgNet; a pair that matches is re-rolled once.
pub fn check_gdfi_negative_control(spec: &ModelSpec, seed: u64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6df2);
    let x = normal_tensor([2, spec.input_channels, 16, 16], &mut rng);
    let mut best = 0.0f64;
    let mut details = Vec::new();
    for a in OperatorForm::ALL {
        for b in OperatorForm::ALL {
            if (a, b) == (OperatorForm::K, OperatorForm::SKS) {
                continue;
            }
            let s = as_gdfi(spec, a, b);
            let mut d = gdfi_mgnet_difference(&random_graph(&s, BuildOptions::plain(), seed)?, &x, Mode::Infer)?;
            if d < NEGATIVE_CONTROL_MIN {
                d = gdfi_mgnet_difference(&random_graph(&s, BuildOptions::plain(), seed.wrapping_add(1))?, &x, Mode::Infer)?;
            }
            details.push(format!("A:{a} B:{b} differs by {d:e}"));
            best = best.max(d);
        }
    }
    let fp = fingerprint(&as_gdfi(spec, OperatorForm::K, OperatorForm::SKS), seed);
    Ok(VerificationReport::new("gdfi_negative_control", best, Bound::AtLeast(NEGATIVE_CONTROL_MIN), fp).with_details(details))
}

/// Central-difference settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub sites: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Input is `batch x C x size x size`.
    pub batch: usize,
    pub size: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { sites: 20, step: 1e-4, tolerance: 1e-6, batch: 2, size: 8 }
    }
}

fn eval_loss(g: &ModelGraph<f64>, x: &Tensor4<f64>, labels: &[usize]) -> Result<(f64, BranchSignature)> {
    let mut ev = Eval::new(g.context(Mode::Train));
    let l = loss(g, &mut ev, x, labels)?;
    Ok((l.data()[0], ev.signature()))
}

/// `|a - n| / max(|a|, |n|, floor)`; zero when everything is zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(floor);
    if den == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / den
    }
}

/// Backward against central differences at random parameter sites, in
/// train mode with batch norm. Errors are relative to the larger of the
/// two values, floored at 1e-3 of the largest gradient entry anywhere.
/// Sites whose perturbation flips a ReLU or pooling branch are redrawn.
/// Where kernels are shared, the shared gradient is also compared with
/// the sum over untied copies.
pub fn gradient_check(spec: &ModelSpec, seed: u64, opts: GradCheckOptions) -> Result<VerificationReport> {
    let mut g = random_graph(spec, BuildOptions::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a4d);
    let x = normal_tensor([opts.batch, spec.input_channels, opts.size, opts.size], &mut rng);
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let (_, node, tape) = forward_record(&g, Mode::Train, x.clone(), &labels)?;
    let grads = tape.backward(node)?;
    drop(tape);
    let (_, base_sig) = eval_loss(&g, &x, &labels)?;

    let all: Vec<ParamId> = g.params.iter().map(|(id, _)| id).collect();
    let scale = all.iter().map(|&id| grads.get(id).max_abs()).fold(0.0, f64::max);
    let shared = g.shared_params();
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    let mut checked = 0;
    let mut redraws = 0;
    while checked < opts.sites {
        if redraws > 50 * opts.sites {
            return Err(Error::Internal("could not find smooth finite-difference sites".into()));
        }
        let id = match shared.first() {
            Some(&s) if checked == 0 => s,
            _ => *all.choose(&mut rng).expect("graph has parameters"),
        };
        let k = rng.random_range(0..g.params.value(id).len());
        let w0 = g.params.value(id).data()[k];
        let mut diffs = [0.0; 2];
        let mut smooth = true;
        for (d, h) in diffs.iter_mut().zip([opts.step, opts.step / 2.0]) {
            g.params.value_mut(id).data_mut()[k] = w0 + h;
            let (lp, sp) = eval_loss(&g, &x, &labels)?;
            g.params.value_mut(id).data_mut()[k] = w0 - h;
            let (lm, sm) = eval_loss(&g, &x, &labels)?;
            g.params.value_mut(id).data_mut()[k] = w0;
            smooth &= sp == base_sig && sm == base_sig;
            *d = (lp - lm) / (2.0 * h);
        }
        if !smooth {
            redraws += 1;
            continue;
        }
        // Richardson step: cancels the h^2 term of the central difference.
        let numeric = (4.0 * diffs[1] - diffs[0]) / 3.0;
        let analytic = grads.get(id).data()[k];
        let err = relative_error(analytic, numeric, 1e-3 * scale);
        worst = worst.max(err);
        let name = &g.params.get(id).name;
        details.push(format!("{name}[{k}] analytic={analytic:.10e} numeric={numeric:.10e} rel={err:.2e}"));
        checked += 1;
    }
    details.push(format!("{redraws} sites redrawn at ReLU/pooling kinks"));

    if !shared.is_empty() {
        let untied_err = untied_sum_error(&g, &x, &labels, &grads)?;
        details.push(format!("shared kernels vs sum over untied copies: {untied_err:e}"));
        worst = worst.max(untied_err);
    }
    Ok(VerificationReport::new("gradient", worst, Bound::AtMost(opts.tolerance), fingerprint(spec, seed)).with_details(details))
}

/// Relative gap between each shared kernel's gradient and the summed
/// gradients of its untied copies (plus the loss gap, which must be 0).
fn untied_sum_error(
    g: &ModelGraph<f64>,
    x: &Tensor4<f64>,
    labels: &[usize],
    grads: &crate::autodiff::GradStore<f64>,
) -> Result<f64> {
    let u = g.untied()?;
    let (lt, _, _) = forward_record(g, Mode::Train, x.clone(), labels)?;
    let (lu, node, tape) = forward_record(&u, Mode::Train, x.clone(), labels)?;
    let ug = tape.backward(node)?;
    let mut sums: Vec<Option<Tensor4<f64>>> = vec![None; g.params.len()];
    let mut add = |tid: ParamId, uid: ParamId| {
        let v = ug.get(uid);
        match &mut sums[tid.0] {
            Some(s) => s.add_assign(v).expect("copies share a shape"),
            slot @ None => *slot = Some(v.clone()),
        }
    };
    for (t, s) in g.conv_sites().iter().zip(u.conv_sites().iter()) {
        add(t.weight, s.weight);
        if let (Some(tn), Some(sn)) = (t.norm, s.norm) {
            add(tn.gamma, sn.gamma);
            add(tn.beta, sn.beta);
        }
    }
    let mut worst = (lt - lu).abs();
    for (i, s) in sums.iter().enumerate() {
        if let Some(s) = s {
            let gt = grads.get(ParamId(i));
            let scale = gt.max_abs().max(s.max_abs());
            if scale > 0.0 {
                worst = worst.max(gt.max_abs_diff(s)? / scale);
            }
        }
    }
    Ok(worst)
}

/// One published parameter count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub table: &'static str,
    pub spec: String,
    pub classes: usize,
    pub input_channels: usize,
    pub stem: Stem,
    pub published_millions: f64,
    pub computed: usize,
    pub rel_err: f64,
    /// Rows outside the acceptance set are listed but do not gate.
    pub gated: bool,
}

impl TableRow {
    pub fn within(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

pub const TABLE_TOLERANCE: f64 = 0.02;

/// `(table, spec, classes, input channels, stem, published M params, gated)`
const TABLE_ROWS: &[(&str, &str, usize, usize, Stem, f64, bool)] = &[
    ("2", "ResNet[2,2,2,2]-[64,128,256,512]-Ali-Bli", 10, 1, Stem::Cifar, 11.0, true),
    ("2", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bli", 10, 1, Stem::Cifar, 8.0, true),
    ("2", "PreactResNet[2,2,2,2]-[64,128,256,512]-Ali-Bli", 10, 1, Stem::Cifar, 11.0, true),
    ("2", "PreactResNet[2,2,2,2]-[64,128,256,512]-Al-Bli", 10, 1, Stem::Cifar, 8.0, true),
    ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Ali-Bli", 100, 3, Stem::Cifar, 11.0, false),
    ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bli", 100, 3, Stem::Cifar, 8.1, true),
    ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Ali-Bl", 100, 3, Stem::Cifar, 9.7, true),
    ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bl", 100, 3, Stem::Cifar, 6.6, true),
    ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Ali-Bli", 100, 3, Stem::Cifar, 21.0, true),
    ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Al-Bli", 100, 3, Stem::Cifar, 13.0, true),
    ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Ali-Bl", 100, 3, Stem::Cifar, 15.0, true),
    ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Al-Bl", 100, 3, Stem::Cifar, 6.7, true),
    ("5", "MgNet[2,2,2,2]-[256]-Bl", 100, 3, Stem::Cifar, 8.3, true),
    ("5", "MgNet[2,2,2,2]-[512]-Bl", 100, 3, Stem::Cifar, 33.1, true),
    ("5", "MgNet[2,2,2,2]-[768]-Bl", 100, 3, Stem::Cifar, 74.4, false),
    ("5", "MgNet[2,2,2,2]-[1024]-Bl", 100, 3, Stem::Cifar, 132.2, true),
    ("5", "MgNet[2,2,2,2]-[32,64,128,256]-Bl", 100, 3, Stem::Cifar, 2.3, false),
    ("5", "MgNet[2,2,2,2]-[64,128,256,512]-Bl", 100, 3, Stem::Cifar, 12.5, false),
    ("5", "MgNet[2,2,2,2]-[128,256,512,1024]-Bl", 100, 3, Stem::Cifar, 37.5, false),
    ("5", "MgNet[2,2,2,2]-[256,512,1024,2048]-Bl", 100, 3, Stem::Cifar, 150.0, false),
    ("6", "MgNet[2,2,2,2]-[64,128,256,512]-Bl", 1000, 3, Stem::Imagenet, 9.9, true),
    ("6", "MgNet[2,2,2,2]-[128,256,512,1024]-Bl", 1000, 3, Stem::Imagenet, 38.5, true),
    ("7", "MgNet[2,2,2,2]-[256]-Bli", 100, 3, Stem::Cifar, 10.7, true),
    ("7", "MgNet[4,2,2,2]-[256]-Bl", 100, 3, Stem::Cifar, 8.3, false),
    ("7", "MgNet[4,2,2,2]-[256]-Bli", 100, 3, Stem::Cifar, 11.9, false),
    ("7", "MgNet[8,2,2,2]-[256]-Bl", 100, 3, Stem::Cifar, 8.3, false),
    ("7", "MgNet[8,2,2,2]-[256]-Bli", 100, 3, Stem::Cifar, 14.3, false),
    ("8", "MgNet[2,2,2,2]-[64,128,256,512]-Bli", 1000, 3, Stem::Imagenet, 13.0, false),
    ("8", "MgNet[2,2,4,2]-[64,128,256,512]-Bl", 1000, 3, Stem::Imagenet, 9.9, false),
    ("8", "MgNet[2,2,4,2]-[64,128,256,512]-Bli", 1000, 3, Stem::Imagenet, 14.7, false),
    ("8", "MgNet[2,2,2,2]-[128,256,512,1024]-Bli", 1000, 3, Stem::Imagenet, 51.1, false),
    ("8", "MgNet[2,2,4,2]-[128,256,512,1024]-Bl", 1000, 3, Stem::Imagenet, 38.5, false),
    ("8", "MgNet[2,2,4,2]-[128,256,512,1024]-Bli", 1000, 3, Stem::Imagenet, 55.7, false),
];

/// Counts every listed architecture with the default build options.
pub fn param_table_rows() -> Result<Vec<TableRow>> {
    TABLE_ROWS
        .iter()
        .map(|&(table, text, classes, input_channels, stem, published, gated)| {
            let spec = parse_model_spec(text)?.with_classes(classes).with_input_channels(input_channels).with_stem(stem);
            let computed = count_parameters(&spec, BuildOptions::default())?.total;
            let rel_err = (computed as f64 - published * 1e6).abs() / (published * 1e6);
            Ok(TableRow { table, spec: text.to_string(), classes, input_channels, stem, published_millions: published, computed, rel_err, gated })
        })
        .collect()
}

pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = format!("{:<5} {:<48} {:>7} {:>10} {:>12} {:>8}  gate\n", "table", "model", "classes", "published", "computed", "rel");
    for r in rows {
        out.push_str(&format!(
            "{:<5} {:<48} {:>7} {:>9.1}M {:>12} {:>7.2}%  {}\n",
            r.table,
            format!("{}{}", r.spec, if r.stem == Stem::Imagenet { " (imagenet)" } else { "" }),
            r.classes,
            r.published_millions,
            r.computed,
            100.0 * r.rel_err,
            match (r.gated, r.within(TABLE_TOLERANCE)) {
                (true, true) => "ok",
                (true, false) => "MISS",
                (false, true) => "(ok)",
                (false, false) => "(miss)",
            }
        ));
    }
    out
}

/// Worst relative error over the gated rows.
pub fn reproduce_param_tables() -> Result<(VerificationReport, Vec<TableRow>)> {
    let rows = param_table_rows()?;
    let worst = rows.iter().filter(|r| r.gated).map(|r| r.rel_err).fold(0.0, f64::max);
    let details = rows
        .iter()
        .filter(|r| r.gated && !r.within(TABLE_TOLERANCE))
        .map(|r| format!("table {} {}: {} vs {}M ({:+.1}%)", r.table, r.spec, r.computed, r.published_millions, 100.0 * (r.computed as f64 / (r.published_millions * 1e6) - 1.0)))
        .collect();
    let fp = Fingerprint { spec: "param-tables".into(), seed: 0, precision: Precision::Double };
    Ok((VerificationReport::new("param_tables", worst, Bound::AtMost(TABLE_TOLERANCE), fp).with_details(details), rows))
}

/// Counts of `MgNet[k,2,2,2]-[256]-Bl` (100 classes) for each `k`.
pub fn nu_invariance_counts(ks: &[usize]) -> Result<Vec<(usize, usize)>> {
    ks.iter()
        .map(|&k| {
            let spec = parse_model_spec(&format!("MgNet[{k},2,2,2]-[256]-Bl"))?.with_classes(100);
            Ok((k, count_parameters(&spec, BuildOptions::default())?.total))
        })
        .collect()
}

pub fn check_nu_invariance() -> Result<VerificationReport> {
    let counts = nu_invariance_counts(&[2, 4, 8, 16, 32])?;
    let spread = counts.iter().map(|c| c.1).max().unwrap_or(0) - counts.iter().map(|c| c.1).min().unwrap_or(0);
    let fp = Fingerprint { spec: "MgNet[k,2,2,2]-[256]-Bl".into(), seed: 0, precision: Precision::Double };
    let details = counts.iter().map(|(k, n)| format!("k={k}: {n}")).collect();
    Ok(VerificationReport::new("nu_invariance", spread as f64, Bound::AtMost(0.0), fp).with_details(details))
}

/// A random small MgNet spec: `J` in 1..=4, `nu` in 1..=3, channels in
/// 2..=16, either smoother sharing, occasionally distinct `(cu, cf)`.
pub fn random_mgnet_spec(rng: &mut impl Rng) -> ModelSpec {
    let j = rng.random_range(1..=4);
    let nu: Vec<usize> = (0..j).map(|_| rng.random_range(1..=3)).collect();
    let pairs = rng.random_bool(0.3);
    let cu: Vec<usize> = (0..j).map(|_| rng.random_range(2..=16)).collect();
    let cf: Vec<usize> = if pairs { (0..j).map(|_| rng.random_range(2..=16)).collect() } else { cu.clone() };
    let b = if rng.random_bool(0.5) { Sharing::PerLevel } else { Sharing::PerIteration };
    ModelSpec {
        family: Family::MgNet,
        nu,
        channels_u: cu,
        channels_f: cf,
        a_sharing: Sharing::PerLevel,
        b_sharing: b,
        a_form: None,
        b_form: None,
        num_classes: 10,
        input_channels: 3,
        stem: Stem::Cifar,
    }
}

/// One tiny spec per family and sharing combination.
pub fn gradient_check_specs() -> Vec<ModelSpec> {
    [
        "MgNet[2,2]-[4]-Bl",
        "MgNet[2,2]-[(3,4),(4,5)]-Bli",
        "GDFI[2,2]-[4]-Bl-A:K-B:sKs",
        "GDFI[2,1]-[4]-Bli-A:sK-B:Ks",
        "PreactResNet[2,2]-[4]-Al-Bl",
        "PreactResNet[2,2]-[4]-Al-Bli",
        "PreactResNet[2,2]-[4]-Ali-Bl",
        "PreactResNet[1,1]-[4]-Ali-Bli",
        "ResNet[2,2]-[4]-Al-Bl",
        "ResNet[2,2]-[4]-Al-Bli",
        "ResNet[2,2]-[4]-Ali-Bl",
        "ResNet[2,2]-[4]-Ali-Bli",
    ]
    .iter()
    .map(|t| parse_model_spec(t).expect("built-in spec parses"))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Duality,
    Positivity,
    Gdfi,
    Grad,
    Tables,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "duality" => Suite::Duality,
            "positivity" => Suite::Positivity,
            "gdfi" => Suite::Gdfi,
            "grad" => Suite::Grad,
            "tables" => Suite::Tables,
            "all" => Suite::All,
            other => return Err(Error::Config(format!("unknown suite `{other}`"))),
        })
    }
}

/// Runs a suite; reports arrive through `emit` as they complete.
pub fn run_suite(suite: Suite, seed: u64, mut emit: impl FnMut(&VerificationReport)) -> Result<Vec<VerificationReport>> {
    let mut out = Vec::new();
    let mut push = |r: VerificationReport, out: &mut Vec<VerificationReport>| {
        emit(&r);
        out.push(r);
    };
    let all = suite == Suite::All;
    if all || suite == Suite::Tables {
        push(reproduce_param_tables()?.0, &mut out);
        push(check_nu_invariance()?, &mut out);
    }
    if all || suite == Suite::Duality {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        push(check_duality(&parse_model_spec("MgNet[2,2]-[8]-Bl")?, seed)?, &mut out);
        push(check_duality(&parse_model_spec("MgNet[2,2,2,2]-[16]-Bli")?, seed)?, &mut out);
        for k in 0..20 {
            let spec = random_mgnet_spec(&mut rng);
            push(check_duality(&spec, seed.wrapping_add(k))?, &mut out);
        }
    }
    if all || suite == Suite::Positivity {
        push(check_positivity(&parse_model_spec("MgNet[2,2]-[8]-Bl")?, seed, 100)?, &mut out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1);
        let spec = random_mgnet_spec(&mut rng);
        push(check_positivity(&spec, seed, 20)?, &mut out);
    }
    if all || suite == Suite::Gdfi {
        let spec = parse_model_spec("GDFI[2,2]-[8]-Bl-A:K-B:sKs")?;
        push(check_gdfi_degeneracy(&spec, seed)?, &mut out);
        push(check_gdfi_negative_control(&spec, seed)?, &mut out);
    }
    if all || suite == Suite::Grad {
        for spec in gradient_check_specs() {
            push(gradient_check(&spec, seed, GradCheckOptions::default())?, &mut out);
        }
    }
    Ok(out)
}

/// Forward features of any family, for callers comparing graphs.
pub fn forward_features(g: &ModelGraph<f64>, x: &Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>> {
    let mut ev = Eval::new(g.context(mode));
    let h = features(g, &mut ev, x)?;
    Ok(ev.value(&h).clone())
}
