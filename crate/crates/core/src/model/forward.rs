//! Forward passes, written once against [`Executor`].

use crate::autodiff::{Executor, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::graph::{ConvUnit, Levels, ModelGraph};
use crate::model::spec::{Family, OperatorForm, Stem};
use crate::ops::norm::Mode;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Intermediate MgNet states: `u[l][i]` is `u^{l+1,i}` for `i = 0..=nu`.
#[derive(Debug, Clone, Default)]
pub struct MgTrace<T> {
    pub f: Vec<Tensor4<T>>,
    pub u: Vec<Vec<Tensor4<T>>>,
}

fn unit<T: Scalar, E: Executor<T>>(ex: &mut E, x: &E::Var, u: &ConvUnit) -> Result<E::Var> {
    let y = ex.conv(x, u.weight, None, u.stride)?;
    match u.norm {
        Some(slot) => ex.batch_norm(&y, slot),
        None => Ok(y),
    }
}

/// `u` applied to an all-zero input: a bias-free convolution of zeros is
/// zero, so only the normalization runs.
fn unit_on_zero<T: Scalar, E: Executor<T>>(ex: &mut E, out: Shape4, u: &ConvUnit) -> Result<E::Var> {
    let z = ex.input(Tensor4::zeros(out));
    match u.norm {
        Some(slot) => ex.batch_norm(&z, slot),
        None => Ok(z),
    }
}

fn form<T: Scalar, E: Executor<T>>(ex: &mut E, x: &E::Var, u: &ConvUnit, f: OperatorForm) -> Result<E::Var> {
    let y = if f.activation_before {
        let s = ex.relu(x);
        unit(ex, &s, u)?
    } else {
        unit(ex, x, u)?
    };
    Ok(if f.activation_after { ex.relu(&y) } else { y })
}

fn form_on_zero<T: Scalar, E: Executor<T>>(ex: &mut E, out: Shape4, u: &ConvUnit, f: OperatorForm) -> Result<E::Var> {
    let y = unit_on_zero(ex, out, u)?;
    Ok(if f.activation_after { ex.relu(&y) } else { y })
}

fn stem<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, x: &E::Var) -> Result<E::Var> {
    let c = ex.value(x).shape().c;
    if c != g.spec.input_channels {
        return Err(Error::shape(format!("model expects {} input channels, got {c}", g.spec.input_channels)));
    }
    let y = unit(ex, x, &g.stem)?;
    let y = ex.relu(&y);
    Ok(match g.spec.stem {
        Stem::Cifar => y,
        Stem::Imagenet => ex.max_pool(&y),
    })
}

fn with_channels(s: Shape4, c: usize) -> Shape4 {
    Shape4::new(s.n, c, s.h, s.w)
}

/// MgNet: per grid, `nu` smoothing steps
/// `u <- u + σ(B_i * σ(f - A * u))`, then `u' = Π *2 u` and
/// `f' = R *2 (f - A * u) + A' * u'`. Returns `u` on the last grid.
pub fn mgnet_forward<T: Scalar, E: Executor<T>>(
    g: &ModelGraph<T>,
    ex: &mut E,
    input: &E::Var,
    mut trace: Option<&mut MgTrace<T>>,
) -> Result<E::Var> {
    let levels = match &g.levels {
        Levels::Mg(l) => l,
        Levels::Res(_) => return Err(Error::Config("mgnet_forward needs an MgNet graph".into())),
    };
    let mut f = stem(g, ex, input)?;
    let fshape = ex.value(&f).shape();
    let mut u = ex.input(Tensor4::zeros(with_channels(fshape, g.spec.channels_u[0])));
    let mut au = unit_on_zero(ex, fshape, &levels[0].a)?;
    for (l, lv) in levels.iter().enumerate() {
        if let Some(t) = trace.as_deref_mut() {
            t.f.push(ex.value(&f).clone());
            t.u.push(vec![ex.value(&u).clone()]);
        }
        for (i, b) in lv.b.iter().enumerate() {
            if i > 0 {
                au = unit(ex, &u, &lv.a)?;
            }
            let r = ex.sub(&f, &au)?;
            let s = ex.relu(&r);
            let t = unit(ex, &s, b)?;
            let t = ex.relu(&t);
            u = ex.add(&u, &t)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.u[l].push(ex.value(&u).clone());
            }
        }
        if let (Some(pi), Some(rk)) = (&lv.pi, &lv.r) {
            let au_end = unit(ex, &u, &lv.a)?;
            let r = ex.sub(&f, &au_end)?;
            u = unit(ex, &u, pi)?;
            let rf = unit(ex, &r, rk)?;
            au = unit(ex, &u, &levels[l + 1].a)?;
            f = ex.add(&rf, &au)?;
        }
    }
    Ok(u)
}

/// GDFI: `u <- u + 𝓑_i(f - 𝓐(u))` with `𝓐`, `𝓑` in the spec's forms, and
/// transitions `u' = Π *2 u`, `f' = R *2 (f - 𝓐(u)) + 𝓐'(u')`.
pub fn gdfi_forward<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, input: &E::Var) -> Result<E::Var> {
    let (Some(af), Some(bf)) = (g.spec.a_form, g.spec.b_form) else {
        return Err(Error::Config("gdfi_forward needs operator forms".into()));
    };
    let levels = match &g.levels {
        Levels::Mg(l) => l,
        Levels::Res(_) => return Err(Error::Config("gdfi_forward needs a grid graph".into())),
    };
    let mut f = stem(g, ex, input)?;
    let fshape = ex.value(&f).shape();
    let mut u = ex.input(Tensor4::zeros(with_channels(fshape, g.spec.channels_u[0])));
    let mut first_a = Some(form_on_zero(ex, fshape, &levels[0].a, af)?);
    for (l, lv) in levels.iter().enumerate() {
        for b in &lv.b {
            let a_u = match first_a.take() {
                Some(v) => v,
                None => form(ex, &u, &lv.a, af)?,
            };
            let r = ex.sub(&f, &a_u)?;
            let t = form(ex, &r, b, bf)?;
            u = ex.add(&u, &t)?;
        }
        if let (Some(pi), Some(rk)) = (&lv.pi, &lv.r) {
            let a_u = form(ex, &u, &lv.a, af)?;
            let r = ex.sub(&f, &a_u)?;
            u = unit(ex, &u, pi)?;
            let rf = unit(ex, &r, rk)?;
            let a_next = form(ex, &u, &levels[l + 1].a, af)?;
            f = ex.add(&rf, &a_next)?;
            first_a = Some(a_next);
        }
    }
    Ok(u)
}

/// Pre-activation blocks `r + A * σ(B * σ(r))`; the pooling block is
/// `R *2 r + A0 * σ(B0 *2 σ(r))` with a 1x1 projection `R`.
pub fn preact_resnet_forward<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, input: &E::Var) -> Result<E::Var> {
    let levels = match &g.levels {
        Levels::Res(l) => l,
        Levels::Mg(_) => return Err(Error::Config("preact_resnet_forward needs a residual graph".into())),
    };
    let mut r = stem(g, ex, input)?;
    for lv in levels {
        for blk in &lv.blocks {
            let s = ex.relu(&r);
            let t = unit(ex, &s, &blk.b)?;
            let t = ex.relu(&t);
            let t = unit(ex, &t, &blk.a)?;
            let skip = match &blk.projection {
                Some(p) => unit(ex, &r, p)?,
                None => r,
            };
            r = ex.add(&skip, &t)?;
        }
    }
    Ok(r)
}

/// Post-activation blocks `σ(r + A * σ(B * r))`; the pooling block is
/// `σ(R *2 r + A0 * σ(B0 *2 r))`.
pub fn resnet_forward<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, input: &E::Var) -> Result<E::Var> {
    let levels = match &g.levels {
        Levels::Res(l) => l,
        Levels::Mg(_) => return Err(Error::Config("resnet_forward needs a residual graph".into())),
    };
    let mut r = stem(g, ex, input)?;
    for lv in levels {
        for blk in &lv.blocks {
            let t = unit(ex, &r, &blk.b)?;
            let t = ex.relu(&t);
            let t = unit(ex, &t, &blk.a)?;
            let skip = match &blk.projection {
                Some(p) => unit(ex, &r, p)?,
                None => r,
            };
            let s = ex.add(&skip, &t)?;
            r = ex.relu(&s);
        }
    }
    Ok(r)
}

/// Final feature map of the model's family.
pub fn features<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, input: &E::Var) -> Result<E::Var> {
    match g.spec.family {
        Family::MgNet => mgnet_forward(g, ex, input, None),
        Family::Gdfi => gdfi_forward(g, ex, input),
        Family::PreactResNet => preact_resnet_forward(g, ex, input),
        Family::ResNet => resnet_forward(g, ex, input),
    }
}

/// Average-pooled features through the linear head.
pub fn logits<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, input: &E::Var) -> Result<E::Var> {
    let h = features(g, ex, input)?;
    let p = ex.global_avg_pool(&h);
    ex.linear(&p, g.head_w, g.head_b)
}

pub fn loss<T: Scalar, E: Executor<T>>(g: &ModelGraph<T>, ex: &mut E, input: &E::Var, labels: &[usize]) -> Result<E::Var> {
    let z = logits(g, ex, input)?;
    ex.softmax_ce(&z, labels)
}

/// Records a full forward pass and returns the loss value, its node, and
/// the tape for [`Tape::backward`].
pub fn forward_record<'a, T: Scalar>(
    g: &'a ModelGraph<T>,
    mode: Mode,
    input: Tensor4<T>,
    labels: &[usize],
) -> Result<(T, NodeId, Tape<'a, T>)> {
    let mut tape = Tape::new(g.context(mode));
    let x = tape.input(input);
    let l = loss(g, &mut tape, &x, labels)?;
    let v = tape.value(&l).data()[0];
    Ok((v, l, tape))
}
