//! Tape recording and reverse-mode gradients on whole models.

use mgnetlab::autodiff::{BranchSignature, Context};
use mgnetlab::model::forward::{forward_record, loss};
use mgnetlab::verify::normal_tensor;
use mgnetlab::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    normal_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn plain_loss(g: &ModelGraph<f64>, x: &Tensor4<f64>, labels: &[usize]) -> f64 {
    signed_loss(g, x, labels).0
}

fn signed_loss(g: &ModelGraph<f64>, x: &Tensor4<f64>, labels: &[usize]) -> (f64, BranchSignature) {
    let mut ev = Eval::new(g.context(Mode::Train));
    let l = loss(g, &mut ev, x, labels).unwrap().data()[0];
    (l, ev.signature())
}

#[test]
fn linear_head_on_zero_input_is_ln2() {
    let mut ps = ParamStore::<f64>::new();
    let w = ps.push("w", ParamKind::LinearWeight, Tensor4::full([2, 3, 1, 1], 0.4));
    let b = ps.push("b", ParamKind::Bias, Tensor4::zeros([1, 2, 1, 1]));
    let mut tape = Tape::new(Context { params: &ps, stats: &[], eps: 1e-5, mode: Mode::Train });
    let x = tape.input(Tensor4::zeros([1, 3, 1, 1]));
    let z = tape.linear(&x, w, b).unwrap();
    let l = tape.softmax_ce(&z, &[1]).unwrap();
    assert!((tape.value(&l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

/// Primitive count of `MgNet[1,1]-[c]-Bl` with batch norm:
/// input 1; stem conv+bn+relu 3; u^{1,0} input 1; A*0 as input+bn 2;
/// grid 1 step sub, relu, conv, bn, relu, add 6; transition A*u (conv+bn),
/// sub, Pi (conv+bn), R (conv+bn), A'*u' (conv+bn), add 10; grid 2 step 6;
/// head pool, linear, loss 3.
const MGNET_11_NODES: usize = 1 + 3 + 1 + 2 + 6 + 10 + 6 + 3;

#[test]
fn tape_has_one_node_per_primitive() {
    let g: ModelGraph<f64> = build_model(&parse_model_spec("MgNet[1,1]-[4]-Bl").unwrap(), BuildOptions::default(), 1).unwrap();
    let x = input([1, 3, 8, 8], 2);
    let (l, _, tape) = forward_record(&g, Mode::Train, x.clone(), &[3]).unwrap();
    assert!(l.is_finite());
    assert_eq!(tape.len(), MGNET_11_NODES);
    let mut ev = Eval::new(g.context(Mode::Train));
    let xv = ev.input(x);
    loss(&g, &mut ev, &xv, &[3]).unwrap();
    assert_eq!(ev.op_count(), MGNET_11_NODES);
    let names = tape.op_names();
    let count = |n: &str| names.iter().filter(|&&m| m == n).count();
    assert_eq!(count("conv"), 1 + 1 + 4 + 1);
    assert_eq!(count("batch_norm"), count("conv") + 1);
    assert_eq!(count("relu"), 1 + 2 + 2);
}

#[test]
fn recorded_loss_equals_plain_loss() {
    for text in ["MgNet[2,1]-[3]-Bli", "GDFI[1,2]-[2]-Bl-A:Ks-B:sK", "ResNet[1,1]-[3]-Al-Bl", "PreactResNet[2]-[3]-Ali-Bli"] {
        let g: ModelGraph<f64> = build_model(&parse_model_spec(text).unwrap(), BuildOptions::default(), 3).unwrap();
        let x = input([2, 3, 6, 6], 4);
        let (l, _, _) = forward_record(&g, Mode::Train, x.clone(), &[0, 5]).unwrap();
        assert_eq!(l.to_bits(), plain_loss(&g, &x, &[0, 5]).to_bits(), "{text}");
    }
}

#[test]
fn finite_differences_on_small_mgnet() {
    let spec = parse_model_spec("MgNet[1,1]-[2]-Bl").unwrap().with_input_channels(1);
    let mut g: ModelGraph<f64> = build_model(&spec, BuildOptions::default(), 5).unwrap();
    let x = input([1, 1, 6, 6], 6);
    let labels = [7];
    let (_, node, tape) = forward_record(&g, Mode::Train, x.clone(), &labels).unwrap();
    let grads = tape.backward(node).unwrap();
    drop(tape);
    let scale = grads.iter().map(|(_, t)| t.max_abs()).fold(0.0, f64::max);
    let ids: Vec<ParamId> = g.params.iter().map(|(id, _)| id).collect();
    let base = signed_loss(&g, &x, &labels).1;
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        for k in 0..g.params.value(id).len() {
            let w0 = g.params.value(id).data()[k];
            let mut d = [0.0; 2];
            let mut smooth = true;
            for (slot, step) in d.iter_mut().zip([h, h / 2.0]) {
                g.params.value_mut(id).data_mut()[k] = w0 + step;
                let (lp, sp) = signed_loss(&g, &x, &labels);
                g.params.value_mut(id).data_mut()[k] = w0 - step;
                let (lm, sm) = signed_loss(&g, &x, &labels);
                smooth &= sp == base && sm == base;
                *slot = (lp - lm) / (2.0 * step);
            }
            g.params.value_mut(id).data_mut()[k] = w0;
            // A stencil that moves any ReLU across its kink has no
            // meaningful central difference.
            if !smooth {
                continue;
            }
            let numeric = (4.0 * d[1] - d[0]) / 3.0;
            let analytic = grads.get(id).data()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3 * scale);
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} smooth sites");
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn shared_kernel_gradient_is_the_sum_over_untied_copies() {
    for text in ["MgNet[3,2]-[3]-Bl", "ResNet[2,3]-[3]-Al-Bl", "PreactResNet[3,2]-[2]-Al-Bl"] {
        let g: ModelGraph<f64> = build_model(&parse_model_spec(text).unwrap(), BuildOptions::default(), 7).unwrap();
        let u = g.untied().unwrap();
        let x = input([2, 3, 8, 8], 8);
        let labels = [1, 2];
        let (_, n1, t1) = forward_record(&g, Mode::Train, x.clone(), &labels).unwrap();
        let gt = t1.backward(n1).unwrap();
        let (_, n2, t2) = forward_record(&u, Mode::Train, x.clone(), &labels).unwrap();
        let gu = t2.backward(n2).unwrap();
        let shared = g.shared_params();
        assert!(!shared.is_empty(), "{text}");
        for id in shared {
            let name = &g.params.get(id).name;
            // Untied copies are named like the tied kernel plus an index.
            let mut sum = Tensor4::<f64>::zeros(g.params.value(id).shape());
            let mut copies = 0;
            for (uid, p) in u.params.iter() {
                let base = p.name.trim_end_matches(|c: char| c.is_ascii_digit());
                if base == name.as_str() && g.params.find(&p.name).is_none() {
                    sum.add_assign(gu.get(uid)).unwrap();
                    copies += 1;
                }
            }
            assert!(copies >= 2, "{text}: {name} has {copies} copies");
            let d = sum.max_abs_diff(gt.get(id)).unwrap();
            assert!(d <= 1e-12 * (1.0 + sum.max_abs()), "{text}: {name} off by {d:e}");
        }
    }
}

#[test]
fn backward_twice_gives_identical_gradients() {
    let g: ModelGraph<f64> = build_model(&parse_model_spec("PreactResNet[2,1]-[3]-Al-Bli").unwrap(), BuildOptions::default(), 9).unwrap();
    let (_, n, tape) = forward_record(&g, Mode::Train, input([2, 3, 8, 8], 10), &[4, 4]).unwrap();
    let a = tape.backward(n).unwrap();
    let b = tape.backward(n).unwrap();
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn gradient_shapes_mirror_parameters() {
    let g: ModelGraph<f32> = build_model(&parse_model_spec("GDFI[1,1]-[(2,3),(4,5)]-Bli-A:sKs-B:K").unwrap(), BuildOptions::default(), 11).unwrap();
    let (_, n, tape) = forward_record(&g, Mode::Train, input([2, 3, 8, 8], 12).cast(), &[0, 1]).unwrap();
    let grads = tape.backward(n).unwrap();
    assert_eq!(grads.len(), g.params.len());
    for (id, p) in g.params.iter() {
        assert_eq!(grads.get(id).shape(), p.value.shape());
    }
}
