//! Analytic gradients against central finite differences.

mod common;

use simdis_core::config::{Scheme, ViewTarget, ViewTargetSet};
use simdis_core::losses::{byol_loss, byol_loss_grad, normalized_mse, normalized_mse_grad, total_student_loss, LossWeights};
use simdis_core::models::{build_student, build_teacher, ViewBundle};
use simdis_core::rng::{below, normal};

use common::{central_diff, randn, rel_err, rng, student_bundle, teacher_bundle, tiny_config};

const H: f64 = 1e-5;

#[test]
fn normalized_mse_gradient() {
    let mut r = rng(11);
    for _ in 0..200 {
        let d = 2 + below(&mut r, 40);
        let mut p: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let z: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let (_, g) = normalized_mse_grad(&p, &z).unwrap();
        let num = central_diff(&mut p, H, |x| normalized_mse(x, &z).unwrap());
        assert!(rel_err(&g, &num) < 1e-6, "d={d}: {}", rel_err(&g, &num));
    }
}

#[test]
fn byol_loss_gradient() {
    let mut r = rng(12);
    for _ in 0..100 {
        let b = 1 + below(&mut r, 4);
        let d = 2 + below(&mut r, 8);
        let bundle = student_bundle(&mut r, b, d);
        let (_, g) = byol_loss_grad(&bundle).unwrap();
        for (which, analytic) in [(0, &g.v), (1, &g.vp)] {
            let mut work = bundle.clone();
            let mut x = pred_of(&work, which).data().to_vec();
            let num = central_diff(&mut x, H, |x| {
                set_pred(&mut work, which, x);
                byol_loss(&work).unwrap()
            });
            assert!(rel_err(analytic.data(), &num) < 1e-6);
        }
    }
}

fn pred_of(b: &ViewBundle, which: usize) -> &simdis_core::tensor::Tensor {
    let (bp, dp) = (b.byol_pred.as_ref().unwrap(), b.distill_pred.as_ref().unwrap());
    [&bp.v, &bp.vp, &dp.v, &dp.vp][which]
}

fn set_pred(b: &mut ViewBundle, which: usize, x: &[f64]) {
    let t = match which {
        0 => &mut b.byol_pred.as_mut().unwrap().v,
        1 => &mut b.byol_pred.as_mut().unwrap().vp,
        2 => &mut b.distill_pred.as_mut().unwrap().v,
        _ => &mut b.distill_pred.as_mut().unwrap().vp,
    };
    t.data_mut().copy_from_slice(x);
}

#[test]
fn total_student_loss_gradient() {
    let mut r = rng(13);
    for i in 0..100 {
        let b = 1 + below(&mut r, 3);
        let d = 2 + below(&mut r, 6);
        let s = student_bundle(&mut r, b, d);
        let t = teacher_bundle(&mut r, b, d);
        let set = if i % 2 == 0 { ViewTargetSet::full() } else { ViewTargetSet::single(ViewTarget::ThatVp) };
        let symmetric = i % 3 == 0;
        let w = LossWeights { byol: 0.5 + normal(&mut r).abs(), distill: 0.5 + normal(&mut r).abs() };
        let (_, g) = total_student_loss(w, set, symmetric, &s, Some(&t)).unwrap();
        let gb = g.byol.unwrap();
        let gd = g.distill.unwrap();
        for (which, analytic) in [(0, &gb.v), (1, &gb.vp), (2, &gd.v), (3, &gd.vp)] {
            let mut work = s.clone();
            let mut x = pred_of(&work, which).data().to_vec();
            let num = central_diff(&mut x, H, |x| {
                set_pred(&mut work, which, x);
                total_student_loss(w, set, symmetric, &work, Some(&t)).unwrap().0.total
            });
            let err = rel_err(analytic.data(), &num);
            let floor = num.iter().chain(analytic.data()).all(|v| v.abs() < 1e-9);
            assert!(floor || err < 1e-6, "instance {i} head {which}: {err}");
        }
    }
}

/// Whole-network check: the loss is re-evaluated with every projection held
/// at its original value, matching the stop-gradient rule.
#[test]
fn student_network_gradient() {
    let cfg = tiny_config(Scheme::SimdisOn7v).validated().unwrap();
    let mut m = build_student(&cfg, 10).unwrap();
    let mut teacher = build_teacher(&cfg, 10).unwrap();
    let mut r = rng(14);
    let v = randn(&mut r, &[4, 3, 8, 8]);
    let vp = randn(&mut r, &[4, 3, 8, 8]);
    let tb = teacher.forward_frozen(&v, &vp).unwrap();
    let w = LossWeights { byol: 1.0, distill: 1.0 };
    let targets = cfg.targets();

    m.zero_grad();
    let (b0, trace) = m.forward_views(&v, &vp).unwrap();
    let (_, g) = total_student_loss(w, targets, false, &b0, Some(&tb)).unwrap();
    m.backward(&trace, &g).unwrap();
    let analytic: Vec<Vec<f64>> = m.trainable_params().iter().map(|p| p.grad.clone()).collect();

    let loss = |m: &mut simdis_core::models::SiameseModel| {
        let (mut b, _) = m.forward_views(&v, &vp).unwrap();
        b.online.v.z = b0.online.v.z.clone();
        b.online.vp.z = b0.online.vp.z.clone();
        b.target = b0.target.clone();
        total_student_loss(w, targets, false, &b, Some(&tb)).unwrap().0.total
    };
    for (pi, a) in analytic.iter().enumerate() {
        let len = a.len();
        let idx: Vec<usize> = (0..len).step_by((len / 6).max(1)).collect();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for &j in &idx {
            let orig = m.trainable_params()[pi].value[j];
            m.trainable_params_mut()[pi].value[j] = orig + H;
            let up = loss(&mut m);
            m.trainable_params_mut()[pi].value[j] = orig - H;
            let down = loss(&mut m);
            m.trainable_params_mut()[pi].value[j] = orig;
            num.push((up - down) / (2.0 * H));
            ana.push(a[j]);
        }
        let d = rel_err(&ana, &num);
        let scale = ana.iter().chain(&num).fold(0.0f64, |m, v| m.max(v.abs()));
        // Biases feeding batch norm have zero gradient; FD there is noise.
        assert!(d < 1e-4 || scale < 1e-7, "param tensor {pi}: rel {d:.2e} scale {scale:.2e}");
    }
}
