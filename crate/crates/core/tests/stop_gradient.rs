mod common;

use proptest::prelude::*;
use simdis_core::config::{Scheme, ViewTargetSet};
use simdis_core::losses::{total_student_loss, LossWeights};
use simdis_core::models::{build_student, build_teacher};
use simdis_core::nn::{digest, Module};

use common::{randn, rng, tiny_config};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Only the student's online branch and heads receive gradient.
    #[test]
    fn student_loss_reaches_no_target_or_teacher(seed in any::<u64>(), bits in 1u8..128, symmetric in any::<bool>()) {
        let cfg = tiny_config(Scheme::SimdisOn7v).validated().unwrap();
        let mut s = build_student(&cfg, 10).unwrap();
        let mut t = build_teacher(&cfg, 10).unwrap();
        let mut r = rng(seed);
        let v = randn(&mut r, &[3, 3, 8, 8]);
        let vp = randn(&mut r, &[3, 3, 8, 8]);
        let set = ViewTargetSet::from_targets(
            &simdis_core::config::ViewTarget::ALL.into_iter().enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0).map(|(_, x)| x).collect::<Vec<_>>(),
        ).unwrap();
        prop_assume!(!set.distilled().is_empty());

        let (tb, t_trace) = t.forward_views(&v, &vp).unwrap();
        drop(t_trace);
        t.zero_grad();
        s.zero_grad();
        let (sb, trace) = s.forward_views(&v, &vp).unwrap();
        let (_, g) = total_student_loss(LossWeights { byol: 1.0, distill: 1.0 }, set, symmetric, &sb, Some(&tb)).unwrap();
        s.backward(&trace, &g).unwrap();

        prop_assert!(s.target.params().iter().all(|p| p.grad.iter().all(|&x| x == 0.0)));
        prop_assert!(t.params().iter().all(|p| p.grad.iter().all(|&x| x == 0.0)));
        prop_assert!(s.trainable_params().iter().any(|p| p.grad.iter().any(|&x| x != 0.0)));
        // Parameter values are untouched; only BN running statistics moved.
        let values: Vec<Vec<f64>> = t.params().iter().map(|p| p.value.clone()).collect();
        let fresh = build_teacher(&cfg, 10).unwrap();
        prop_assert_eq!(values, fresh.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>());
    }
}

#[test]
fn frozen_forward_leaves_teacher_unchanged() {
    let mut cfg = tiny_config(Scheme::SimdisOff);
    cfg.pretrain_teacher = true;
    let cfg = cfg.validated().unwrap();
    let mut t = build_teacher(&cfg, 10).unwrap();
    let before = digest(&t);
    let mut r = rng(3);
    let v = randn(&mut r, &[2, 3, 8, 8]);
    t.forward_frozen(&v, &v).unwrap();
    assert_eq!(digest(&t), before);
}
