mod common;

use proptest::prelude::*;
use simdis_core::config::{ViewTarget, ViewTargetSet};
use simdis_core::losses::{byol_loss, distill_loss, normalized_mse, total_student_loss, LossWeights};

use common::{rng, student_bundle, teacher_bundle};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim).prop_filter("norm away from zero", |v| {
        v.iter().map(|x| x * x).sum::<f64>() > 1e-4
    })
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..48).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d)))
}

fn target_set() -> impl Strategy<Value = ViewTargetSet> {
    (1u8..128).prop_map(|bits| {
        let members: Vec<ViewTarget> = ViewTarget::ALL
            .into_iter()
            .enumerate()
            .filter(|(i, _)| bits & (1 << i) != 0)
            .map(|(_, t)| t)
            .collect();
        ViewTargetSet::from_targets(&members).unwrap()
    })
}

proptest! {
    #[test]
    fn nmse_is_two_minus_two_cosine((p, z) in vec_pair()) {
        let l = normalized_mse(&p, &z).unwrap();
        prop_assert!((l - (2.0 - 2.0 * cosine(&p, &z))).abs() < 1e-9);
        prop_assert!((0.0..=4.0).contains(&l));
    }

    #[test]
    fn nmse_ignores_positive_scale((p, z) in vec_pair(), a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        let ps: Vec<f64> = p.iter().map(|x| a * x).collect();
        let zs: Vec<f64> = z.iter().map(|x| b * x).collect();
        let l = normalized_mse(&p, &z).unwrap();
        prop_assert!((normalized_mse(&ps, &zs).unwrap() - l).abs() < 1e-9);
    }

    #[test]
    fn nmse_vanishes_on_aligned_vectors(p in (1usize..32).prop_flat_map(nonzero_vec), a in 1e-2f64..1e2) {
        let z: Vec<f64> = p.iter().map(|x| a * x).collect();
        prop_assert!(normalized_mse(&p, &z).unwrap() < 1e-9);
        let neg: Vec<f64> = z.iter().map(|x| -x).collect();
        prop_assert!((normalized_mse(&p, &neg).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn byol_is_symmetric_in_views(seed in any::<u64>(), b in 1usize..6, d in 1usize..10) {
        let bundle = student_bundle(&mut rng(seed), b, d);
        let l = byol_loss(&bundle).unwrap();
        let s = byol_loss(&bundle.swapped()).unwrap();
        prop_assert!((l - s).abs() <= 1e-12 * l.abs().max(1.0));
    }

    #[test]
    fn distillation_is_monotone_in_targets(seed in any::<u64>(), a in target_set(), extra in target_set()) {
        let mut r = rng(seed);
        let s = student_bundle(&mut r, 3, 5);
        let t = teacher_bundle(&mut r, 3, 5);
        let mut union = a;
        for x in extra.iter() {
            union.insert(x);
        }
        let la = total_student_loss(LossWeights { byol: 1.0, distill: 1.0 }, a, false, &s, Some(&t)).unwrap().0;
        let lu = total_student_loss(LossWeights { byol: 1.0, distill: 1.0 }, union, false, &s, Some(&t)).unwrap().0;
        prop_assert!(lu.total >= la.total);
        prop_assert_eq!(la.byol_term, lu.byol_term);
    }

    #[test]
    fn distillation_sums_its_terms(seed in any::<u64>(), set in target_set()) {
        prop_assume!(!set.distilled().is_empty());
        let mut r = rng(seed);
        let s = student_bundle(&mut r, 2, 4);
        let t = teacher_bundle(&mut r, 2, 4);
        let d = distill_loss(&s, Some(&t), set, false).unwrap();
        prop_assert_eq!(d.per_target.len(), set.distilled().len());
        prop_assert!(!d.per_target.contains_key(&ViewTarget::ShatVp));
        let sum: f64 = d.per_target.values().sum();
        prop_assert!((sum - d.value).abs() < 1e-12);
    }

    #[test]
    fn weights_scale_terms_linearly(seed in any::<u64>(), wb in 0.0f64..3.0, wd in 0.0f64..3.0) {
        let mut r = rng(seed);
        let s = student_bundle(&mut r, 2, 4);
        let t = teacher_bundle(&mut r, 2, 4);
        let set = ViewTargetSet::full();
        let (rep, _) = total_student_loss(LossWeights { byol: wb, distill: wd }, set, false, &s, Some(&t)).unwrap();
        prop_assert!((rep.total - (wb * rep.byol_term + wd * rep.distill_term)).abs() < 1e-12);
    }
}

#[test]
fn byol_target_alone_is_plain_byol() {
    let mut r = rng(7);
    let s = student_bundle(&mut r, 4, 6);
    let set = ViewTargetSet::single(ViewTarget::ShatVp);
    let (rep, grads) = total_student_loss(LossWeights { byol: 1.0, distill: 1.0 }, set, false, &s, None).unwrap();
    assert_eq!(rep.total, byol_loss(&s).unwrap());
    assert!(grads.distill.is_none());
}

#[test]
fn teacher_targets_without_teacher_fail() {
    let s = student_bundle(&mut rng(1), 2, 3);
    assert!(distill_loss(&s, None, ViewTargetSet::single(ViewTarget::ThatVp), false).is_err());
}

#[test]
fn mismatched_dims_fail() {
    assert!(normalized_mse(&[1.0, 2.0], &[1.0]).is_err());
}
