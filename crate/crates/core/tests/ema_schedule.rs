mod common;

use proptest::prelude::*;
use simdis_core::config::Scheme;
use simdis_core::models::{build_student, ema_update, tau_at, TauSchedule};
use simdis_core::nn::Module;
use simdis_core::optim::{step_lr, LrSchedule};
use simdis_core::rng::normal;

use common::{rng, tiny_config};

proptest! {
    #[test]
    fn tau_ramps_monotonically_to_one(base in 0.0f64..0.999, total in 1u64..5000) {
        let s = TauSchedule::new(base, total);
        prop_assert_eq!(tau_at(&s, 0).unwrap(), base);
        prop_assert_eq!(tau_at(&s, total).unwrap(), 1.0);
        let mut prev = base;
        for k in 1..=total.min(400) {
            let t = tau_at(&s, k).unwrap();
            prop_assert!(t >= prev && t <= 1.0);
            prev = t;
        }
        prop_assert!(tau_at(&s, total + 1).is_err());
    }

    #[test]
    fn lr_warms_up_then_decays(base in 1e-3f64..1.0, warm in 0u64..20, extra in 1u64..200) {
        let total = warm + extra;
        let s = LrSchedule::new(base, 64, 256, warm, total);
        let mut prev = step_lr(&s, 0);
        for k in 1..=total {
            let lr = step_lr(&s, k);
            if k <= warm {
                prop_assert!(lr >= prev);
            } else {
                prop_assert!(lr <= prev + 1e-15);
            }
            prev = lr;
        }
        prop_assert!(step_lr(&s, total).abs() < 1e-12);
        prop_assert!((step_lr(&s, warm) - base * 0.25).abs() < 1e-12);
    }

    #[test]
    fn ema_is_exact_convex_combination(seed in any::<u64>(), step in 0u64..50) {
        let cfg = tiny_config(Scheme::SimdisOn).validated().unwrap();
        let mut m = build_student(&cfg, 50).unwrap();
        m.tau.current_step = step;
        let mut r = rng(seed);
        for p in m.online.params_mut() {
            p.value.iter_mut().for_each(|x| *x += normal(&mut r));
        }
        let before: Vec<Vec<f64>> = m.target.params().iter().map(|p| p.value.clone()).collect();
        let tau = tau_at(&m.tau, step).unwrap();
        prop_assert_eq!(ema_update(&mut m).unwrap(), tau);
        prop_assert_eq!(m.tau.current_step, step + 1);
        let online = m.online.ema_params();
        let after = m.target.params();
        prop_assert_eq!(online.len(), after.len());
        for ((xi0, xi1), theta) in before.iter().zip(after).zip(online) {
            for ((a, b), t) in xi0.iter().zip(&xi1.value).zip(&theta.value) {
                prop_assert_eq!(*b, tau * a + (1.0 - tau) * t);
            }
        }
    }
}

#[test]
fn ema_at_final_step_freezes_target() {
    let cfg = tiny_config(Scheme::SimdisOn).validated().unwrap();
    let mut m = build_student(&cfg, 5).unwrap();
    m.tau.current_step = 5;
    for p in m.online.params_mut() {
        p.value.iter_mut().for_each(|x| *x += 1.0);
    }
    let before = simdis_core::nn::digest(&m.target);
    assert_eq!(ema_update(&mut m).unwrap(), 1.0);
    assert_eq!(simdis_core::nn::digest(&m.target), before);
}
