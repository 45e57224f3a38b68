use mdm_core::sde::{
    gamma_star_numeric, kappa, rescale_adamw, virtual_split, AdamWTuple, DriftHorizonFit, SdeBase,
    SdeTuple,
};
use proptest::prelude::*;

fn base(d_base: f64, b_base: f64) -> SdeBase {
    SdeBase {
        d_base,
        b_base,
        tuple: AdamWTuple {
            lr: 9e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        },
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

proptest! {
    #[test]
    fn kappa_composes(
        d0 in 1e6f64..1e12, b0 in 1f64..4096.0,
        d1 in 1e6f64..1e12, b1 in 1f64..4096.0,
        d2 in 1e6f64..1e12, b2 in 1f64..4096.0,
        gamma in 0f64..=1.0,
    ) {
        let k01 = kappa(d1, b1, &base(d0, b0), gamma).unwrap();
        let k12 = kappa(d2, b2, &base(d1, b1), gamma).unwrap();
        let k02 = kappa(d2, b2, &base(d0, b0), gamma).unwrap();
        prop_assert!(rel(k01 * k12, k02) < 1e-12);
    }

    #[test]
    fn rescaling_is_an_action(k1 in 0.05f64..20.0, k2 in 0.05f64..20.0) {
        let t = base(1.0, 1.0).tuple;
        let two = rescale_adamw(&rescale_adamw(&t, k1).unwrap(), k2).unwrap();
        let one = rescale_adamw(&t, k1 * k2).unwrap();
        prop_assert!(rel(two.lr, one.lr) < 1e-12 && rel(two.eps, one.eps) < 1e-12);
        prop_assert!(rel(two.beta1, one.beta1) < 1e-12 && rel(two.beta2, one.beta2) < 1e-12);
        // Deferred rescaling adds exponents before touching the betas.
        let composed = SdeTuple::new(t).rescale(k1).rescale(k2);
        prop_assert_eq!(composed.resolve().unwrap(), one);
    }

    #[test]
    fn virtual_split_conserves_tokens(
        d in 1e3f64..1e15, l in 1f64..8192.0,
        alpha in 0.05f64..1.0, beta in 0.05f64..1.0,
        a in 0.1f64..100.0, b in 0.1f64..100.0,
        gamma in prop::option::of(0f64..=1.0),
    ) {
        let f = DriftHorizonFit::new(1.0, a, b, alpha, beta).unwrap();
        let (s, bt) = virtual_split(d, l, &f, gamma);
        prop_assert!(rel(s * bt * l, d) < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn numeric_gamma_is_horizon_independent(
        alpha in 0.05f64..0.6, beta in 0.05f64..0.6,
        a in 0.2f64..20.0, b in 0.2f64..20.0,
        d in 1e6f64..1e12, l in 16f64..4096.0,
    ) {
        let f = DriftHorizonFit::new(1.0, a, b, alpha, beta).unwrap();
        let g = gamma_star_numeric(&f, d, l).unwrap();
        prop_assert!((g.gamma - f.gamma_star()).abs() < 1e-3);
    }
}
