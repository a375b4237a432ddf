use dualguide_core::guidance::{compose, compose_null_anchor, compose_src_anchor, noise_cond, Variant};
use dualguide_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn triple(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = || Tensor::uniform(&[1, 4, 8, 8], -3.0, 3.0, &mut rng).unwrap();
    (r(), r(), r())
}

fn close(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn equal_scales_telescope_to_edit_guidance(seed in any::<u64>(), g in 0.0f64..15.0) {
        let (n, s, e) = triple(seed);
        let lhs = compose_src_anchor(&n, &s, &e, g, g).unwrap();
        prop_assert!(close(&lhs, &noise_cond(&n, &e, g).unwrap()) <= TOL);
    }

    #[test]
    fn zero_beta_anchors_agree(seed in any::<u64>(), g in 0.0f64..15.0) {
        let (n, s, e) = triple(seed);
        let a = compose_src_anchor(&n, &s, &e, g, 0.0).unwrap();
        let b = compose_null_anchor(&n, &s, &e, g, 0.0).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(close(&a, &noise_cond(&n, &s, g).unwrap()) <= TOL);
    }

    #[test]
    fn unit_gamma_zero_beta_is_source(seed in any::<u64>()) {
        let (n, s, e) = triple(seed);
        for v in [Variant::SrcAnchor, Variant::NullAnchor] {
            prop_assert_eq!(&compose(v, &n, &s, &e, 1.0, 0.0).unwrap(), &s);
        }
    }

    #[test]
    fn composition_is_linear(seed in any::<u64>(), g in 0.0f64..15.0, b in 0.0f64..15.0, a in -2.0f64..2.0, c in -2.0f64..2.0) {
        let (n1, s1, e1) = triple(seed);
        let (n2, s2, e2) = triple(seed.wrapping_add(1));
        let mix = |x: &Tensor, y: &Tensor| x.scale(a).axpy(c, y).unwrap();
        for v in [Variant::SrcAnchor, Variant::NullAnchor] {
            let lhs = compose(v, &mix(&n1, &n2), &mix(&s1, &s2), &mix(&e1, &e2), g, b).unwrap();
            let r1 = compose(v, &n1, &s1, &e1, g, b).unwrap();
            let r2 = compose(v, &n2, &s2, &e2, g, b).unwrap();
            // inputs reach ~3 * (1 + 2 * 15) in magnitude, so allow for rounding at that scale
            prop_assert!(close(&lhs, &mix(&r1, &r2)) <= 1e-12 * 200.0);
        }
    }
}
