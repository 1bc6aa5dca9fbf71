mod common;

use common::perturb::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ruackit_core::deform::{bound_offsets, composite_offsets, eps_to_pixels};
use ruackit_core::style::{ObjectStyle, StyleBounds, StyleResidual};
use ruackit_core::Grid;

fn arr3(lo: f64, hi: f64) -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(lo..hi)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn style_stays_within_bounds(
        mu in arr3(-1.0, 2.0),
        sigma in arr3(0.0, 0.5),
        d_mu in arr3(-1e4, 1e4),
        d_sigma in arr3(-1e4, 1e4),
        d_shift in arr3(-1e4, 1e4),
        eps in (0.0f64..1.0, 0.0f64..0.9, 0.0f64..1.0),
    ) {
        let style = ObjectStyle { mu, sigma };
        let r = StyleResidual { d_mu, d_sigma, d_shift };
        let b = StyleBounds { eps_mu: eps.0, eps_sigma: eps.1, eps_shift: eps.2 };
        prop_assert!(style_bound_violation(&style, &r, &b) <= 0.0);
    }

    #[test]
    fn offset_fields_are_bounded_and_centred(seed in 0u64..10_000, h in 2usize..24, w in 2usize..24, scale in 0.0f64..50.0, eps in 0.01f64..8.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = bound_offsets(&random_raw(&mut rng, h, w, scale), eps).unwrap();
        let (over, mean) = field_violation(&f.delta, eps);
        prop_assert!(over <= 1e-12, "over by {over:e}");
        prop_assert!(mean <= 1e-12, "mean {mean:e}");
    }

    #[test]
    fn composite_fields_keep_the_invariants(seed in 0u64..10_000, k in 1usize..4, eps in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (12, 10);
        let fields: Vec<_> = (0..k).map(|_| bound_offsets(&random_raw(&mut rng, h, w, 10.0), eps).unwrap()).collect();
        let masks: Vec<Grid> = (0..k).map(|j| Grid::from_fn(&[h, w], |i| ((i + j) % (k + 1) == 0) as u8 as f64)).collect();
        let f = composite_offsets(&fields, &masks, eps).unwrap();
        let (over, mean) = field_violation(&f.delta, eps);
        prop_assert!(over <= 1e-12 && mean <= 1e-12);
    }
}

#[test]
fn zero_field_warp_is_bit_exact() {
    for seed in 0..20 {
        assert!(zero_warp_is_identity(seed), "seed {seed}");
    }
}

#[test]
fn joint_warp_keeps_masks_on_their_objects() {
    let eps = eps_to_pixels(0.15, 64, 64);
    let err = joint_warp_error(50, eps, 3, false);
    let control = joint_warp_error(50, eps, 3, true);
    eprintln!("joint warp colour error {err:.5} at ε = {eps:.2} px, mismatched control {control:.5}");
    assert!(err < 0.02, "{err}");
    assert!(control > 0.02, "{control}");
}
