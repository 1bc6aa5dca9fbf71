mod common;

use common::autodiff::*;

#[test]
fn every_op_matches_finite_differences() {
    for c in cases() {
        for seed in 0..POINTS as u64 {
            let err = worst_error(&c, seed);
            assert!(err < c.tol, "{} at point {seed}: {err:e}", c.name);
        }
    }
}

#[test]
fn grid_sample_on_ramp() {
    let err = grid_sample_ramp_error();
    assert!(err < TOL_GRID_SAMPLE, "{err:e}");
}

#[test]
fn ste_relu_passes_gradient_through_negative_inputs() {
    assert_eq!(ste_relu_contract(), (0.0, 1.0));
}

#[test]
fn stop_grad_and_grl_signs_are_exact() {
    assert!(sg_grl_exact());
}

#[test]
fn calibration_gradients_route_through_live_copies() {
    let err = calibration_routing_error();
    assert!(err < 1e-5, "{err:e}");
}
