mod common;

use common::weibull::*;

#[test]
fn sample_moments_match_closed_forms() {
    for (l, k, em, ev) in moment_errors(11) {
        assert!(em < 0.005, "mean λ={l} κ={k}: {em:e}");
        assert!(ev < 0.02, "variance λ={l} κ={k}: {ev:e}");
    }
}

#[test]
fn kl_matches_monte_carlo() {
    for ((closed, mc), case) in kl_pairs(5).into_iter().zip(KL_CASES) {
        let rel = ((closed - mc) / closed).abs();
        assert!(rel < 0.01, "{case:?}: closed {closed} mc {mc}");
    }
}

#[test]
fn kl_vanishes_at_matched_exponential() {
    assert!(kl_at_matched_exponential().abs() < 1e-9);
}
