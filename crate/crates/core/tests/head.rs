mod common;

use common::head_checks::*;

#[test]
fn uncertainty_increases_with_variance() {
    let (min_step, dev) = lemma_margins();
    assert!(min_step > 0.0, "{min_step:e}");
    assert!(dev < 1e-12, "{dev:e}");
}

#[test]
fn variance_approximation_tracks_references() {
    let batches = variance_batches();
    let (v_all, v_min, v_med) = batch_pearson(&batches, 0, 1);
    let (u_all, u_min, u_med) = batch_pearson(&batches, 2, 3);
    eprintln!("full vs simplified variance: pooled {v_all:.4}, per-batch min {v_min:.4} median {v_med:.4}");
    eprintln!("analytic vs MC uncertainty: pooled {u_all:.4}, per-batch min {u_min:.4} median {u_med:.4}");
    assert!(v_all >= 0.95);
    assert!(u_all >= 0.90);
}
