//! Properties of the analytic uncertainty and its variance approximation.

use ruackit_core::head::{self, forward_mc, full_variance, logits_analytic, uncertainty_analytic, HeadConfig, LogitStats};
use ruackit_core::metrics::pearson;
use ruackit_core::synth::{gen_scene, SceneSpec};
use ruackit_core::params::ParamStore;
use ruackit_core::trainer::{train, TrainConfig, TrainOutputs};
use ruackit_core::Grid;

pub const LEMMA_MEANS: [f64; 6] = [-3.0, -1.0, -0.5, 0.5, 1.0, 3.0];

fn log_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn u_of(m: f64, v: f64) -> f64 {
    uncertainty_analytic(&LogitStats { m: Grid::scalar(m), v: Grid::scalar(v) }).unwrap().item()
}

/// Smallest consecutive increase of `u(m, ·)` on the 50-point grid over all nonzero `m`,
/// and the largest deviation from 1 at `m = 0`.
pub fn lemma_margins() -> (f64, f64) {
    let vs = log_grid(50, 1e-4, 1e3);
    let mut min_step = f64::INFINITY;
    for &m in &LEMMA_MEANS {
        let us: Vec<f64> = vs.iter().map(|&v| u_of(m, v)).collect();
        for w in us.windows(2) {
            min_step = min_step.min(w[1] - w[0]);
        }
    }
    let dev = vs.iter().map(|&v| (u_of(0.0, v) - 1.0).abs()).fold(0.0, f64::max);
    (min_step, dev)
}

pub const BATCHES: usize = 50;
pub const MC: usize = 100;

/// Head trained for a few segmentation and Bayesian epochs on small scenes. A freshly
/// initialized head puts every logit near zero, which makes the comparison degenerate.
pub fn briefly_trained_head() -> (HeadConfig, ParamStore) {
    let spec = SceneSpec { h: 32, w: 32, ..Default::default() };
    let scenes: Vec<_> = (0..16).filter_map(|s| gen_scene(300 + s, &spec).ok()).collect();
    let cfg = TrainConfig { epochs: 8, ue_only: true, seed: 12, ..Default::default() };
    let st = train(&cfg, &scenes, &TrainOutputs::default()).unwrap();
    (cfg.head, st.params)
}

/// Per-batch `(full variance, simplified variance, analytic u, MC u)`; each batch is the
/// posterior for one prompted object of a generated scene.
pub fn variance_batches() -> Vec<[Vec<f64>; 4]> {
    let (cfg, params) = briefly_trained_head();
    let spec = SceneSpec { h: 32, w: 32, ..Default::default() };
    (0..BATCHES as u64)
        .map(|b| {
            let scene = gen_scene(7000 + b, &spec).unwrap();
            let k = b as usize % scene.masks.len();
            let post = head::predict(&cfg, &params, &scene.image, &scene.clicks[k]).unwrap();
            let hyp = post.best_hypothesis();
            let ls = logits_analytic(&post.pixel, &post.tokens, hyp).unwrap();
            let full = full_variance(&post.pixel, &post.tokens, hyp).unwrap();
            let ua = uncertainty_analytic(&ls).unwrap();
            let mc = forward_mc(&post.pixel, &post.tokens, hyp, MC, b).unwrap();
            [full.into_data(), ls.v.into_data(), ua.into_data(), mc.unc.into_data()]
        })
        .collect()
}

/// `(pooled, per-batch minimum, per-batch median)` Pearson between two columns.
pub fn batch_pearson(batches: &[[Vec<f64>; 4]], a: usize, b: usize) -> (f64, f64, f64) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = batches.iter().flat_map(|r| r[a].iter().copied().zip(r[b].iter().copied())).unzip();
    let mut per: Vec<f64> = batches.iter().map(|r| pearson(&r[a], &r[b]).unwrap()).collect();
    per.sort_by(f64::total_cmp);
    (pearson(&xs, &ys).unwrap(), per[0], per[per.len() / 2])
}
