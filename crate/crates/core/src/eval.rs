//! Click-prompted evaluation over a benchmark's source and shifted domains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::head::{self, HeadConfig, Mode};
use crate::metrics::{channel_alignment, evaluate_domain, feature_shift, EvalRecord, MetricOptions, MetricsReport, SOURCE_DOMAIN};
use crate::params::{Binding, ParamStore};
use crate::postproc;
use crate::synth::{apply_shift, Benchmark, Scene, ShiftKind, ShiftSpec};
use crate::tape::Tape;
use crate::trainer::{attack_preview, TrainConfig};

pub const DEFAULT_MC_SAMPLES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Monte Carlo draws per prediction; 0 selects the analytic uncertainty.
    pub mc_samples: usize,
    pub seed: u64,
    /// Filter predicted masks with uncertainty-guided component removal.
    pub unc_corr: bool,
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
    pub metrics: MetricOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mc_samples: DEFAULT_MC_SAMPLES, seed: 0, unc_corr: false, jobs: 0, metrics: MetricOptions::default() }
    }
}

/// Evaluation set: `(domain name, scenes)`.
pub type DomainSet<'a> = Vec<(String, &'a [Scene])>;

/// Source validation scenes first, then each shifted domain in manifest order.
pub fn benchmark_domains(b: &Benchmark) -> DomainSet<'_> {
    let mut v = vec![(SOURCE_DOMAIN.to_string(), b.val.as_slice())];
    v.extend(b.domains.iter().map(|(n, s)| (n.clone(), s.as_slice())));
    v
}

/// MC seed for one prompted object, independent of evaluation order.
fn record_seed(base: u64, scene: &Scene, object: usize) -> u64 {
    base ^ scene.seed.rotate_left(17) ^ (object as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Prediction for object `object` of `scene` from its stored clicks.
pub fn predict_record(cfg: &HeadConfig, params: &ParamStore, scene: &Scene, object: usize, domain: &str, opts: &EvalOptions) -> Result<EvalRecord> {
    let clicks = scene
        .clicks
        .get(object)
        .ok_or_else(|| Error::InvalidArgument(format!("scene {} has no object {object}", scene.seed)))?;
    let mode = match opts.mc_samples {
        0 => Mode::Analytic,
        s => Mode::MonteCarlo { samples: s, seed: record_seed(opts.seed, scene, object) },
    };
    let out = head::head_forward(cfg, params, &scene.image, clicks, mode)?;
    let mut rec = EvalRecord::new(out.prob, out.unc, &scene.masks[object], domain)?;
    if opts.unc_corr {
        rec.pred_mask = postproc::unc_corr(&rec.pred_mask, &rec.unc)?;
    }
    Ok(rec)
}

/// Records for every prompted object of every scene, grouped per domain.
pub fn predict_domains(cfg: &HeadConfig, params: &ParamStore, domains: &DomainSet, opts: &EvalOptions) -> Result<Vec<(String, Vec<EvalRecord>)>> {
    let run = || {
        domains
            .iter()
            .map(|(name, scenes)| {
                let jobs: Vec<(&Scene, usize)> = scenes.iter().flat_map(|s| (0..s.masks.len()).map(move |k| (s, k))).collect();
                let recs = jobs
                    .par_iter()
                    .map(|&(s, k)| predict_record(cfg, params, s, k, name, opts))
                    .collect::<Result<Vec<_>>>()?;
                Ok((name.clone(), recs))
            })
            .collect::<Result<Vec<_>>>()
    };
    if opts.jobs == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
        .install(run)
}

pub fn report_from_records(records: &[(String, Vec<EvalRecord>)], opts: &EvalOptions) -> Result<MetricsReport> {
    let domains = records.iter().map(|(n, r)| evaluate_domain(n, r, &opts.metrics)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(opts.mc_samples, domains))
}

pub fn evaluate(cfg: &HeadConfig, params: &ParamStore, domains: &DomainSet, opts: &EvalOptions) -> Result<MetricsReport> {
    report_from_records(&predict_domains(cfg, params, domains, opts)?, opts)
}

pub fn evaluate_benchmark(cfg: &HeadConfig, params: &ParamStore, bench: &Benchmark, opts: &EvalOptions) -> Result<MetricsReport> {
    evaluate(cfg, params, &benchmark_domains(bench), opts)
}

/// Frozen encoder output `[C, H, W]` for an image.
pub fn encoder_features(params: &ParamStore, image: &Grid) -> Result<Grid> {
    let mut t = Tape::new();
    let vars = params.bind(&mut t, "enc.", Binding::Frozen)?;
    let img = t.constant(image.clone());
    let e = head::encode(&mut t, &vars, img)?;
    Ok(t.value(e)?.clone())
}

/// Per-channel encoder shift of the learned augmentation and of a natural shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pearson: f64,
    pub aug_norm: f64,
    pub aug_shift: Vec<f64>,
    pub ood_shift: Vec<f64>,
}

/// Shifts applied in sequence to build the reference out-of-distribution views.
pub const ALIGNMENT_OOD: [(ShiftKind, f64); 2] = [(ShiftKind::Elastic, 4.0), (ShiftKind::ColorTransfer, 1.0)];

/// Compares the feature shift caused by the current attackers on `scenes` with the shift
/// caused by elastic plus colour-transfer corruption of the same scenes. Features are
/// pooled over the (dilated) foreground of the clean scene.
pub fn augmentation_alignment(cfg: &TrainConfig, params: &ParamStore, scenes: &[Scene], seed: u64) -> Result<Alignment> {
    let (mut clean, mut aug, mut ood, mut fg) = (vec![], vec![], vec![], vec![]);
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.seed.rotate_left(23) ^ i as u64);
        let preview = attack_preview(params, cfg, scene, 0, &mut rng)?;
        let mut shifted = scene.clone();
        for (j, &(kind, magnitude)) in ALIGNMENT_OOD.iter().enumerate() {
            let spec = ShiftSpec { kind, magnitude, seed: scene.seed ^ seed ^ (j as u64 + 1) << 56 };
            shifted = apply_shift(&shifted, &spec)?;
        }
        clean.push(encoder_features(params, &scene.image)?);
        aug.push(encoder_features(params, &preview.after)?);
        ood.push(encoder_features(params, &shifted.image)?);
        fg.push(scene.foreground());
    }
    let aug_shift = feature_shift(&clean, &aug, &fg)?;
    let ood_shift = feature_shift(&clean, &ood, &fg)?;
    let (pearson, aug_norm) = channel_alignment(&aug_shift, &ood_shift)?;
    Ok(Alignment { pearson, aug_norm, aug_shift, ood_shift })
}
