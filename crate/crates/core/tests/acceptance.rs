//! End-to-end acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use ruackit_core::deform::{bound_offsets, composite_offsets};
use ruackit_core::eval::{augmentation_alignment, benchmark_domains, predict_domains, report_from_records, EvalOptions};
use ruackit_core::metrics::{EvalRecord, MetricsReport, SOURCE_DOMAIN};
use ruackit_core::params::ParamStore;
use ruackit_core::postproc::unc_corr;
use ruackit_core::style::{ObjectStyle, StyleBounds, StyleResidual};
use ruackit_core::synth::{build_benchmark, Benchmark, BenchmarkConfig};
use ruackit_core::trainer::{train, TrainConfig, TrainOutputs};
use ruackit_core::Grid;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn weibull_moments() -> Outcome {
    let t0 = Instant::now();
    let errs = weibull::moment_errors(11);
    let el = t0.elapsed();
    let wm = errs.iter().map(|e| e.2).fold(0.0, f64::max);
    let wv = errs.iter().map(|e| e.3).fold(0.0, f64::max);
    let pass = wm < 0.005 && wv < 0.02 && el < Duration::from_secs(30);
    outcome(pass, format!("worst relative mean error {wm:.2e} (< 5e-3), variance {wv:.2e} (< 2e-2), {}", secs(el)))
}

fn kl_oracle() -> Outcome {
    let worst = weibull::kl_pairs(5).iter().map(|(c, m)| ((c - m) / c).abs()).fold(0.0, f64::max);
    let zero = weibull::kl_at_matched_exponential().abs();
    outcome(worst < 0.01 && zero < 1e-9, format!("worst relative MC gap {worst:.2e} (< 1e-2), matched exponential {zero:.1e} (< 1e-9)"))
}

fn lemma() -> Outcome {
    let (step, dev) = head_checks::lemma_margins();
    outcome(step > 0.0 && dev < 1e-12, format!("smallest increase {step:.3e} (> 0), deviation from 1 at m = 0: {dev:.1e}"))
}

fn variance() -> Outcome {
    let t0 = Instant::now();
    let b = head_checks::variance_batches();
    let (v, vmin, _) = head_checks::batch_pearson(&b, 0, 1);
    let (u, umin, _) = head_checks::batch_pearson(&b, 2, 3);
    let el = t0.elapsed();
    let pass = v >= 0.95 && u >= 0.90 && el < Duration::from_secs(120);
    outcome(pass, format!("variance r {v:.4} (batch min {vmin:.4}), uncertainty r {u:.4} (batch min {umin:.4}), {}", secs(el)))
}

fn autodiff_checks() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    let mut failing = vec![];
    for c in autodiff::cases() {
        let e = (0..autodiff::POINTS as u64).map(|s| autodiff::worst_error(&c, s)).fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(e / c.tol);
        if e >= c.tol {
            failing.push(c.name);
        }
    }
    let ramp = autodiff::grid_sample_ramp_error();
    let ste = autodiff::ste_relu_contract() == (0.0, 1.0);
    let signs = autodiff::sg_grl_exact();
    let routing = autodiff::calibration_routing_error();
    let pass = failing.is_empty() && ramp < autodiff::TOL_GRID_SAMPLE && ste && signs && routing < 1e-5;
    outcome(
        pass,
        format!("worst error / tolerance {worst_ratio:.3}, failing {failing:?}, sg/GRL exact {signs}, STE {ste}, calibration routing {routing:.1e} (< 1e-5)"),
    )
}

fn metric_oracles() -> Outcome {
    let mut worst = metric_oracles::worst_deviations(0);
    for s in 1..3 {
        for (k, v) in metric_oracles::worst_deviations(s) {
            let e = worst.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
    }
    let w = metric_oracles::wilcoxon_deviation(9);
    let max = worst.values().copied().fold(w, f64::max);
    outcome(max <= metric_oracles::TOL, format!("largest deviation {max:.1e} over J, F, PAvPU, AURC, ECE, AUROC, PCC and Wilcoxon (≤ 1e-12)"))
}

fn chance() -> Outcome {
    let a = metric_oracles::chance_auroc(100_000, 4);
    outcome((a - 0.5).abs() <= 0.01, format!("AUROC {a:.4} on 1e5 pixels (0.5 ± 0.01)"))
}

fn perturbation_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut style_worst = f64::NEG_INFINITY;
    for _ in 0..20_000 {
        let style = ObjectStyle { mu: [0, 1, 2].map(|_| rng.gen_range(-1.0..2.0)), sigma: [0, 1, 2].map(|_| rng.gen_range(0.0..0.5)) };
        let big = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.gen_range(-1e4..1e4) * rng.gen::<f64>().powi(6));
        let r = StyleResidual { d_mu: big(&mut rng), d_sigma: big(&mut rng), d_shift: big(&mut rng) };
        let b = StyleBounds { eps_mu: rng.gen_range(0.0..1.0), eps_sigma: rng.gen_range(0.0..0.9), eps_shift: rng.gen_range(0.0..1.0) };
        style_worst = style_worst.max(perturb::style_bound_violation(&style, &r, &b));
    }
    let (mut over, mut mean) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..2_000 {
        let (h, w) = (rng.gen_range(2..24), rng.gen_range(2..24));
        let eps = rng.gen_range(0.01..8.0);
        let scale = rng.gen_range(0.0..50.0);
        let fields: Vec<_> = (0..rng.gen_range(1..4)).map(|_| bound_offsets(&perturb::random_raw(&mut rng, h, w, scale), eps).unwrap()).collect();
        let masks: Vec<Grid> = fields.iter().map(|_| Grid::from_fn(&[h, w], |_| rng.gen_bool(0.3) as u8 as f64)).collect();
        let comp = composite_offsets(&fields, &masks, eps).unwrap();
        for f in fields.iter().chain([&comp]) {
            let (o, m) = perturb::field_violation(&f.delta, eps);
            over = over.max(o);
            mean = mean.max(m);
        }
    }
    let identity = (0..20).all(perturb::zero_warp_is_identity);
    let eps_px = ruackit_core::deform::eps_to_pixels(0.15, 64, 64);
    let joint = perturb::joint_warp_error(50, eps_px, 3, false);
    let pass = style_worst <= 0.0 && over <= 1e-12 && mean <= 1e-12 && identity && joint < 0.02;
    outcome(
        pass,
        format!("style bound slack {style_worst:.1e} (≤ 0), field overshoot {over:.1e}, field mean {mean:.1e}, zero-warp identity {identity}, joint warp colour error {joint:.4} (< 0.02)"),
    )
}

fn uncorr_checks() -> Outcome {
    let failed = uncorr::constructed_failures();
    let f = uncorr::fuzz(1000, 21);
    let pass = failed.is_empty() && f.largest_lost == 0 && f.not_idempotent == 0 && f.grew == 0;
    outcome(pass, format!("constructed failures {failed:?}; fuzz over {} cases: largest lost {}, not idempotent {}, grew {}", f.cases, f.largest_lost, f.not_idempotent, f.grew))
}

struct Run {
    params: ParamStore,
    records: Vec<(String, Vec<EvalRecord>)>,
    report: MetricsReport,
}

fn run(cfg: &TrainConfig, bench: &Benchmark) -> Run {
    let st = train(cfg, &bench.train, &TrainOutputs::default()).unwrap();
    let opts = EvalOptions { seed: cfg.seed, ..Default::default() };
    let records = predict_domains(&cfg.head, &st.params, &benchmark_domains(bench), &opts).unwrap();
    let report = report_from_records(&records, &opts).unwrap();
    Run { params: st.params, records, report }
}

fn corrected(records: &[(String, Vec<EvalRecord>)]) -> MetricsReport {
    let fixed: Vec<(String, Vec<EvalRecord>)> = records
        .iter()
        .map(|(d, rs)| {
            let rs = rs
                .iter()
                .map(|r| EvalRecord { pred_mask: unc_corr(&r.pred_mask, &r.unc).unwrap(), ..r.clone() })
                .collect();
            (d.clone(), rs)
        })
        .collect();
    report_from_records(&fixed, &EvalOptions::default()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const SEEDS: u64 = 5;

fn directional(bench: &Benchmark, ue: &[Run], adv: &[Run], elapsed: Duration) -> Outcome {
    let value = |runs: &[Run], dom: &str, f: fn(&ruackit_core::metrics::DomainMetrics) -> f64| {
        median(runs.iter().map(|r| f(r.report.domain(dom).unwrap())).collect())
    };
    let mut lines = vec![];
    let (mut pavpu_wins, mut aurc_wins) = (0, 0);
    for (name, _) in &bench.domains {
        let (pu, pr) = (value(ue, name, |d| d.pavpu.mean), value(adv, name, |d| d.pavpu.mean));
        let (au, ar) = (value(ue, name, |d| d.aurc), value(adv, name, |d| d.aurc));
        pavpu_wins += (pr >= pu) as usize;
        aurc_wins += (ar <= au) as usize;
        lines.push(format!("{name}: PAvPU {pu:.4}→{pr:.4}, AURC {au:.5}→{ar:.5}"));
    }
    let fixed: Vec<MetricsReport> = adv.iter().map(|r| corrected(&r.records)).collect();
    let jf_plain = median(adv.iter().map(|r| r.report.ood_mean.jf).collect());
    let jf_fixed = median(fixed.iter().map(|r| r.ood_mean.jf).collect());
    let src = |r: &MetricsReport| r.domain(SOURCE_DOMAIN).unwrap().jf;
    let src_ue = median(ue.iter().map(|r| src(&r.report)).collect());
    let src_fixed = median(fixed.iter().map(src).collect());
    let pass = pavpu_wins >= 4
        && aurc_wins >= 4
        && jf_fixed >= jf_plain
        && src_fixed >= src_ue - 0.02
        && elapsed < Duration::from_secs(7200);
    for l in &lines {
        println!("    {l}");
    }
    outcome(
        pass,
        format!(
            "PAvPU ≥ UE-only on {pavpu_wins}/6, AURC ≤ UE-only on {aurc_wins}/6 (need 4); UncCorr OOD J&F {jf_plain:.4}→{jf_fixed:.4}; source J&F UE {src_ue:.4} vs adversarial+UncCorr {src_fixed:.4} (within 0.02); {}",
            secs(elapsed)
        ),
    )
}

fn mc_stability(cfg: &TrainConfig, params: &ParamStore, bench: &Benchmark) -> Outcome {
    let vals: Vec<f64> = [1usize, 5, 20, 50, 100]
        .iter()
        .map(|&s| {
            let opts = EvalOptions { mc_samples: s, seed: cfg.seed, ..Default::default() };
            let recs = predict_domains(&cfg.head, params, &benchmark_domains(bench), &opts).unwrap();
            report_from_records(&recs, &opts).unwrap().ood_mean.pavpu
        })
        .collect();
    let spread = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) - vals.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(spread < 0.02, format!("OOD PAvPU at S = 1, 5, 20, 50, 100: {vals:.4?}; spread {spread:.4} (< 0.02)"))
}

fn alignment(cfg: &TrainConfig, params: &ParamStore, bench: &Benchmark) -> Outcome {
    let a = augmentation_alignment(cfg, params, &bench.val, 0).unwrap();
    outcome(a.pearson > 0.0, format!("r = {:.4} (> 0), augmentation shift norm {:.4}", a.pearson, a.aug_norm))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![];
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "Weibull moments", weibull_moments());
    report(2, "Weibull-Gamma KL", kl_oracle());
    report(3, "uncertainty monotone in variance", lemma());
    report(4, "variance approximation", variance());
    report(5, "autodiff", autodiff_checks());
    report(6, "metric oracles", metric_oracles());
    report(7, "chance-level AUROC", chance());
    report(8, "perturbation contracts", perturbation_contracts());
    report(9, "uncertainty-guided correction", uncorr_checks());

    let t0 = Instant::now();
    let bench = build_benchmark(&BenchmarkConfig::default()).unwrap();
    let configs: Vec<TrainConfig> = (0..SEEDS)
        .flat_map(|seed| [TrainConfig { seed, ue_only: true, ..Default::default() }, TrainConfig { seed, ..Default::default() }])
        .collect();
    let runs: Vec<Run> = configs.par_iter().map(|c| run(c, &bench)).collect();
    let elapsed = t0.elapsed();
    let (ue, adv): (Vec<Run>, Vec<Run>) = {
        let mut it = runs.into_iter();
        let mut ue = vec![];
        let mut adv = vec![];
        while let (Some(a), Some(b)) = (it.next(), it.next()) {
            ue.push(a);
            adv.push(b);
        }
        (ue, adv)
    };
    report(10, "directional end-to-end", directional(&bench, &ue, &adv, elapsed));
    let cfg0 = &configs[1];
    report(11, "MC stability", mc_stability(cfg0, &adv[0].params, &bench));
    report(12, "channel alignment", alignment(cfg0, &adv[0].params, &bench));

    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        // Failures are reported, not fatal, unless strict mode is requested.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
