use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ruackit_core::eval::{benchmark_domains, predict_domains, report_from_records, EvalOptions};
use ruackit_core::metrics::{compare_reports, EvalRecord, MetricsReport, PairedComparison};
use ruackit_core::params::ParamStore;
use ruackit_core::postproc::{unc_corr_audited, Connectivity, CorrectionAudit};
use ruackit_core::style::ObjectStyle;
use ruackit_core::synth::{build_benchmark, load_benchmark, Benchmark, MANIFEST_FILE};
use ruackit_core::trainer::{attack_preview, train, TrainOutputs, FINAL_CHECKPOINT, LOG_FILE};
use serde::Serialize;
use toml::Value;

use crate::config::{resolve, Layer, RunConfig, CONFIG_FILE};
use crate::{Cli, Command, Dirs};

pub const METRICS_JSON: &str = "metrics.json";
pub const SWEEP_CSV: &str = "mc_sweep.csv";

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

/// Effective configuration for a command. When `base` names a directory holding an
/// echoed config, that config sits underneath the file, environment and flag layers.
fn configure(cli: &Cli, base: Option<&Path>, flags: Vec<Layer>) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(dir) = base {
        let p = dir.join(CONFIG_FILE);
        if p.exists() {
            layers.push(Layer::from_file(&p)?);
        }
    }
    if let Some(p) = &cli.config {
        layers.push(Layer::from_file(p)?);
    }
    layers.push(Layer::from_env(std::env::vars()));
    layers.push(Layer::from_flags(&cli.sets)?);
    if let Some(j) = cli.jobs {
        layers.push(Layer::single("--jobs", "jobs", Value::Integer(j as i64)));
    }
    layers.extend(flags);
    resolve(&layers)
}

fn dir_flags(dirs: &Dirs) -> Vec<Layer> {
    let mut v = Vec::new();
    if let Some(d) = &dirs.data {
        v.push(Layer::single("--data", "data_dir", path_value(d)));
    }
    if let Some(r) = &dirs.run {
        v.push(Layer::single("--run", "run_dir", path_value(r)));
    }
    v
}

/// Resolves once to find the run directory, then again on top of its echoed config.
fn configure_for_run(cli: &Cli, dirs: &Dirs, extra: Vec<Layer>) -> Result<RunConfig> {
    let first = configure(cli, None, dir_flags(dirs))?;
    let echoed = first.run_dir.join(CONFIG_FILE);
    if !echoed.exists() {
        bail!("missing run config {} (run `ruackit train` first)", echoed.display());
    }
    let mut flags = dir_flags(dirs);
    flags.extend(extra);
    configure(cli, Some(&first.run_dir), flags)
}

fn open_benchmark(dir: &Path) -> Result<Benchmark> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        bail!("missing benchmark manifest {} (run `ruackit gen` first)", manifest.display());
    }
    load_benchmark(dir).with_context(|| format!("loading benchmark from {}", dir.display()))
}

fn open_checkpoint(run: &Path) -> Result<ParamStore> {
    let dir = run.join(FINAL_CHECKPOINT);
    if !dir.exists() {
        bail!("missing checkpoint {} (run `ruackit train` first)", dir.display());
    }
    ParamStore::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)? + "\n")?;
    write(&dir.join(format!("{stem}.csv")), report.to_csv()?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_report(report: &MetricsReport) {
    println!("{:<20} {:>8} {:>8} {:>9} {:>8} {:>8}", "domain", "J&F", "PAvPU", "AURC", "ECE", "AUROC");
    for d in &report.domains {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>9.5} {:>8.4} {:>8}",
            d.domain,
            d.jf,
            d.pavpu.mean,
            d.aurc,
            d.ece,
            fmt_opt(d.auroc_pixel)
        );
    }
    let m = &report.ood_mean;
    println!(
        "{:<20} {:>8.4} {:>8.4} {:>9.5} {:>8.4} {:>8}",
        "ood_mean",
        m.jf,
        m.pavpu,
        m.aurc,
        m.ece,
        fmt_opt(m.auroc_pixel)
    );
}

/// Uncertainty, confidence and predicted-mask PNGs for the first `n` records per domain.
fn write_maps(dir: &Path, records: &[(String, Vec<EvalRecord>)], n: usize) -> Result<()> {
    for (domain, recs) in records {
        let d = dir.join("maps").join(domain);
        if n > 0 {
            mkdir(&d)?;
        }
        for (i, r) in recs.iter().take(n).enumerate() {
            r.unc.save_gray_png_unit(d.join(format!("{i:03}_unc.png")))?;
            r.pred_prob.map(|p| p.max(1.0 - p)).save_gray_png_unit(d.join(format!("{i:03}_conf.png")))?;
            r.pred_mask.save_gray_png_unit(d.join(format!("{i:03}_pred.png")))?;
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { data } => gen(cli, data.clone()),
        Command::Train { dirs } => train_cmd(cli, dirs),
        Command::Eval { dirs, mc_samples, unc_corr, out } => eval_cmd(cli, dirs, mc_samples, *unc_corr, out.clone()),
        Command::AttackPreview { dirs, count, out } => preview_cmd(cli, dirs, *count, out.clone()),
        Command::Correct { dirs, out } => correct_cmd(cli, dirs, out.clone()),
        Command::Report { a, b, metrics, out } => report_cmd(a, b, metrics, out.as_deref()),
    }
}

fn gen(cli: &Cli, data: Option<PathBuf>) -> Result<()> {
    let flags = data.iter().map(|d| Layer::single("--data", "data_dir", path_value(d))).collect();
    let cfg = configure(cli, None, flags)?;
    let bench = build_benchmark(&cfg.benchmark()?)?;
    bench.write(&cfg.data_dir).with_context(|| format!("writing benchmark to {}", cfg.data_dir.display()))?;
    cfg.echo(&cfg.data_dir)?;
    log::info!(
        "benchmark with {} train, {} val and {} shifted domains written to {}",
        bench.train.len(),
        bench.val.len(),
        bench.domains.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, dirs: &Dirs) -> Result<()> {
    let cfg = configure(cli, None, dir_flags(dirs))?;
    let bench = open_benchmark(&cfg.data_dir)?;
    cfg.echo(&cfg.run_dir)?;
    let tc = cfg.train();
    log::info!(
        "training {} for {} epochs on {} scenes",
        if tc.ue_only { "UE-only" } else { "with adversarial calibration" },
        tc.epochs,
        bench.train.len()
    );
    let state = train(&tc, &bench.train, &TrainOutputs { run_dir: Some(cfg.run_dir.clone()) })?;
    if let Some(last) = state.log.last() {
        log::info!("final step {}: total loss {:.4}", last.step, last.total);
    }
    log::info!("checkpoint and {LOG_FILE} written to {}", cfg.run_dir.display());
    Ok(())
}

fn eval_cmd(cli: &Cli, dirs: &Dirs, mc: &[usize], unc_corr: bool, out: Option<PathBuf>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(&s) = mc.first() {
        extra.push(Layer::single("--mc-samples", "mc_samples", Value::Integer(s as i64)));
    }
    if unc_corr {
        extra.push(Layer::single("--unc-corr", "unc_corr", Value::Boolean(true)));
    }
    let cfg = configure_for_run(cli, dirs, extra)?;
    let params = open_checkpoint(&cfg.run_dir)?;
    let bench = open_benchmark(&cfg.data_dir)?;
    let out = out.unwrap_or_else(|| cfg.run_dir.join("eval"));
    mkdir(&out)?;
    cfg.echo(&out)?;
    let head = cfg.train().head;
    let domains = benchmark_domains(&bench);
    let sweep = if mc.is_empty() { vec![cfg.mc_samples] } else { mc.to_vec() };
    let mut table = String::from("mc_samples,domain,jf,pavpu,aurc,ece,auroc_pixel\n");
    for (k, &s) in sweep.iter().enumerate() {
        let opts = EvalOptions { mc_samples: s, ..cfg.eval() };
        let records = predict_domains(&head, &params, &domains, &opts)?;
        let report = report_from_records(&records, &opts)?;
        if k == 0 {
            write_report(&out, "metrics", &report)?;
            write_maps(&out, &records, cfg.maps)?;
        }
        if sweep.len() > 1 {
            write_report(&out, &format!("metrics_s{s}"), &report)?;
            println!("S = {s}");
        }
        print_report(&report);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for d in &report.domains {
            writeln!(table, "{s},{},{},{},{},{},{}", d.domain, d.jf, d.pavpu.mean, d.aurc, d.ece, opt(d.auroc_pixel))?;
        }
        let m = &report.ood_mean;
        writeln!(table, "{s},ood_mean,{},{},{},{},{}", m.jf, m.pavpu, m.aurc, m.ece, opt(m.auroc_pixel))?;
    }
    if sweep.len() > 1 {
        write(&out.join(SWEEP_CSV), table)?;
    }
    log::info!("evaluation written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct PreviewEntry {
    scene_seed: u64,
    object: usize,
    /// `(source, adversarial)` per re-styled region.
    styles: Vec<(ObjectStyle, ObjectStyle)>,
    offset_bound_px: Option<f64>,
    max_offset_px: Option<f64>,
    mean_abs_pixel_change: f64,
}

fn preview_cmd(cli: &Cli, dirs: &Dirs, count: usize, out: Option<PathBuf>) -> Result<()> {
    let cfg = configure_for_run(cli, dirs, vec![])?;
    let params = open_checkpoint(&cfg.run_dir)?;
    let bench = open_benchmark(&cfg.data_dir)?;
    let tc = cfg.train();
    if tc.ue_only {
        log::warn!("run was trained UE-only; attackers are at their initial state");
    }
    let out = out.unwrap_or_else(|| cfg.run_dir.join("attack_preview"));
    mkdir(&out)?;
    cfg.echo(&out)?;
    let mut entries = Vec::new();
    for (i, scene) in bench.val.iter().take(count).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ scene.seed);
        let p = attack_preview(&params, &tc, scene, 0, &mut rng)?;
        p.before.save_rgb_png_unit(out.join(format!("{i:03}_before.png")))?;
        p.after.save_rgb_png_unit(out.join(format!("{i:03}_after.png")))?;
        scene.masks[0].save_gray_png_unit(out.join(format!("{i:03}_mask_before.png")))?;
        p.masks_after[0].save_gray_png_unit(out.join(format!("{i:03}_mask_after.png")))?;
        let mut max_off = None;
        if let Some(off) = &p.offsets {
            let dy = off.delta.channel(0);
            let dx = off.delta.channel(1);
            let mag = dy.zip_map(&dx, |a, b| a.hypot(b))?;
            max_off = Some(mag.data().iter().fold(0.0f64, |m, &v| m.max(v)));
            let scale = if off.eps > 0.0 { off.eps * std::f64::consts::SQRT_2 } else { 1.0 };
            mag.map(|v| v / scale).save_gray_png_unit(out.join(format!("{i:03}_offset.png")))?;
        }
        let diff = p.after.zip_map(&p.before, |a, b| (a - b).abs())?;
        entries.push(PreviewEntry {
            scene_seed: scene.seed,
            object: 0,
            styles: p.styles,
            offset_bound_px: p.offsets.as_ref().map(|o| o.eps),
            max_offset_px: max_off,
            mean_abs_pixel_change: diff.mean(),
        });
    }
    write(&out.join("preview.json"), serde_json::to_string_pretty(&entries)? + "\n")?;
    log::info!("{} attack previews written to {}", entries.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct AuditLine<'a> {
    domain: &'a str,
    index: usize,
    removed_pixels: usize,
    audit: &'a CorrectionAudit,
}

fn correct_cmd(cli: &Cli, dirs: &Dirs, out: Option<PathBuf>) -> Result<()> {
    let cfg = configure_for_run(cli, dirs, vec![Layer::single("correct", "unc_corr", Value::Boolean(false))])?;
    let params = open_checkpoint(&cfg.run_dir)?;
    let bench = open_benchmark(&cfg.data_dir)?;
    let out = out.unwrap_or_else(|| cfg.run_dir.join("correct"));
    mkdir(&out)?;
    cfg.echo(&out)?;
    let opts = cfg.eval();
    let records = predict_domains(&cfg.train().head, &params, &benchmark_domains(&bench), &opts)?;
    let mut audit_lines = String::new();
    let mut corrected = Vec::new();
    for (domain, recs) in &records {
        let d = out.join("masks").join(domain);
        if cfg.maps > 0 {
            mkdir(&d)?;
        }
        let mut fixed = Vec::with_capacity(recs.len());
        for (i, r) in recs.iter().enumerate() {
            let (mask, audit) = unc_corr_audited(&r.pred_mask, &r.unc, Connectivity::Eight)?;
            let removed = r.pred_mask.data().iter().zip(mask.data()).filter(|(a, b)| a != b).count();
            let line = AuditLine { domain, index: i, removed_pixels: removed, audit: &audit };
            writeln!(audit_lines, "{}", serde_json::to_string(&line)?)?;
            if i < cfg.maps {
                r.pred_mask.save_gray_png_unit(d.join(format!("{i:03}_plain.png")))?;
                mask.save_gray_png_unit(d.join(format!("{i:03}_corrected.png")))?;
            }
            fixed.push(EvalRecord { pred_mask: mask, ..r.clone() });
        }
        corrected.push((domain.clone(), fixed));
    }
    let plain = report_from_records(&records, &opts)?;
    let fixed = report_from_records(&corrected, &opts)?;
    write_report(&out, "metrics_plain", &plain)?;
    write_report(&out, "metrics_corrected", &fixed)?;
    write(&out.join("audit.jsonl"), audit_lines)?;
    let mut summary = String::from("domain,jf_plain,jf_corrected,delta\n");
    println!("{:<20} {:>8} {:>8} {:>8}", "domain", "plain", "UncCorr", "delta");
    for (a, b) in plain.domains.iter().zip(&fixed.domains) {
        writeln!(summary, "{},{},{},{}", a.domain, a.jf, b.jf, b.jf - a.jf)?;
        println!("{:<20} {:>8.4} {:>8.4} {:>+8.4}", a.domain, a.jf, b.jf, b.jf - a.jf);
    }
    write(&out.join("summary.csv"), summary)?;
    log::info!("correction outputs written to {}", out.display());
    Ok(())
}

/// Accepts a metrics file, an eval directory or a run directory.
fn locate_report(p: &Path) -> Result<PathBuf> {
    let candidates = [p.to_path_buf(), p.join(METRICS_JSON), p.join("eval").join(METRICS_JSON)];
    candidates
        .into_iter()
        .find(|c| c.is_file())
        .ok_or_else(|| anyhow!("missing evaluation report {} (run `ruackit eval` first)", p.join("eval").join(METRICS_JSON).display()))
}

fn read_report(p: &Path) -> Result<MetricsReport> {
    let path = locate_report(p)?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct PairReport {
    a: String,
    b: String,
    ood_mean_a: ruackit_core::metrics::Summary,
    ood_mean_b: ruackit_core::metrics::Summary,
    comparisons: Vec<PairedComparison>,
}

fn report_cmd(a: &Path, b: &Path, metrics: &[String], out: Option<&Path>) -> Result<()> {
    let ra = read_report(a)?;
    let rb = read_report(b)?;
    let comparisons = metrics
        .iter()
        .map(|m| compare_reports(&ra, &rb, m).map_err(|e| crate::config::usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("metric,domain,a,b,delta\n");
    for c in &comparisons {
        println!("{}: b − a per domain", c.metric);
        for i in 0..c.domains.len() {
            println!("  {:<20} {:>9.5} {:>9.5} {:>+9.5}", c.domains[i], c.a[i], c.b[i], c.delta[i]);
            writeln!(csv, "{},{},{},{},{}", c.metric, c.domains[i], c.a[i], c.b[i], c.delta[i])?;
        }
        match &c.test {
            Some(t) => {
                println!("  one-sided Wilcoxon: W+ = {}, n = {}, p = {:.4}", t.w_plus, t.n, t.p);
                writeln!(csv, "{},wilcoxon_p,,,{}", c.metric, t.p)?;
            }
            None => println!("  one-sided Wilcoxon: undefined (no non-zero differences)"),
        }
    }
    if let Some(dir) = out {
        mkdir(dir)?;
        let pair = PairReport {
            a: a.display().to_string(),
            b: b.display().to_string(),
            ood_mean_a: ra.ood_mean.clone(),
            ood_mean_b: rb.ood_mean.clone(),
            comparisons,
        };
        write(&dir.join("report.json"), serde_json::to_string_pretty(&pair)? + "\n")?;
        write(&dir.join("report.csv"), csv)?;
    }
    Ok(())
}
