//! Segmentation, calibration and uncertainty metrics plus paired significance tests.

mod calib;
mod seg;
mod wilcoxon;

pub use calib::{
    auroc, auroc_mask, aurc, ece, midranks, pavpu, pavpu_counts, pearson, PavpuCounts, PavpuResult, RiskCoverage,
    DEFAULT_ECE_BINS, DEFAULT_PATCH, DEFAULT_TAUS,
};
pub use seg::{boundary_f, boundary_map, dilate, jaccard, jf_score, JfScore, BOUNDARY_TOLERANCE};
pub use wilcoxon::{wilcoxon_signed_rank, Alternative, WilcoxonResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Masks are dilated by this many pixels before pooling features for shift vectors.
pub const ALIGNMENT_DILATION: usize = 2;

/// One evaluated prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub pred_prob: Grid,
    pub pred_mask: Grid,
    pub gt_mask: Grid,
    pub unc: Grid,
    pub domain: String,
}

impl EvalRecord {
    /// Thresholds `pred_prob` at 0.5 and binarizes `gt` at 0.5.
    pub fn new(pred_prob: Grid, unc: Grid, gt: &Grid, domain: &str) -> Result<Self> {
        if pred_prob.shape() != unc.shape() || pred_prob.shape() != gt.shape() {
            return Err(Error::InvalidArgument(format!(
                "record shapes differ: prob {:?}, unc {:?}, gt {:?}",
                pred_prob.shape(),
                unc.shape(),
                gt.shape()
            )));
        }
        let pred_mask = pred_prob.map(|p| (p >= 0.5) as u8 as f64);
        let gt_mask = gt.map(|g| (g >= 0.5) as u8 as f64);
        Ok(Self { pred_prob, pred_mask, gt_mask, unc, domain: domain.to_string() })
    }

    /// Per-pixel error indicator.
    pub fn error_map(&self) -> Grid {
        self.pred_mask.zip_map(&self.gt_mask, |a, b| (a != b) as u8 as f64).expect("shapes checked")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub patch: usize,
    pub taus: Vec<f64>,
    pub ece_bins: usize,
    pub coverages: Vec<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            taus: DEFAULT_TAUS.to_vec(),
            ece_bins: DEFAULT_ECE_BINS,
            coverages: (1..=20).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub records: usize,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub pavpu: PavpuResult,
    pub aurc: f64,
    pub risk_coverage: Vec<(f64, f64)>,
    pub ece: f64,
    /// `None` when every pixel is correct (or every pixel wrong).
    pub auroc_pixel: Option<f64>,
    pub pcc: Option<f64>,
    pub auroc_mask: Option<f64>,
}

/// Metrics for one domain; J/F average over records, pixel metrics pool all pixels.
pub fn evaluate_domain(domain: &str, records: &[EvalRecord], opts: &MetricOptions) -> Result<DomainMetrics> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("domain `{domain}` has no records")));
    }
    let n = records.len() as f64;
    let scores: Vec<JfScore> = records.iter().map(|r| jf_score(&r.pred_mask, &r.gt_mask)).collect();
    let errs: Vec<Grid> = records.iter().map(EvalRecord::error_map).collect();
    let pairs: Vec<(&Grid, &Grid)> = errs.iter().zip(records).map(|(e, r)| (e, &r.unc)).collect();
    let pv = pavpu(&pairs, opts.patch, &opts.taus)?;
    let err_all: Vec<f64> = errs.iter().flat_map(|e| e.data().iter().copied()).collect();
    let unc_all: Vec<f64> = records.iter().flat_map(|r| r.unc.data().iter().copied()).collect();
    let prob_all: Vec<f64> = records.iter().flat_map(|r| r.pred_prob.data().iter().copied()).collect();
    let gt_all: Vec<f64> = records.iter().flat_map(|r| r.gt_mask.data().iter().copied()).collect();
    let rc = aurc(&err_all, &unc_all, &opts.coverages)?;
    let mean_unc: Vec<f64> = records.iter().map(|r| r.unc.mean()).collect();
    let ious: Vec<f64> = scores.iter().map(|s| s.j).collect();
    Ok(DomainMetrics {
        domain: domain.to_string(),
        records: records.len(),
        j: scores.iter().map(|s| s.j).sum::<f64>() / n,
        f: scores.iter().map(|s| s.f).sum::<f64>() / n,
        jf: scores.iter().map(|s| s.mean).sum::<f64>() / n,
        pavpu: pv,
        aurc: rc.aurc,
        risk_coverage: rc.curve,
        ece: ece(&prob_all, &gt_all, opts.ece_bins)?,
        auroc_pixel: auroc(&unc_all, &err_all).ok(),
        pcc: pearson(&unc_all, &err_all).ok(),
        auroc_mask: auroc_mask(&mean_unc, &ious).ok(),
    })
}

/// Per-domain metrics plus their unweighted mean over the shifted domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mc_samples: usize,
    pub domains: Vec<DomainMetrics>,
    pub ood_mean: Summary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub jf: f64,
    pub pavpu: f64,
    pub aurc: f64,
    pub ece: f64,
    pub auroc_pixel: Option<f64>,
    pub pcc: Option<f64>,
}

pub const SOURCE_DOMAIN: &str = "source";

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn new(mc_samples: usize, domains: Vec<DomainMetrics>) -> Self {
        let ood: Vec<&DomainMetrics> = domains.iter().filter(|d| d.domain != SOURCE_DOMAIN).collect();
        let k = ood.len().max(1) as f64;
        let ood_mean = Summary {
            jf: ood.iter().map(|d| d.jf).sum::<f64>() / k,
            pavpu: ood.iter().map(|d| d.pavpu.mean).sum::<f64>() / k,
            aurc: ood.iter().map(|d| d.aurc).sum::<f64>() / k,
            ece: ood.iter().map(|d| d.ece).sum::<f64>() / k,
            auroc_pixel: mean_opt(ood.iter().map(|d| d.auroc_pixel)),
            pcc: mean_opt(ood.iter().map(|d| d.pcc)),
        };
        Self { mc_samples, domains, ood_mean }
    }

    pub fn domain(&self, name: &str) -> Option<&DomainMetrics> {
        self.domains.iter().find(|d| d.domain == name)
    }

    /// One row per domain.
    pub fn to_csv(&self) -> Result<String> {
        let taus = self.domains.first().map(|d| d.pavpu.taus.clone()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head: Vec<String> = ["domain", "records", "mc_samples", "j", "f", "jf"].map(String::from).to_vec();
        head.extend(taus.iter().map(|t| format!("pavpu@{t}")));
        head.extend(["pavpu", "aurc", "ece", "auroc_pixel", "pcc", "auroc_mask"].map(String::from));
        w.write_record(&head).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for d in &self.domains {
            let mut row = vec![
                d.domain.clone(),
                d.records.to_string(),
                self.mc_samples.to_string(),
                d.j.to_string(),
                d.f.to_string(),
                d.jf.to_string(),
            ];
            row.extend(d.pavpu.per_tau.iter().map(f64::to_string));
            row.extend([
                d.pavpu.mean.to_string(),
                d.aurc.to_string(),
                d.ece.to_string(),
                opt(d.auroc_pixel),
                opt(d.pcc),
                opt(d.auroc_mask),
            ]);
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Pearson correlation of two per-channel shift vectors and the norm of the first.
pub fn channel_alignment(shift_aug: &[f64], shift_ood: &[f64]) -> Result<(f64, f64)> {
    let r = pearson(shift_aug, shift_ood)?;
    Ok((r, shift_aug.iter().map(|v| v * v).sum::<f64>().sqrt()))
}

/// Per-channel mean difference `shifted − clean` of features `[C, H, W]` pooled inside
/// dilated masks, averaged over pairs.
pub fn feature_shift(clean: &[Grid], shifted: &[Grid], masks: &[Grid]) -> Result<Vec<f64>> {
    if clean.is_empty() || clean.len() != shifted.len() || clean.len() != masks.len() {
        return Err(Error::InvalidArgument("feature_shift: need matching, non-empty lists".into()));
    }
    let (c, _, _) = clean[0].chw();
    let mut acc = vec![0.0; c];
    for ((a, b), m) in clean.iter().zip(shifted).zip(masks) {
        let (_, h, w) = a.chw();
        let on: Vec<bool> = m.data().iter().map(|&v| v >= 0.5).collect();
        let region = dilate(&on, h, w, ALIGNMENT_DILATION);
        let cnt = region.iter().filter(|&&r| r).count();
        if cnt == 0 {
            return Err(Error::EmptyMask);
        }
        let n = h * w;
        for (ch, slot) in acc.iter_mut().enumerate() {
            let s: f64 = (0..n).filter(|&i| region[i]).map(|i| b.data()[ch * n + i] - a.data()[ch * n + i]).sum();
            *slot += s / cnt as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v / clean.len() as f64).collect())
}

/// Paired per-domain comparison of two reports on a chosen metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub metric: String,
    pub domains: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub delta: Vec<f64>,
    pub test: Option<WilcoxonResult>,
}

/// Metric accessor by name; `higher_is_better` decides the one-sided alternative.
pub fn metric_value(d: &DomainMetrics, metric: &str) -> Result<Option<f64>> {
    Ok(match metric {
        "jf" => Some(d.jf),
        "j" => Some(d.j),
        "f" => Some(d.f),
        "pavpu" => Some(d.pavpu.mean),
        "aurc" => Some(d.aurc),
        "ece" => Some(d.ece),
        "auroc_pixel" => d.auroc_pixel,
        "pcc" => d.pcc,
        "auroc_mask" => d.auroc_mask,
        _ => return Err(Error::InvalidArgument(format!("unknown metric `{metric}`"))),
    })
}

pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "aurc" | "ece")
}

/// Deltas `b − a` over the shifted domains both reports share, with a one-sided exact
/// Wilcoxon test of "b improves on a".
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport, metric: &str) -> Result<PairedComparison> {
    let mut out = PairedComparison { metric: metric.to_string(), domains: vec![], a: vec![], b: vec![], delta: vec![], test: None };
    for da in a.domains.iter().filter(|d| d.domain != SOURCE_DOMAIN) {
        let Some(db) = b.domain(&da.domain) else { continue };
        if let (Some(x), Some(y)) = (metric_value(da, metric)?, metric_value(db, metric)?) {
            out.domains.push(da.domain.clone());
            out.a.push(x);
            out.b.push(y);
            out.delta.push(y - x);
        }
    }
    let alt = if higher_is_better(metric) { Alternative::Greater } else { Alternative::Less };
    out.test = wilcoxon_signed_rank(&out.b, &out.a, alt).ok();
    Ok(out)
}
