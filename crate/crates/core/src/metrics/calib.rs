//! Uncertainty-quality metrics: PAvPU, risk–coverage, ECE, AUROC and correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_TAUS: [f64; 3] = [0.01, 0.05, 0.1];
pub const DEFAULT_ECE_BINS: usize = 15;

/// Patch counts: accurate/inaccurate × certain/uncertain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PavpuCounts {
    pub ac: usize,
    pub au: usize,
    pub ic: usize,
    pub iu: usize,
}

impl PavpuCounts {
    pub fn add(&mut self, o: PavpuCounts) {
        self.ac += o.ac;
        self.au += o.au;
        self.ic += o.ic;
        self.iu += o.iu;
    }

    pub fn value(&self) -> f64 {
        let n = self.ac + self.au + self.ic + self.iu;
        if n == 0 {
            0.0
        } else {
            (self.ac + self.iu) as f64 / n as f64
        }
    }
}

/// Patch counts for one image. `err` is the per-pixel error indicator; edge patches
/// smaller than `patch` are kept.
pub fn pavpu_counts(err: &Grid, unc: &Grid, patch: usize, tau: f64) -> Result<PavpuCounts> {
    if err.shape() != unc.shape() || patch == 0 {
        return Err(Error::InvalidArgument(format!("pavpu: err {:?}, unc {:?}, patch {patch}", err.shape(), unc.shape())));
    }
    let (_, h, w) = err.chw();
    let mut c = PavpuCounts::default();
    for py in (0..h).step_by(patch) {
        for px in (0..w).step_by(patch) {
            let (mut n, mut wrong, mut u) = (0usize, 0usize, 0.0);
            for y in py..(py + patch).min(h) {
                for x in px..(px + patch).min(w) {
                    let i = y * w + x;
                    n += 1;
                    wrong += (err.data()[i] >= 0.5) as usize;
                    u += unc.data()[i];
                }
            }
            let accurate = (n - wrong) as f64 / n as f64 >= 0.5;
            let uncertain = u / n as f64 > tau;
            match (accurate, uncertain) {
                (true, false) => c.ac += 1,
                (true, true) => c.au += 1,
                (false, false) => c.ic += 1,
                (false, true) => c.iu += 1,
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PavpuResult {
    pub taus: Vec<f64>,
    pub per_tau: Vec<f64>,
    pub mean: f64,
}

/// PAvPU pooled over all patches of all `(err, unc)` pairs, for each threshold.
pub fn pavpu(pairs: &[(&Grid, &Grid)], patch: usize, taus: &[f64]) -> Result<PavpuResult> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("pavpu needs at least one threshold".into()));
    }
    let mut per_tau = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut total = PavpuCounts::default();
        for (e, u) in pairs {
            total.add(pavpu_counts(e, u, patch, tau)?);
        }
        per_tau.push(total.value());
    }
    let mean = per_tau.iter().sum::<f64>() / per_tau.len() as f64;
    Ok(PavpuResult { taus: taus.to_vec(), per_tau, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverage {
    pub aurc: f64,
    /// `(coverage, risk)` at the requested coverage levels.
    pub curve: Vec<(f64, f64)>,
}

/// Risk–coverage analysis: pixels are accepted in ascending uncertainty (stable on ties),
/// risk at `k` accepted pixels is their mean error, AURC is the mean risk over all `k`.
/// Each coverage level `c` maps to `k = max(1, ⌈cN⌉)`.
pub fn aurc(err: &[f64], unc: &[f64], coverages: &[f64]) -> Result<RiskCoverage> {
    if err.is_empty() || err.len() != unc.len() {
        return Err(Error::InvalidArgument(format!("aurc: {} errors vs {} uncertainties", err.len(), unc.len())));
    }
    let n = err.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| unc[a].total_cmp(&unc[b]));
    let mut risks = Vec::with_capacity(n);
    let mut cum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cum += err[i];
        risks.push(cum / (k + 1) as f64);
    }
    let aurc = risks.iter().sum::<f64>() / n as f64;
    let curve = coverages
        .iter()
        .map(|&c| {
            let k = ((c * n as f64).ceil() as usize).clamp(1, n);
            (c, risks[k - 1])
        })
        .collect();
    Ok(RiskCoverage { aurc, curve })
}

/// Expected calibration error with `bins` equal-width bins over confidence `max(p, 1−p) ∈ [0.5, 1]`.
pub fn ece(prob: &[f64], gt: &[f64], bins: usize) -> Result<f64> {
    if bins == 0 || prob.is_empty() || prob.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("ece: {} probs, {} labels, {bins} bins", prob.len(), gt.len())));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&p, &y) in prob.iter().zip(gt) {
        let conf = p.max(1.0 - p);
        let b = (((conf - 0.5) / 0.5 * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        acc_sum[b] += ((p >= 0.5) == (y >= 0.5)) as u8 as f64;
    }
    let n = prob.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            c / n * (acc_sum[b] / c - conf_sum[b] / c).abs()
        })
        .sum())
}

/// Midranks (1-based) of `v`.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that an erroneous pixel has higher uncertainty than a correct one (ties count ½).
pub fn auroc(unc: &[f64], err: &[f64]) -> Result<f64> {
    if unc.len() != err.len() {
        return Err(Error::InvalidArgument("auroc: length mismatch".into()));
    }
    let n1 = err.iter().filter(|&&e| e >= 0.5).count();
    let n0 = err.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Undefined("AUROC needs both correct and erroneous samples"));
    }
    let ranks = midranks(unc);
    let r1: f64 = ranks.iter().zip(err).filter(|(_, &e)| e >= 0.5).map(|(r, _)| r).sum();
    Ok((r1 - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 as f64 * n0 as f64))
}

/// Pearson correlation; undefined for constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("pearson: need two equal-length vectors of length ≥ 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mask-level AUROC: masks with IoU strictly below the median IoU are the positives,
/// scored by their mean uncertainty.
pub fn auroc_mask(mean_unc: &[f64], iou: &[f64]) -> Result<f64> {
    if mean_unc.len() != iou.len() || iou.is_empty() {
        return Err(Error::InvalidArgument("auroc_mask: length mismatch".into()));
    }
    let mut s = iou.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let bad: Vec<f64> = iou.iter().map(|&v| (v < median) as u8 as f64).collect();
    auroc(mean_unc, &bad)
}
