//! Direct-definition oracles for the segmentation and uncertainty metrics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruackit_core::metrics::{self, Alternative};
use ruackit_core::Grid;

pub const CASES: usize = 200;
pub const TOL: f64 = 1e-12;

pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let uni = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

fn boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| -> Option<bool> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| m[y as usize * w + x as usize])
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) == Some(true) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| at(y + dy, x + dx) == Some(false)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Precision/recall of boundary pixels matched within Chebyshev distance 1, by pairwise search.
pub fn boundary_f(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (pa, pb) = (boundary(a, h, w), boundary(b, h, w));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return 0.0;
    }
    let near = |p: &(usize, usize), set: &[(usize, usize)]| set.iter().any(|q| p.0.abs_diff(q.0) <= 1 && p.1.abs_diff(q.1) <= 1);
    let prec = pa.iter().filter(|p| near(p, &pb)).count() as f64 / pa.len() as f64;
    let rec = pb.iter().filter(|p| near(p, &pa)).count() as f64 / pb.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

pub fn pavpu(err: &[bool], unc: &[f64], h: usize, w: usize, patch: usize, tau: f64) -> f64 {
    let mut cells: BTreeMap<(usize, usize), (usize, usize, f64)> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let c = cells.entry((y / patch, x / patch)).or_default();
            c.0 += 1;
            c.1 += err[y * w + x] as usize;
            c.2 += unc[y * w + x];
        }
    }
    let good = cells
        .values()
        .filter(|(n, wrong, u)| {
            let accurate = 2 * (n - wrong) >= *n;
            let uncertain = u / *n as f64 > tau;
            accurate != uncertain
        })
        .count();
    good as f64 / cells.len() as f64
}

/// Mean over k of the error rate among pixels whose uncertainty is at most the k-th smallest.
/// Needs distinct uncertainties.
pub fn aurc(err: &[f64], unc: &[f64]) -> f64 {
    let n = err.len();
    let mut total = 0.0;
    for i in 0..n {
        let accepted: Vec<usize> = (0..n).filter(|&j| unc[j] <= unc[i]).collect();
        total += accepted.iter().map(|&j| err[j]).sum::<f64>() / accepted.len() as f64;
    }
    total / n as f64
}

pub fn ece(prob: &[f64], gt: &[f64], bins: usize) -> f64 {
    let n = prob.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = 0.5 + 0.5 * b as f64 / bins as f64;
        let hi = 0.5 + 0.5 * (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..prob.len())
            .filter(|&i| {
                let c = prob[i].max(1.0 - prob[i]);
                c >= lo && (c < hi || (b + 1 == bins && c <= hi))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| (prob[i] >= 0.5) == (gt[i] >= 0.5)).count() as f64 / m;
        let conf = members.iter().map(|&i| prob[i].max(1.0 - prob[i])).sum::<f64>() / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

/// Pairwise Mann–Whitney count with ties as ½.
pub fn auroc(unc: &[f64], err: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = (0..unc.len()).filter(|&i| err[i]).map(|i| unc[i]).collect();
    let neg: Vec<f64> = (0..unc.len()).filter(|&i| !err[i]).map(|i| unc[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for p in &pos {
        for q in &neg {
            s += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
        }
    }
    Some(s / (pos.len() * neg.len()) as f64)
}

/// Pairwise-difference form: `Σ_{i<j} (x_i − x_j)(y_i − y_j)` is n² times the covariance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut cxy, mut cxx, mut cyy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            cxy += dx * dy;
            cxx += dx * dx;
            cyy += dy * dy;
        }
    }
    (cxx > 0.0 && cyy > 0.0).then(|| cxy / (cxx.sqrt() * cyy.sqrt()))
}

/// Upper-tail p-value of the positive rank sum by enumerating all 2^n sign patterns.
pub fn wilcoxon_greater(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    // midrank = 1 + #smaller + (#equal − 1)/2
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&v| 1.0 + abs.iter().filter(|&&o| o < v).count() as f64 + (abs.iter().filter(|&&o| o == v).count() - 1) as f64 / 2.0)
        .collect();
    let w: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let n = d.len();
    let mut hits = 0usize;
    for mask in 0..(1usize << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        hits += (s >= w - 1e-9) as usize;
    }
    hits as f64 / (1usize << n) as f64
}

/// Worst absolute deviation per metric over `CASES` random inputs of at most 16 pixels.
pub fn worst_deviations(seed: u64) -> BTreeMap<&'static str, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, a: f64, b: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max((a - b).abs());
    };
    for _ in 0..CASES {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let n = h * w;
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let g = |m: &[bool]| Grid::from_vec(&[h, w], m.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let (gp, gg) = (g(&pred), g(&gt));
        note("J", metrics::jaccard(&gp, &gg), jaccard(&pred, &gt));
        note("F", metrics::boundary_f(&gp, &gg), boundary_f(&pred, &gt, h, w));

        let err: Vec<bool> = pred.iter().zip(&gt).map(|(a, b)| a != b).collect();
        let errf: Vec<f64> = err.iter().map(|&e| e as u8 as f64).collect();
        let unc: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let patch = rng.gen_range(1..=3);
        let tau = rng.gen_range(0.0..1.0);
        let ge = Grid::from_vec(&[h, w], errf.clone()).unwrap();
        let gu = Grid::from_vec(&[h, w], unc.clone()).unwrap();
        let pv = metrics::pavpu(&[(&ge, &gu)], patch, &[tau]).unwrap().mean;
        note("PAvPU", pv, pavpu(&err, &unc, h, w, patch, tau));
        note("AURC", metrics::aurc(&errf, &unc, &[]).unwrap().aurc, aurc(&errf, &unc));

        let prob: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let bins = rng.gen_range(1..=15);
        let gtf: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
        note("ECE", metrics::ece(&prob, &gtf, bins).unwrap(), ece(&prob, &gtf, bins));

        // coarse uncertainties to exercise ties
        let tied: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
        match (metrics::auroc(&tied, &errf).ok(), auroc(&tied, &err)) {
            (Some(a), Some(b)) => note("AUROC", a, b),
            (None, None) => note("AUROC", 0.0, 0.0),
            _ => note("AUROC", 0.0, 1.0),
        }
        if n >= 2 {
            match (metrics::pearson(&unc, &prob).ok(), pearson(&unc, &prob)) {
                (Some(a), Some(b)) => note("PCC", a, b),
                (None, None) => {}
                _ => note("PCC", 0.0, 1.0),
            }
        }
    }
    worst
}

/// Worst |p − enumerated p| over random paired samples with n ≤ 10, ties included.
pub fn wilcoxon_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let n = rng.gen_range(1..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        if a == b || a.iter().zip(&b).all(|(x, y)| x == y) {
            continue;
        }
        let p = metrics::wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap().p;
        worst = worst.max((p - wilcoxon_greater(&a, &b)).abs());
    }
    worst
}

/// Pixel AUROC of uniform-random uncertainty against a random error map.
pub fn chance_auroc(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unc: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let err: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
    metrics::auroc(&unc, &err).unwrap()
}
