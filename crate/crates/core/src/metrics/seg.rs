//! Region Jaccard and boundary F-measure.

use crate::grid::Grid;

/// Boundary-F matching radius in pixels.
pub const BOUNDARY_TOLERANCE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub mean: f64,
}

fn on(m: &Grid, i: usize) -> bool {
    m.data()[i] >= 0.5
}

/// `|∩|/|∪|`, with two empty masks scoring 1.
pub fn jaccard(pred: &Grid, gt: &Grid) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for i in 0..pred.len() {
        let (a, b) = (on(pred, i), on(gt, i));
        inter += (a && b) as usize;
        uni += (a || b) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Foreground pixels with at least one in-image 4-neighbour in the background.
pub fn boundary_map(m: &Grid) -> Vec<bool> {
    let (_, h, w) = m.chw();
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !on(m, i) {
                continue;
            }
            let edge = (y > 0 && !on(m, i - w))
                || (y + 1 < h && !on(m, i + w))
                || (x > 0 && !on(m, i - 1))
                || (x + 1 < w && !on(m, i + 1));
            b[i] = edge;
        }
    }
    b
}

/// Square (Chebyshev) dilation by `r` pixels.
pub fn dilate(map: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !map[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with [`BOUNDARY_TOLERANCE`]; two empty boundaries score 1, one empty scores 0.
pub fn boundary_f(pred: &Grid, gt: &Grid) -> f64 {
    let (_, h, w) = pred.chw();
    let bp = boundary_map(pred);
    let bg = boundary_map(gt);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let dp = dilate(&bp, h, w, BOUNDARY_TOLERANCE);
    let dg = dilate(&bg, h, w, BOUNDARY_TOLERANCE);
    let hit_p = (0..h * w).filter(|&i| bp[i] && dg[i]).count();
    let hit_g = (0..h * w).filter(|&i| bg[i] && dp[i]).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn jf_score(pred: &Grid, gt: &Grid) -> JfScore {
    let j = jaccard(pred, gt);
    let f = boundary_f(pred, gt);
    JfScore { j, f, mean: 0.5 * (j + f) }
}
