//! Style and deformation contracts measured on generated inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruackit_core::deform::{bound_offsets, composite_offsets, warp_pair, OffsetField};
use ruackit_core::style::{bound_style, ObjectStyle, StyleBounds, StyleResidual};
use ruackit_core::Grid;

/// Largest violation of `|μ̃−μ| ≤ |μ|ε_μ + ε_shift` and `|σ̃/σ − 1| ≤ ε_σ` (≤ 0 means satisfied).
pub fn style_bound_violation(style: &ObjectStyle, r: &StyleResidual, b: &StyleBounds) -> f64 {
    let out = bound_style(style, r, b);
    let mut worst = f64::NEG_INFINITY;
    for c in 0..3 {
        worst = worst.max((out.mu[c] - style.mu[c]).abs() - (style.mu[c].abs() * b.eps_mu + b.eps_shift) - 1e-12);
        if style.sigma[c] > 0.0 {
            worst = worst.max((out.sigma[c] / style.sigma[c] - 1.0).abs() - b.eps_sigma - 1e-12);
        }
    }
    worst
}

/// `(max |δ| − ε, max |component mean|)` for a field.
pub fn field_violation(delta: &Grid, eps: f64) -> (f64, f64) {
    let n = delta.len() / 2;
    let maxabs = delta.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = (0..2)
        .map(|c| (delta.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).abs())
        .fold(0.0, f64::max);
    (maxabs - eps, mean)
}

pub fn random_raw(rng: &mut impl Rng, h: usize, w: usize, scale: f64) -> Grid {
    Grid::from_fn(&[2, h, w], |_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
}

/// Smooth raw field: a few low-frequency sinusoids per component.
pub fn smooth_raw(rng: &mut impl Rng, h: usize, w: usize, amp: f64) -> Grid {
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (rng.gen_range(0.02..0.15), rng.gen_range(0.02..0.15), rng.gen_range(0.0..6.3), rng.gen_range(0.3..1.0)))
        .collect();
    Grid::from_fn(&[2, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        waves[c * 3..c * 3 + 3].iter().map(|(fy, fx, ph, a)| amp * a * (fy * y as f64 + fx * x as f64 + ph).sin()).sum()
    })
}

/// Piecewise-constant scene: background colour plus up to three flat rectangles.
pub fn flat_scene(rng: &mut impl Rng, h: usize, w: usize) -> (Grid, Vec<Grid>, Vec<[f64; 3]>) {
    let bg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let mut masks: Vec<Grid> = Vec::new();
    let mut colours = Vec::new();
    let mut img = Grid::from_fn(&[3, h, w], |i| bg[i / (h * w)]);
    for _ in 0..3 {
        let (rh, rw) = (rng.gen_range(10..20), rng.gen_range(10..20));
        let (y0, x0) = (rng.gen_range(2..h - rh - 2), rng.gen_range(2..w - rw - 2));
        let m = Grid::from_fn(&[h, w], |i| {
            let (y, x) = (i / w, i % w);
            ((y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x)) as u8 as f64
        });
        // keep objects disjoint with a gap of 2 px
        let grown = |i: usize| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            (y0 as isize - 2..(y0 + rh) as isize + 2).contains(&y) && (x0 as isize - 2..(x0 + rw) as isize + 2).contains(&x)
        };
        if masks.iter().any(|o| (0..h * w).any(|i| o.data()[i] > 0.5 && grown(i))) {
            continue;
        }
        let col = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        for i in 0..h * w {
            if m.data()[i] > 0.5 {
                for c in 0..3 {
                    img.data_mut()[c * h * w + i] = col[c];
                }
            }
        }
        masks.push(m);
        colours.push(col);
    }
    (img, masks, colours)
}

/// Pixels of a binarized mask whose 4-neighbours are all inside; interpolated edge
/// pixels blend object and background by construction and are left out.
fn interior(m: &Grid, h: usize, w: usize) -> Vec<usize> {
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && m.data()[y as usize * w + x as usize] >= 0.5;
    (0..h * w)
        .filter(|&i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            on(y, x) && on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)
        })
        .collect()
}

/// Worst masked-mean colour error over the interiors of warped masks, over `cases` random
/// flat scenes warped with bounded smooth fields. With `mismatched`, the image is warped
/// with the negated field, which must break the correspondence.
pub fn joint_warp_error(cases: usize, eps: f64, seed: u64, mismatched: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (64, 64);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (img, masks, colours) = flat_scene(&mut rng, h, w);
        let fields: Vec<_> = masks.iter().map(|_| bound_offsets(&smooth_raw(&mut rng, h, w, 3.0), eps).unwrap()).collect();
        let field = composite_offsets(&fields, &masks, eps).unwrap();
        let (mut wi, wm) = warp_pair(&img, &masks, &field).unwrap();
        if mismatched {
            let flipped = OffsetField { delta: field.delta.map(|v| -v), eps };
            wi = warp_pair(&img, &[], &flipped).unwrap().0;
        }
        for (m, col) in wm.iter().zip(&colours) {
            let idx = interior(m, h, w);
            if idx.is_empty() {
                continue;
            }
            for c in 0..3 {
                let mean = idx.iter().map(|&i| wi.data()[c * h * w + i]).sum::<f64>() / idx.len() as f64;
                worst = worst.max((mean - col[c]).abs());
            }
        }
    }
    worst
}

pub fn zero_warp_is_identity(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, masks, _) = flat_scene(&mut rng, 32, 32);
    let noisy = img.map(|v| v + 0.001 * (v * 977.0).sin());
    let field = bound_offsets(&Grid::zeros(&[2, 32, 32]), 4.0).unwrap();
    let (wi, wm) = warp_pair(&noisy, &masks, &field).unwrap();
    wi.to_bytes() == noisy.to_bytes() && wm.iter().zip(&masks).all(|(a, b)| a.to_bytes() == b.to_bytes())
}
