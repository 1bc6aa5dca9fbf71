//! Constructed and fuzzed cases for uncertainty-guided component filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruackit_core::postproc::{connected_components, unc_corr, unc_corr_audited, Connectivity};
use ruackit_core::Grid;

fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Grid {
    Grid::from_fn(&[h, w], |i| f(i / w, i % w))
}

/// `(description, mask, uncertainty, expected output)`.
pub fn constructed() -> Vec<(&'static str, Grid, Grid, Grid)> {
    let blob = |y: usize, x: usize| y < 8 && x < 8;
    let frag = |y: usize, x: usize| y == 15 && x == 15;
    let mask = grid(16, 16, |y, x| (blob(y, x) || frag(y, x)) as u8 as f64);
    let only_blob = grid(16, 16, |y, x| blob(y, x) as u8 as f64);
    vec![
        ("uncertain fragment dropped", mask.clone(), grid(16, 16, |y, x| if frag(y, x) { 0.9 } else { 0.1 }), only_blob.clone()),
        ("confident fragment kept", mask.clone(), grid(16, 16, |y, x| if frag(y, x) { 0.2 } else { 0.1 }), mask.clone()),
        // fragment mean equals the 0.3 floor: not strictly above, kept
        ("fragment at the floor kept", mask.clone(), grid(16, 16, |y, x| if frag(y, x) { 0.3 } else { 0.05 }), mask.clone()),
        // P95 of foreground uncertainty (0.6) exceeds the floor and sets the threshold
        ("percentile threshold keeps", mask.clone(), grid(16, 16, |y, x| if frag(y, x) { 0.55 } else { 0.6 }), mask.clone()),
        ("percentile threshold drops", mask.clone(), grid(16, 16, |y, x| if frag(y, x) { 0.95 } else { 0.6 }), only_blob),
        ("uncertain largest component kept", mask.clone(), Grid::full(&[16, 16], 0.99), mask),
    ]
}

/// Random blobs: a few filled rectangles, some touching.
pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Grid {
    let mut g = Grid::zeros(&[h, w]);
    for _ in 0..rng.gen_range(0..6) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(1..5), rng.gen_range(1..5));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                g.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    g
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub cases: usize,
    pub largest_lost: usize,
    pub not_idempotent: usize,
    pub grew: usize,
}

pub fn fuzz(cases: usize, seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = FuzzOutcome { cases, ..Default::default() };
    for _ in 0..cases {
        let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let mask = random_mask(&mut rng, h, w);
        let unc = Grid::from_fn(&[h, w], |_| rng.gen::<f64>().powi(rng.gen_range(1..4)));
        let conn = if rng.gen_bool(0.5) { Connectivity::Four } else { Connectivity::Eight };
        let (out, _) = unc_corr_audited(&mask, &unc, conn).unwrap();
        let cs = connected_components(&mask, conn);
        if let Some(l) = cs.largest() {
            let lost = (0..h * w).any(|i| cs.labels[i] == l && out.data()[i] < 0.5);
            o.largest_lost += lost as usize;
        }
        let (again, _) = unc_corr_audited(&out, &unc, conn).unwrap();
        o.not_idempotent += (again != out) as usize;
        o.grew += (0..h * w).any(|i| out.data()[i] > 0.5 && mask.data()[i] < 0.5) as usize;
    }
    o
}

pub fn constructed_failures() -> Vec<&'static str> {
    constructed().into_iter().filter(|(_, m, u, want)| &unc_corr(m, u).unwrap() != want).map(|(n, ..)| n).collect()
}
