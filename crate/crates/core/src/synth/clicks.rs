//! Deterministic click prompts derived from ground-truth masks.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::prompt::Click;

pub const DEFAULT_CLICKS: usize = 3;
pub const DEFAULT_MIN_SEP: f64 = 5.0;
/// Negative clicks are preferred within this many pixels of the object.
const NEG_BAND: f64 = 8.0;

/// Euclidean distance from each mask pixel to the nearest pixel outside the mask, where
/// everything beyond the image border counts as outside. Zero off the mask.
pub fn boundary_distance_map(mask: &Grid) -> Grid {
    let (_, h, w) = mask.chw();
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.data()[y as usize * w + x as usize] > 0.5
    };
    // nearest outside pixel always touches the mask, so only those need checking
    let mut rim = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !on(y, x) && (on(y - 1, x) || on(y + 1, x) || on(y, x - 1) || on(y, x + 1)) {
                rim.push((y as f64, x as f64));
            }
        }
    }
    Grid::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        if !on(y as isize, x as isize) {
            return 0.0;
        }
        let border = [y + 1, x + 1, h - y, w - x].into_iter().min().unwrap_or(0) as f64;
        rim.iter()
            .map(|&(ry, rx)| ((ry - y as f64).powi(2) + (rx - x as f64).powi(2)).sqrt())
            .fold(border, f64::min)
    })
}

fn nearest(clicks: &[Click], y: usize, x: usize) -> f64 {
    clicks.iter().map(|c| c.dist(y, x)).fold(f64::INFINITY, f64::min)
}

/// Best candidate by distance to prior clicks (ties → raster order), at least `sep` away.
fn farthest(cands: &[(usize, usize)], prior: &[Click], sep: f64) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for &(y, x) in cands {
        let d = nearest(prior, y, x);
        if d >= sep && best.is_none_or(|(_, bd)| d > bd) {
            best = Some(((y, x), d));
        }
    }
    best.map(|(p, _)| p)
}

/// Picks `sep` by halving until a candidate exists; `sep` reaches 0 at worst.
fn place(cands: &[(usize, usize)], prior: &[Click], sep: &mut f64) -> Option<(usize, usize)> {
    loop {
        if let Some(p) = farthest(cands, prior, *sep) {
            return Some(p);
        }
        if *sep == 0.0 {
            return None;
        }
        let relaxed = if *sep < 1.0 { 0.0 } else { *sep / 2.0 };
        log::warn!("click separation {sep} unsatisfiable, relaxing to {relaxed}");
        *sep = relaxed;
    }
}

/// Clicks for one object: `n − 1` positives and one negative when `n ≥ 3`, otherwise
/// `n` positives. The first positive sits at the interior point farthest from the
/// boundary; later positives are chosen within the object's inner half (by boundary
/// distance) to be farthest from earlier clicks. The negative is taken from background
/// within a narrow band around the object, falling back to any background pixel.
pub fn sample_clicks(mask: &Grid, others: &[Grid], n: usize, min_sep: f64) -> Result<Vec<Click>> {
    Ok(sample_clicks_relaxed(mask, others, n, min_sep)?.0)
}

/// [`sample_clicks`] plus the separation finally in force after any relaxation; every
/// pair of returned clicks is at least that far apart.
pub fn sample_clicks_relaxed(mask: &Grid, others: &[Grid], n: usize, min_sep: f64) -> Result<(Vec<Click>, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one click required".into()));
    }
    let (_, h, w) = mask.chw();
    let dist = boundary_distance_map(mask);
    let inside: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.data()[i] > 0.5).map(|i| (i / w, i % w)).collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (n_pos, n_neg) = if n >= 3 { (n - 1, 1) } else { (n, 0) };
    let mut sep = min_sep.max(0.0);
    let mut first = inside[0];
    for &(y, x) in &inside {
        if dist.at2(y, x) > dist.at2(first.0, first.1) {
            first = (y, x);
        }
    }
    let mut clicks = vec![Click::pos(first.0, first.1)];
    let dmax = dist.at2(first.0, first.1);
    let core: Vec<(usize, usize)> = inside.iter().copied().filter(|&(y, x)| dist.at2(y, x) >= 0.5 * dmax).collect();
    for _ in 1..n_pos {
        let mut s = sep;
        let p = farthest(&core, &clicks, s).or_else(|| place(&inside, &clicks, &mut s));
        sep = s;
        let (y, x) = p.ok_or_else(|| Error::Generation("no positive click position".into()))?;
        clicks.push(Click::pos(y, x));
    }
    if n_neg == 1 {
        let occupied = |i: usize| mask.data()[i] > 0.5 || others.iter().any(|m| m.data()[i] > 0.5);
        let bg: Vec<(usize, usize)> = (0..h * w).filter(|&i| !occupied(i)).map(|i| (i / w, i % w)).collect();
        if bg.is_empty() {
            return Err(Error::Generation("no background pixel for a negative click".into()));
        }
        let positives = clicks.clone();
        let band: Vec<(usize, usize)> = bg
            .iter()
            .copied()
            .filter(|&(y, x)| {
                let d = inside.iter().map(|&(iy, ix)| Click::pos(iy, ix).dist(y, x)).fold(f64::INFINITY, f64::min);
                (2.0..=NEG_BAND).contains(&d)
            })
            .collect();
        let mut s = sep;
        let p = if band.is_empty() { None } else { place(&band, &positives, &mut s) };
        let p = match p {
            Some(p) => Some(p),
            None => place(&bg, &positives, &mut s),
        };
        let (y, x) = p.ok_or_else(|| Error::Generation("no negative click position".into()))?;
        clicks.push(Click::neg(y, x));
        sep = s;
    }
    Ok((clicks, sep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_object() {
        let mut m = Grid::zeros(&[8, 8]);
        m.data_mut()[3 * 8 + 5] = 1.0;
        assert_eq!(sample_clicks(&m, &[], 1, 5.0).unwrap(), vec![Click::pos(3, 5)]);
        let c = sample_clicks(&m, &[], 3, 5.0).unwrap();
        assert_eq!(c[0], Click::pos(3, 5));
        assert!(!c[2].positive);
    }

    #[test]
    fn first_click_is_centre_of_square() {
        let m = Grid::from_fn(&[11, 11], |i| ((2..9).contains(&(i / 11)) && (2..9).contains(&(i % 11))) as u8 as f64);
        let c = sample_clicks(&m, &[], 3, 2.0).unwrap();
        assert_eq!(c[0], Click::pos(5, 5));
        assert!(c[1].dist(5, 5) >= 2.0);
    }
}
