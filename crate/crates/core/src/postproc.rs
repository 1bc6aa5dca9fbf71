//! Uncertainty-guided connected-component filtering of predicted masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Lower bound on the fragment-rejection threshold.
pub const THRESHOLD_FLOOR: f64 = 0.3;
pub const THRESHOLD_PERCENTILE: f64 = 95.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_neighbours(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(Error::InvalidArgument(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

/// Labels `1..=count` in order of each component's first pixel in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    pub labels: Vec<u32>,
    pub h: usize,
    pub w: usize,
    /// `sizes[l − 1]` is the pixel count of label `l`.
    pub sizes: Vec<usize>,
}

impl ComponentSet {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Mean of `values` over each component.
    pub fn means(&self, values: &Grid) -> Vec<f64> {
        let mut sum = vec![0.0; self.count()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                sum[l as usize - 1] += values.data()[i];
            }
        }
        sum.iter().zip(&self.sizes).map(|(s, &n)| s / n as f64).collect()
    }

    /// Label of the largest component (ties → lowest label).
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(u32, usize)> = None;
        for (i, &n) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((i as u32 + 1, n));
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Flood-fill labelling of pixels `≥ 0.5`.
pub fn connected_components(mask: &Grid, conn: Connectivity) -> ComponentSet {
    let (_, h, w) = mask.chw();
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut stack = Vec::new();
    for start in 0..h * w {
        if labels[start] != 0 || mask.data()[start] < 0.5 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if labels[j] == 0 && mask.data()[j] >= 0.5 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    ComponentSet { labels, h, w, sizes }
}

/// Nearest-rank percentile: the `⌈p/100 · n⌉`-th smallest value.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentAudit {
    pub label: u32,
    pub pixels: usize,
    pub mean_unc: f64,
    pub kept: bool,
}

/// What the filter saw and decided, one entry per pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPass {
    pub threshold: f64,
    pub components: Vec<ComponentAudit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAudit {
    pub passes: Vec<CorrectionPass>,
}

fn one_pass(mask: &Grid, unc: &Grid, conn: Connectivity) -> (Grid, CorrectionPass) {
    let cs = connected_components(mask, conn);
    let fg_unc: Vec<f64> = (0..mask.len()).filter(|&i| mask.data()[i] >= 0.5).map(|i| unc.data()[i]).collect();
    let threshold = nearest_rank_percentile(&fg_unc, THRESHOLD_PERCENTILE).map_or(THRESHOLD_FLOOR, |p| p.max(THRESHOLD_FLOOR));
    let means = cs.means(unc);
    let keep_label = cs.largest();
    let keep: Vec<bool> = means
        .iter()
        .enumerate()
        .map(|(i, &m)| Some(i as u32 + 1) == keep_label || m <= threshold)
        .collect();
    let out = Grid::from_fn(&[cs.h, cs.w], |i| {
        let l = cs.labels[i];
        (l > 0 && keep[l as usize - 1]) as u8 as f64
    });
    let components = (0..cs.count())
        .map(|i| ComponentAudit { label: i as u32 + 1, pixels: cs.sizes[i], mean_unc: means[i], kept: keep[i] })
        .collect();
    (out, CorrectionPass { threshold, components })
}

/// Drops every component except the largest whose mean uncertainty exceeds
/// `max(0.3, P95 of uncertainty over the predicted foreground)`. The rule is re-applied
/// until nothing changes, so the result is a fixed point.
pub fn unc_corr_audited(mask: &Grid, unc: &Grid, conn: Connectivity) -> Result<(Grid, CorrectionAudit)> {
    if mask.len() != unc.len() {
        return Err(Error::InvalidArgument(format!("mask {:?} vs uncertainty {:?}", mask.shape(), unc.shape())));
    }
    if unc.data().iter().any(|&u| !(0.0..=1.0).contains(&u)) {
        return Err(Error::InvalidArgument("uncertainty must lie in [0, 1]".into()));
    }
    let mut cur = mask.map(|v| (v >= 0.5) as u8 as f64);
    let mut passes = Vec::new();
    loop {
        let (next, pass) = one_pass(&cur, unc, conn);
        let changed = pass.components.iter().any(|c| !c.kept);
        passes.push(pass);
        cur = next;
        if !changed {
            break;
        }
    }
    Ok((cur, CorrectionAudit { passes }))
}

pub fn unc_corr(mask: &Grid, unc: &Grid) -> Result<Grid> {
    Ok(unc_corr_audited(mask, unc, Connectivity::Eight)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_counts() {
        let cb = Grid::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(connected_components(&cb, Connectivity::Four).count(), 2);
        assert_eq!(connected_components(&cb, Connectivity::Eight).count(), 1);
        assert_eq!(connected_components(&Grid::zeros(&[3, 3]), Connectivity::Eight).count(), 0);
    }

    #[test]
    fn spurious_fragment_removed() {
        // 60-pixel blob at u = 0.1, 2-pixel fragment at u = 0.95
        let mask = Grid::from_fn(&[10, 10], |i| ((i / 10) < 6 || i == 98 || i == 99) as u8 as f64);
        let unc = Grid::from_fn(&[10, 10], |i| if i >= 98 { 0.95 } else { 0.1 });
        let (out, audit) = unc_corr_audited(&mask, &unc, Connectivity::Eight).unwrap();
        assert_eq!(audit.passes[0].threshold, 0.3);
        assert_eq!(out.sum(), 60.0);
        assert_eq!(unc_corr(&mask, &Grid::full(&[10, 10], 0.2)).unwrap(), mask);
    }
}
