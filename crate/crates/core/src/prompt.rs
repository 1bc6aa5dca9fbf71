//! Point prompts and their dense encodings.

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::scalar::Real;

/// A point prompt: positive clicks mark the object, negative clicks mark background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub y: usize,
    pub x: usize,
    pub positive: bool,
}

impl Click {
    pub fn pos(y: usize, x: usize) -> Self {
        Self { y, x, positive: true }
    }

    pub fn neg(y: usize, x: usize) -> Self {
        Self { y, x, positive: false }
    }

    pub fn label(&self) -> i8 {
        if self.positive {
            1
        } else {
            -1
        }
    }

    pub fn dist(&self, y: usize, x: usize) -> f64 {
        let dy = self.y as f64 - y as f64;
        let dx = self.x as f64 - x as f64;
        (dy * dy + dx * dx).sqrt()
    }
}

/// Two channels `2×H×W`: distance to the nearest positive / negative click divided by the
/// image diagonal, clipped to 1 (all ones when no click of that polarity exists).
pub fn prompt_channels<T: Real>(clicks: &[Click], h: usize, w: usize) -> Grid<T> {
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut g = Grid::ones(&[2, h, w]);
    for (ch, polarity) in [(0, true), (1, false)] {
        let sel: Vec<&Click> = clicks.iter().filter(|c| c.positive == polarity).collect();
        if sel.is_empty() {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let d = sel.iter().map(|c| c.dist(y, x)).fold(f64::INFINITY, f64::min);
                g.set3(ch, y, x, T::lit((d / diag).min(1.0)));
            }
        }
    }
    g
}

/// Spatial weights for pooling the prompt token: a sum of isotropic Gaussians (σ = 2 px)
/// centred on the positive clicks, or uniform weights when there are none.
pub fn token_weights<T: Real>(clicks: &[Click], h: usize, w: usize) -> Grid<T> {
    let pos: Vec<&Click> = clicks.iter().filter(|c| c.positive).collect();
    if pos.is_empty() {
        return Grid::ones(&[h, w]);
    }
    let s2 = 2.0 * 2.0 * 2.0;
    Grid::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        T::lit(pos.iter().map(|c| (-c.dist(y, x).powi(2) / s2).exp()).sum::<f64>())
    })
}
