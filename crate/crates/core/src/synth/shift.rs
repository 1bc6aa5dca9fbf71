//! Parametric domain shifts applied to whole scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{clicks_for, render_texture, Scene, ALL_TEXTURES, DEFAULT_CLICKS, DEFAULT_MIN_SEP};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tape::{kernels, Border};

/// Smoothing width (pixels) of the random elastic field.
const ELASTIC_SMOOTH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Per-channel gain and offset.
    ColorTransfer,
    /// Gaussian blur with σ = magnitude pixels.
    Blur,
    /// Blends fresh textures into every region with weight `min(magnitude, 1)`.
    TextureSwap,
    /// Smooth random displacement of at most `magnitude` pixels; masks move with the image.
    Elastic,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ColorTransfer => "color_transfer",
            Self::Blur => "blur",
            Self::TextureSwap => "texture_swap",
            Self::Elastic => "elastic",
        }
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_transfer" => Ok(Self::ColorTransfer),
            "blur" => Ok(Self::Blur),
            "texture_swap" => Ok(Self::TextureSwap),
            "elastic" => Ok(Self::Elastic),
            _ => Err(Error::InvalidArgument(format!("unknown shift kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of each plane, clamped border.
fn blur_planes(data: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = h * w;
    let mut tmp = vec![0.0; c * n];
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let p = &data[ch * n..(ch + 1) * n];
        for y in 0..h {
            for x in 0..w {
                tmp[ch * n + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * p[y * w + (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[ch * n + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[ch * n + (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Smooth displacement `[2, H, W]` whose largest vector norm equals `m` pixels.
pub(crate) fn elastic_field(rng: &mut ChaCha8Rng, h: usize, w: usize, m: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..2 * h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut d = blur_planes(&raw, 2, h, w, ELASTIC_SMOOTH);
    let n = h * w;
    let peak = (0..n).map(|i| (d[i].powi(2) + d[n + i].powi(2)).sqrt()).fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut d {
            *v *= m / peak;
        }
    }
    d
}

/// Applies a shift; magnitude 0 returns the scene unchanged.
pub fn apply_shift(scene: &Scene, shift: &ShiftSpec) -> Result<Scene> {
    if !(shift.magnitude >= 0.0 && shift.magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("shift magnitude {} must be finite and ≥ 0", shift.magnitude)));
    }
    if shift.magnitude == 0.0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let m = shift.magnitude;
    let (c, h, w) = scene.image.chw();
    let n = h * w;
    let mut out = scene.clone();
    match shift.kind {
        ShiftKind::ColorTransfer => {
            let gain: [f64; 3] = [0, 1, 2].map(|_| 1.0 + m * rng.gen_range(-0.6..0.6));
            let off: [f64; 3] = [0, 1, 2].map(|_| m * rng.gen_range(-0.3..0.3));
            for ch in 0..3 {
                for v in &mut out.image.data_mut()[ch * n..(ch + 1) * n] {
                    *v = (*v * gain[ch] + off[ch]).clamp(0.0, 1.0);
                }
            }
        }
        ShiftKind::Blur => {
            out.image = Grid::from_vec(&[c, h, w], blur_planes(scene.image.data(), c, h, w, m))?;
        }
        ShiftKind::TextureSwap => {
            let alpha = m.min(1.0);
            let fg = scene.foreground();
            let mut regions: Vec<Grid> = scene.masks.clone();
            regions.push(fg.map(|v| 1.0 - v));
            for region in &regions {
                let kind = ALL_TEXTURES[rng.gen_range(0..ALL_TEXTURES.len())];
                let base = [0, 1, 2].map(|_| rng.gen_range(0.1..0.9));
                let tex = render_texture(&mut rng, kind, base, h, w);
                for i in 0..n {
                    if region.data()[i] > 0.5 {
                        for ch in 0..3 {
                            let v = &mut out.image.data_mut()[ch * n + i];
                            *v = (1.0 - alpha) * *v + alpha * tex.data()[ch * n + i];
                        }
                    }
                }
            }
        }
        ShiftKind::Elastic => {
            let d = elastic_field(&mut rng, h, w, m);
            out.image = Grid::from_vec(&[c, h, w], kernels::grid_sample(scene.image.data(), &d, c, h, w, Border::Clamp))?;
            let mut masks = Vec::with_capacity(scene.masks.len());
            for (k, mk) in scene.masks.iter().enumerate() {
                let soft = kernels::grid_sample(mk.data(), &d, 1, h, w, Border::Clamp);
                let bin = Grid::from_vec(&[h, w], soft.iter().map(|&v| (v > 0.5) as u8 as f64).collect())?;
                if bin.sum() == 0.0 {
                    log::warn!("elastic shift erased object {k} of scene {}", scene.seed);
                    continue;
                }
                masks.push(bin);
            }
            if masks.is_empty() {
                return Err(Error::Generation(format!("elastic shift erased every object of scene {}", scene.seed)));
            }
            out.clicks = clicks_for(&masks, DEFAULT_CLICKS, DEFAULT_MIN_SEP)?;
            out.masks = masks;
        }
    }
    Ok(out)
}
