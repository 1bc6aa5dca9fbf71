//! Mask-conditioned adversarial deformation: a bounded, zero-mean displacement field
//! that warps image and ground-truth masks together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{init_weight, ParamStore, VarMap};
use crate::scalar::Real;
use crate::tape::{kernels, Border, Tape, Var};

pub const FUSED_CHANNELS: usize = 8;
const MASK_CHANNELS: usize = 8;
/// Added to each object's mask before normalizing composite weights.
pub const COMPOSITE_FLOOR: f64 = 1e-3;

/// Dense displacement `[2, H, W]` in pixels; channel 0 is `dy`, channel 1 is `dx`.
/// Each component has zero spatial mean and magnitude at most `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Real = f64> {
    pub delta: Grid<T>,
    pub eps: f64,
}

/// Converts a bound given in normalized `[-1, 1]` grid units to pixels.
pub fn eps_to_pixels(eps_normalized: f64, h: usize, w: usize) -> f64 {
    eps_normalized * (h.min(w) as f64 - 1.0) / 2.0
}

/// Frozen projection/mask/fusion convolutions (`deform.frozen.*`) and the trainable,
/// zero-initialized offset convolution (`deform.off.*`).
pub fn init_params<T: Real>(feat_channels: usize, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef0_0000);
    let c = FUSED_CHANNELS;
    let mut p = ParamStore::new();
    p.insert("deform.frozen.proj.w", init_weight(&mut rng, &[c, feat_channels, 3, 3], feat_channels * 9, 1.0));
    p.insert("deform.frozen.proj.b", Grid::zeros(&[c]));
    p.insert("deform.frozen.mask.w", init_weight(&mut rng, &[MASK_CHANNELS, 1, 3, 3], 9, 1.0));
    p.insert("deform.frozen.mask.b", Grid::zeros(&[MASK_CHANNELS]));
    p.insert("deform.frozen.fuse.w", init_weight(&mut rng, &[c, c + MASK_CHANNELS, 3, 3], (c + MASK_CHANNELS) * 9, 1.0));
    p.insert("deform.frozen.fuse.b", Grid::zeros(&[c]));
    p.insert("deform.off.w", Grid::zeros(&[2, c, 3, 3]));
    p.insert("deform.off.b", Grid::zeros(&[2]));
    p
}

/// Raw per-object offsets `[2, H, W]` from encoder features `[C, H, W]` and one mask.
pub fn raw_offsets_on_tape<T: Real>(t: &mut Tape<T>, vars: &VarMap, feats: Var, mask: &Grid<T>) -> Result<Var> {
    let (_, h, w) = mask.chw();
    let proj = t.conv3x3(feats, vars.get("deform.frozen.proj.w")?, Some(vars.get("deform.frozen.proj.b")?))?;
    let m = t.constant(mask.clone().reshape(&[1, h, w])?);
    let me = t.conv3x3(m, vars.get("deform.frozen.mask.w")?, Some(vars.get("deform.frozen.mask.b")?))?;
    let cat = t.concat(&[proj, me])?;
    let fused = t.conv3x3(cat, vars.get("deform.frozen.fuse.w")?, Some(vars.get("deform.frozen.fuse.b")?))?;
    let fused = t.tanh(fused)?;
    t.conv3x3(fused, vars.get("deform.off.w")?, Some(vars.get("deform.off.b")?))
}

fn recenter_rescale<T: Real>(d: &mut [T], n: usize, eps: f64) {
    for ch in 0..2 {
        let plane = &mut d[ch * n..(ch + 1) * n];
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        for v in plane.iter_mut() {
            *v = T::lit(v.as_f64() - mean);
        }
    }
    let s = rescale_factor(d, eps);
    if s < 1.0 {
        for v in d.iter_mut() {
            *v = T::lit(v.as_f64() * s);
        }
    }
}

fn rescale_factor<T: Real>(d: &[T], eps: f64) -> f64 {
    let m = d.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    if m > eps {
        eps / m
    } else {
        1.0
    }
}

/// `δ = ε(2σ(raw) − 1)`, then per-component mean removal and a uniform rescale that
/// restores `‖δ‖∞ ≤ ε` without disturbing the zero mean.
pub fn bound_offsets<T: Real>(raw: &Grid<T>, eps: f64) -> Result<OffsetField<T>> {
    if raw.rank() != 3 || raw.shape()[0] != 2 {
        return Err(Error::InvalidArgument(format!("offsets must be [2,H,W], got {:?}", raw.shape())));
    }
    let n = raw.len() / 2;
    let mut d: Vec<T> = raw
        .data()
        .iter()
        .map(|&r| T::lit(eps * (2.0 / (1.0 + (-r.as_f64()).exp()) - 1.0)))
        .collect();
    recenter_rescale(&mut d, n, eps);
    Ok(OffsetField { delta: Grid::from_vec(raw.shape(), d)?, eps })
}

/// Mask-weighted blend of per-object fields, re-centred and re-bounded.
pub fn composite_offsets<T: Real>(fields: &[OffsetField<T>], masks: &[Grid<T>], eps: f64) -> Result<OffsetField<T>> {
    let w = composite_weights(masks)?;
    let shape = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no offset fields".into()))?
        .delta
        .shape()
        .to_vec();
    let n = shape[1] * shape[2];
    let mut d = vec![T::zero(); 2 * n];
    for (f, wk) in fields.iter().zip(&w) {
        for ch in 0..2 {
            for i in 0..n {
                d[ch * n + i] += f.delta.data()[ch * n + i] * wk.data()[i];
            }
        }
    }
    recenter_rescale(&mut d, n, eps);
    Ok(OffsetField { delta: Grid::from_vec(&shape, d)?, eps })
}

/// Per-object weights `(M_k + floor) / Σ_j (M_j + floor)`, each `[H, W]`.
pub fn composite_weights<T: Real>(masks: &[Grid<T>]) -> Result<Vec<Grid<T>>> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no masks".into()));
    }
    let n = masks[0].len();
    let floor = T::lit(COMPOSITE_FLOOR);
    let mut total = vec![T::zero(); n];
    for m in masks {
        for (t, &v) in total.iter_mut().zip(m.data()) {
            *t += v + floor;
        }
    }
    Ok(masks
        .iter()
        .map(|m| Grid::from_fn(&[m.chw().1, m.chw().2], |i| (m.data()[i] + floor) / total[i]))
        .collect())
}

/// Warps the image and every mask with the same field (bilinear, clamped border).
/// Masks come back soft.
pub fn warp_pair<T: Real>(image: &Grid<T>, masks: &[Grid<T>], field: &OffsetField<T>) -> Result<(Grid<T>, Vec<Grid<T>>)> {
    let (c, h, w) = image.chw();
    if field.delta.shape() != [2, h, w] {
        return Err(Error::InvalidArgument(format!("offset {:?} vs image {h}×{w}", field.delta.shape())));
    }
    let d = field.delta.data();
    let img = Grid::from_vec(image.shape(), kernels::grid_sample(image.data(), d, c, h, w, Border::Clamp))?;
    let warped = masks
        .iter()
        .map(|m| Grid::from_vec(m.shape(), kernels::grid_sample(m.data(), d, 1, h, w, Border::Clamp)))
        .collect::<Result<Vec<_>>>()?;
    Ok((img, warped))
}

/// Differentiable counterpart of [`bound_offsets`]; the rescale factor is treated as a constant.
pub fn bound_offsets_on_tape<T: Real>(t: &mut Tape<T>, raw: Var, eps: f64) -> Result<Var> {
    let s = t.sigmoid(raw)?;
    let d = t.affine(s, T::lit(2.0 * eps), T::lit(-eps))?;
    recenter_rescale_on_tape(t, d, eps)
}

fn recenter_rescale_on_tape<T: Real>(t: &mut Tape<T>, d: Var, eps: f64) -> Result<Var> {
    let shape = t.shape(d).to_vec();
    let n = shape[1] * shape[2];
    let flat = t.reshape(d, &[2, n])?;
    let avg = t.constant(Grid::full(&[n, 1], T::lit(1.0 / n as f64)));
    let mean = t.matmul(flat, avg)?;
    let ones = t.constant(Grid::ones(&[1, n]));
    let mean_b = t.matmul(mean, ones)?;
    let centered = t.sub(flat, mean_b)?;
    let s = rescale_factor(t.value(centered)?.data(), eps);
    let out = if s < 1.0 { t.scale(centered, T::lit(s))? } else { centered };
    t.reshape(out, &shape)
}

/// Mask-weighted composite of per-object offset nodes.
pub fn composite_on_tape<T: Real>(t: &mut Tape<T>, fields: &[Var], masks: &[Grid<T>], eps: f64) -> Result<Var> {
    let w = composite_weights(masks)?;
    let mut acc: Option<Var> = None;
    for (&f, wk) in fields.iter().zip(&w) {
        let wc = t.constant(wk.repeat_channels(2));
        let part = t.mul(f, wc)?;
        acc = Some(match acc {
            None => part,
            Some(a) => t.add(a, part)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::InvalidArgument("no offset fields".into()))?;
    recenter_rescale_on_tape(t, acc, eps)
}

/// Warps an image node and constant masks with an offset node; returns `(image, masks [K,H,W])`.
pub fn warp_pair_on_tape<T: Real>(t: &mut Tape<T>, image: Var, masks: &[Grid<T>], delta: Var) -> Result<(Var, Var)> {
    let img = t.grid_sample(image, delta, Border::Clamp)?;
    let m = t.constant(Grid::stack(masks)?);
    let wm = t.grid_sample(m, delta, Border::Clamp)?;
    Ok((img, wm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_raw_is_identity() {
        let f = bound_offsets(&Grid::<f64>::zeros(&[2, 4, 5]), 2.0).unwrap();
        assert!(f.delta.data().iter().all(|&v| v == 0.0));
        let img = Grid::from_fn(&[3, 4, 5], |i| i as f64 / 60.0);
        let m = Grid::from_fn(&[4, 5], |i| (i % 2) as f64);
        let (wi, wm) = warp_pair(&img, &[m.clone()], &f).unwrap();
        assert_eq!(wi, img);
        assert_eq!(wm[0], m);
    }

    #[test]
    fn bounded_and_centred() {
        let raw = Grid::<f64>::from_fn(&[2, 6, 6], |i| ((i * 7919) % 23) as f64 - 11.0);
        let f = bound_offsets(&raw, 1.5).unwrap();
        for ch in 0..2 {
            let m: f64 = f.delta.channel(ch).data().iter().sum::<f64>() / 36.0;
            assert!(m.abs() < 1e-12);
        }
        assert!(f.delta.max_abs() <= 1.5 + 1e-12);
    }

    #[test]
    fn tape_matches_pure() {
        let raw = Grid::<f64>::from_fn(&[2, 5, 4], |i| (i as f64 * 0.7).sin() * 4.0);
        let mut t = Tape::new();
        let r = t.constant(raw.clone());
        let d = bound_offsets_on_tape(&mut t, r, 0.8).unwrap();
        let pure = bound_offsets(&raw, 0.8).unwrap();
        for (a, b) in t.value(d).unwrap().data().iter().zip(pure.delta.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
