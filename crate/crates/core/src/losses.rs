//! Segmentation and calibration losses, on the tape and as plain functions.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::head::HeadNodes;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::weibull::{self, GammaPrior};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_SMOOTH: f64 = 1e-6;

/// Loss components as tape nodes (all scalars).
#[derive(Clone, Copy, Debug)]
pub struct SegLossNodes {
    pub focal: Var,
    pub dice: Var,
    pub iou: Var,
    pub total: Var,
}

/// Plain values of the segmentation loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLoss {
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
    pub total: f64,
}

/// Sigmoid focal loss, mean over pixels; cross-entropy via softplus so extreme logits stay finite.
pub fn focal_on_tape<T: Real>(t: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    let p = t.sigmoid(logits)?;
    let neg = t.neg(logits)?;
    let sp_neg = t.softplus(neg)?;
    let sp_pos = t.softplus(logits)?;
    let q = t.affine(target, -T::one(), T::one())?;
    let ce_fg = t.mul(target, sp_neg)?;
    let ce_bg = t.mul(q, sp_pos)?;
    let ce = t.add(ce_fg, ce_bg)?;
    // 1 − p_t = p + y − 2py
    let py = t.mul(p, target)?;
    let s = t.add(p, target)?;
    let two_py = t.scale(py, T::lit(2.0))?;
    let miss = t.sub(s, two_py)?;
    let wgt = t.powf(miss, T::lit(FOCAL_GAMMA))?;
    let alpha = t.affine(target, T::lit(2.0 * FOCAL_ALPHA - 1.0), T::lit(1.0 - FOCAL_ALPHA))?;
    let l = t.mul(wgt, ce)?;
    let l = t.mul(alpha, l)?;
    t.mean(l)
}

/// Soft dice `1 − (2Σpy + s)/(Σp + Σy + s)`.
pub fn dice_on_tape<T: Real>(t: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    let p = t.sigmoid(logits)?;
    let py = t.mul(p, target)?;
    let inter = t.sum(py)?;
    let num = t.affine(inter, T::lit(2.0), T::lit(DICE_SMOOTH))?;
    let sp = t.sum(p)?;
    let sy = t.sum(target)?;
    let den = t.add(sp, sy)?;
    let den = t.add_scalar(den, T::lit(DICE_SMOOTH))?;
    let r = t.div(num, den)?;
    t.affine(r, -T::one(), T::one())
}

/// IoU between `logits ≥ 0` and `target ≥ 0.5`; an empty union counts as a perfect match.
pub fn hard_iou<T: Real>(logits: &Grid<T>, target: &Grid<T>) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&l, &y) in logits.data().iter().zip(target.data()) {
        let (a, b) = (l >= T::zero(), y >= T::lit(0.5));
        inter += (a && b) as usize;
        uni += (a || b) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Focal + dice + squared error of the predicted IoU (length-1 node) against the realized IoU.
pub fn seg_loss_on_tape<T: Real>(t: &mut Tape<T>, logits: Var, iou_pred: Var, target: Var) -> Result<SegLossNodes> {
    if t.shape(logits) != t.shape(target) {
        return Err(Error::InvalidArgument(format!(
            "logits {:?} vs target {:?}",
            t.shape(logits),
            t.shape(target)
        )));
    }
    let focal = focal_on_tape(t, logits, target)?;
    let dice = dice_on_tape(t, logits, target)?;
    let real = hard_iou(t.value(logits)?, t.value(target)?);
    let real = t.scalar(T::lit(real));
    let diff = t.sub(iou_pred, real)?;
    let sq = t.mul(diff, diff)?;
    let iou = t.sum(sq)?;
    let total = t.add(focal, dice)?;
    let total = t.add(total, iou)?;
    Ok(SegLossNodes { focal, dice, iou, total })
}

/// Plain segmentation loss for logits `[H, W]`, a predicted IoU and a target mask.
pub fn seg_loss<T: Real>(logits: &Grid<T>, iou_pred: T, target: &Grid<T>) -> Result<SegLoss> {
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let y = t.constant(target.clone());
    let i = t.scalar(iou_pred);
    let n = seg_loss_on_tape(&mut t, l, i, y)?;
    Ok(SegLoss {
        focal: t.item(n.focal)?.as_f64(),
        dice: t.item(n.dice)?.as_f64(),
        iou: t.item(n.iou)?.as_f64(),
        total: t.item(n.total)?.as_f64(),
    })
}

/// Soft error map `p(1−y) + (1−p)y`.
pub fn soft_error_on_tape<T: Real>(t: &mut Tape<T>, p: Var, target: Var) -> Result<Var> {
    let py = t.mul(p, target)?;
    let s = t.add(p, target)?;
    let two = t.scale(py, T::lit(2.0))?;
    t.sub(s, two)
}

/// Calibration loss with split gradient routing:
/// `mean[e·exp(−sg u) + sg e·exp(−u) + (1−e)·exp(sg u) + (1−sg e)·exp(u)]`.
/// The error map only receives gradient through the terms where `u` is frozen and vice versa.
pub fn calibration_loss_on_tape<T: Real>(t: &mut Tape<T>, e: Var, u: Var) -> Result<Var> {
    let su = t.stop_grad(u)?;
    let se = t.stop_grad(e)?;
    let neg_su = t.neg(su)?;
    let a = t.exp(neg_su)?;
    let a = t.mul(e, a)?;
    let neg_u = t.neg(u)?;
    let b = t.exp(neg_u)?;
    let b = t.mul(se, b)?;
    let c = t.exp(su)?;
    let ne = t.affine(e, -T::one(), T::one())?;
    let c = t.mul(ne, c)?;
    let d = t.exp(u)?;
    let nse = t.affine(se, -T::one(), T::one())?;
    let d = t.mul(nse, d)?;
    let s = t.add(a, b)?;
    let s = t.add(s, c)?;
    let s = t.add(s, d)?;
    t.mean(s)
}

fn check_unit<T: Real>(name: &str, g: &Grid<T>) -> Result<()> {
    if g.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
    }
    Ok(())
}

/// Value of the calibration loss; `e` and `u` must share a shape and lie in `[0, 1]`.
pub fn calibration_loss<T: Real>(e: &Grid<T>, u: &Grid<T>) -> Result<T> {
    if e.shape() != u.shape() {
        return Err(Error::InvalidArgument(format!("e {:?} vs u {:?}", e.shape(), u.shape())));
    }
    check_unit("error map", e)?;
    check_unit("uncertainty", u)?;
    let two = T::lit(2.0);
    let s: T = e
        .data()
        .iter()
        .zip(u.data())
        .map(|(&e, &u)| two * (e * (-u).exp() + (T::one() - e) * u.exp()))
        .sum();
    Ok(s / T::lit(e.len() as f64))
}

/// Routed gradients `(∂L/∂e, ∂L/∂u)` of the calibration loss.
pub fn calibration_grads<T: Real>(e: &Grid<T>, u: &Grid<T>) -> Result<(Grid<T>, Grid<T>)> {
    calibration_loss(e, u)?;
    let n = T::lit(e.len() as f64);
    let ge = e.zip_map(u, |_, u| ((-u).exp() - u.exp()) / n)?;
    let gu = e.zip_map(u, |e, u| (-e * (-u).exp() + (T::one() - e) * u.exp()) / n)?;
    Ok((ge, gu))
}

/// Summed Weibull–Gamma KL over every pixel posterior element and the token posteriors
/// of all hypotheses.
pub fn kl_total_on_tape<T: Real>(t: &mut Tape<T>, hn: &HeadNodes, prior: GammaPrior) -> Result<Var> {
    let kz = weibull::kl_on_tape(t, hn.lam_z, hn.kap_z, prior)?;
    let mut total = t.sum(kz)?;
    for tk in &hn.tokens {
        for (l, k) in [(tk.fg_lam, tk.fg_kap), (tk.bg_lam, tk.bg_kap)] {
            let kl = weibull::kl_on_tape(t, l, k, prior)?;
            let s = t.sum(kl)?;
            total = t.add(total, s)?;
        }
    }
    Ok(total)
}
