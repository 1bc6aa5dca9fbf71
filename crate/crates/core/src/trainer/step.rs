//! The combined clean + adversarial tape for one prompted object.

use rand::Rng;

use super::{StepRecord, TrainConfig, DEFORM_PREFIX, HEAD_PREFIX, STYLE_PREFIX};
use crate::deform::{self, OffsetField};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::head::{self, HeadNodes, PosteriorNoise};
use crate::losses::{self, SegLossNodes};
use crate::params::{Binding, ParamStore, VarMap};
use crate::prompt::{prompt_channels, token_weights};
use crate::style::{self, GraphThresholds, ObjectStyle, StyleBounds, StyleVariant};
use crate::synth::Scene;
use crate::tape::{Tape, Var};
use crate::weibull::GammaPrior;

/// Scene plus the index of the prompted object.
#[derive(Clone, Copy, Debug)]
pub struct StepTarget<'a> {
    pub scene: &'a Scene,
    pub object: usize,
}

/// Which branches a tape contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub adversarial: bool,
}

/// Nodes of the adversarial branch.
#[derive(Clone, Debug)]
pub struct AdvNodes {
    pub seg: SegLossNodes,
    pub kl: Var,
    pub cal: Var,
    pub loss: Var,
    /// Perturbed image `[3, H, W]`.
    pub image: Var,
    /// Warped (soft) target mask `[H, W]`.
    pub gt: Var,
    /// All warped masks `[K, H, W]`, when deformation is on.
    pub masks: Option<Var>,
    pub error: Var,
    pub unc: Var,
    pub styled_objects: Vec<Grid>,
    pub style_sources: Vec<ObjectStyle>,
    pub style_targets: Vec<(Var, Var)>,
    pub offsets: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StepNodes {
    pub seg_clean: SegLossNodes,
    pub kl_clean: Var,
    pub clean_loss: Var,
    pub adv: Option<AdvNodes>,
    pub total: Var,
    pub clean_head: HeadNodes,
}

impl StepNodes {
    pub fn branches(&self) -> Branches {
        Branches { adversarial: self.adv.is_some() }
    }

    /// Loss values read off an evaluated tape.
    pub fn record(&self, t: &Tape) -> Result<StepRecord> {
        let mut r = StepRecord {
            seg_clean: t.item(self.seg_clean.total)?,
            focal: t.item(self.seg_clean.focal)?,
            dice: t.item(self.seg_clean.dice)?,
            iou: t.item(self.seg_clean.iou)?,
            kl_clean: t.item(self.kl_clean)?,
            total: t.item(self.total)?,
            ..Default::default()
        };
        if let Some(a) = &self.adv {
            r.seg_adv = t.item(a.seg.total)?;
            r.kl_adv = t.item(a.kl)?;
            r.cal = t.item(a.cal)?;
        }
        Ok(r)
    }
}

fn mean_of(t: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = t.add(acc, v)?;
    }
    t.scale(acc, 1.0 / vs.len() as f64)
}

/// Segmentation loss of one reparameterized logit draw per hypothesis, averaged over hypotheses.
fn sampled_seg_loss(t: &mut Tape, hn: &HeadNodes, gt: Var, rng: &mut impl Rng) -> Result<SegLossNodes> {
    let s = t.shape(hn.lam_z).to_vec();
    let mut parts = Vec::with_capacity(hn.tokens.len());
    for k in 0..hn.tokens.len() {
        let noise = PosteriorNoise::draw(rng, s[0], s[1], s[2]);
        let logits = head::sampled_logits_on_tape(t, hn, k, &noise)?;
        let iou = t.slice(hn.iou, k, 1)?;
        parts.push(losses::seg_loss_on_tape(t, logits, iou, gt)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let pick = |f: fn(&SegLossNodes) -> Var| parts.iter().map(f).collect::<Vec<_>>();
    Ok(SegLossNodes {
        focal: mean_of(t, &pick(|p| p.focal))?,
        dice: mean_of(t, &pick(|p| p.dice))?,
        iou: mean_of(t, &pick(|p| p.iou))?,
        total: mean_of(t, &pick(|p| p.total))?,
    })
}

fn best_hypothesis(t: &Tape, hn: &HeadNodes) -> Result<usize> {
    let v = t.value(hn.iou)?.data();
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Objects re-styled under a variant, as `(masks, source statistics)`.
fn style_objects(scene: &Scene, object: usize, variant: StyleVariant) -> Result<(Vec<Grid>, Vec<ObjectStyle>)> {
    let mut masks: Vec<Grid> = match variant {
        StyleVariant::Single => vec![scene.masks[object].clone()],
        _ => scene.masks.clone(),
    };
    if variant == StyleVariant::MultiBg {
        let bg = scene.foreground().map(|v| 1.0 - v);
        if bg.sum() > 0.0 {
            masks.push(bg);
        }
    }
    let sources = masks.iter().map(|m| style::extract_object_style(&scene.image, m)).collect::<Result<_>>()?;
    Ok((masks, sources))
}

/// Builds and evaluates the tape for one prompted object:
/// `L_clean + γ_eff·(L_seg^adv + β_eff·s·KL^adv + λ·L_cal)` with `L_clean = L_seg + β_eff·s·KL`.
/// The adversarial branch is only built when `gamma_eff > 0`.
pub fn build_step(
    params: &ParamStore,
    cfg: &TrainConfig,
    target: &StepTarget,
    beta_eff: f64,
    gamma_eff: f64,
    grl_scale: f64,
    rng: &mut impl Rng,
) -> Result<(Tape, StepNodes)> {
    let scene = target.scene;
    let k = target.object;
    if k >= scene.masks.len() || k >= scene.clicks.len() {
        return Err(Error::InvalidArgument(format!("scene {} has no object {k}", scene.seed)));
    }
    let (h, w) = scene.dims();
    let clicks = &scene.clicks[k];
    let prior = GammaPrior::default();
    let kl_w = beta_eff * cfg.kl_element_scale;
    let mut t = Tape::new();
    let mut vars = params.bind(&mut t, "enc.", Binding::Frozen)?;
    vars.extend(params.bind(&mut t, HEAD_PREFIX, Binding::Trainable)?);

    let img = t.constant(scene.image.clone());
    let enc = head::encode(&mut t, &vars, img)?;
    let pc = t.constant(prompt_channels(clicks, h, w));
    let feats = t.concat(&[enc, pc])?;
    let tw = token_weights(clicks, h, w);
    let hn = head::head_on_tape(&mut t, &cfg.head, &vars, feats, &tw)?;
    let gt = t.constant(scene.masks[k].clone());
    let seg_clean = sampled_seg_loss(&mut t, &hn, gt, rng)?;
    let kl_clean = losses::kl_total_on_tape(&mut t, &hn, prior)?;
    let kl_term = t.scale(kl_clean, kl_w)?;
    let clean_loss = t.add(seg_clean.total, kl_term)?;

    if gamma_eff <= 0.0 {
        let nodes = StepNodes { seg_clean, kl_clean, clean_loss, adv: None, total: clean_loss, clean_head: hn };
        return Ok((t, nodes));
    }
    let adv = adversarial_branch(&mut t, params, cfg, target, &vars, enc, pc, &tw, kl_w, grl_scale, rng)?;
    let scaled = t.scale(adv.loss, gamma_eff)?;
    let total = t.add(clean_loss, scaled)?;
    Ok((t, StepNodes { seg_clean, kl_clean, clean_loss, adv: Some(adv), total, clean_head: hn }))
}

#[allow(clippy::too_many_arguments)]
fn adversarial_branch(
    t: &mut Tape,
    params: &ParamStore,
    cfg: &TrainConfig,
    target: &StepTarget,
    vars: &VarMap,
    enc: Var,
    pc: Var,
    tw: &Grid,
    kl_w: f64,
    grl_scale: f64,
    rng: &mut impl Rng,
) -> Result<AdvNodes> {
    let scene = target.scene;
    let k = target.object;
    let (h, w) = scene.dims();
    let img = t.constant(scene.image.clone());

    // style: residuals from pooled clean features, reversed before bounding
    let (mut styled, mut styled_objects, mut style_sources, mut style_targets) = (img, vec![], vec![], vec![]);
    if cfg.style {
        let svars = params.bind(t, STYLE_PREFIX, Binding::Trainable)?;
        let (masks, sources) = style_objects(scene, k, cfg.style_variant)?;
        let pooled: Vec<Var> = masks
            .iter()
            .map(|m| {
                let p = t.masked_mean(enc, m)?;
                let n = t.shape(p)[0];
                t.reshape(p, &[n, 1])
            })
            .collect::<Result<_>>()?;
        let mut residuals: Vec<Var> = pooled.iter().map(|&p| style::residual_mlp_on_tape(t, &svars, p)).collect::<Result<_>>()?;
        if cfg.style_variant == StyleVariant::Gcn {
            let feats: Vec<Vec<f64>> = pooled.iter().map(|&p| Ok(t.value(p)?.data().to_vec())).collect::<Result<_>>()?;
            let graph = style::build_object_graph(&masks, &feats, &GraphThresholds::for_image(h, w))?;
            residuals = style::gcn_refine_on_tape(t, &svars, &graph, &residuals, &pooled)?;
        }
        let bounds = StyleBounds::uniform(cfg.eps_style);
        for (r, src) in residuals.iter().zip(&sources) {
            let rev = t.grl(*r, grl_scale)?;
            style_targets.push(style::bound_style_on_tape(t, src, rev, &bounds)?);
        }
        styled = style::adain_on_tape(t, &scene.image, &masks, &sources, &style_targets)?;
        styled_objects = masks;
        style_sources = sources;
    }

    // deformation: per-object fields from clean features, composited, warping image and masks together
    let (mut adv_img, mut gt, mut warped, mut offsets) = (styled, t.constant(scene.masks[k].clone()), None, None);
    if cfg.deform {
        let mut dvars = params.bind(t, "deform.frozen.", Binding::Frozen)?;
        dvars.extend(params.bind(t, DEFORM_PREFIX, Binding::Trainable)?);
        let eps_px = deform::eps_to_pixels(cfg.eps_deform, h, w);
        let fields: Vec<Var> = scene
            .masks
            .iter()
            .map(|m| {
                let raw = deform::raw_offsets_on_tape(t, &dvars, enc, m)?;
                let rev = t.grl(raw, grl_scale)?;
                deform::bound_offsets_on_tape(t, rev, eps_px)
            })
            .collect::<Result<_>>()?;
        let delta = deform::composite_on_tape(t, &fields, &scene.masks, eps_px)?;
        let (wi, wm) = deform::warp_pair_on_tape(t, styled, &scene.masks, delta)?;
        let g = t.slice(wm, k, 1)?;
        gt = t.reshape(g, &[h, w])?;
        adv_img = wi;
        warped = Some(wm);
        offsets = Some(delta);
    }

    let enc_adv = head::encode(t, vars, adv_img)?;
    let feats_adv = t.concat(&[enc_adv, pc])?;
    let hn = head::head_on_tape(t, &cfg.head, vars, feats_adv, tw)?;
    let seg = sampled_seg_loss(t, &hn, gt, rng)?;
    let kl = losses::kl_total_on_tape(t, &hn, GammaPrior::default())?;
    let kb = best_hypothesis(t, &hn)?;

    // error map from a head copy that cannot learn from it
    let mut fvars = vars.clone();
    fvars.extend(params.bind(t, HEAD_PREFIX, Binding::Frozen)?);
    let hf = head::head_on_tape(t, &cfg.head, &fvars, feats_adv, tw)?;
    let (mf, vf) = head::analytic_on_tape(t, &hf, kb)?;
    let (_, pf, uf) = head::probit_on_tape(t, mf, vf)?;
    let error = losses::soft_error_on_tape(t, pf, gt)?;
    let unc = if cfg.cal_to_head {
        let (m, v) = head::analytic_on_tape(t, &hn, kb)?;
        head::probit_on_tape(t, m, v)?.2
    } else {
        uf
    };
    let cal = losses::calibration_loss_on_tape(t, error, unc)?;

    let kl_term = t.scale(kl, kl_w)?;
    let cal_term = t.scale(cal, cfg.lambda_cal)?;
    let loss = t.add(seg.total, kl_term)?;
    let loss = t.add(loss, cal_term)?;
    Ok(AdvNodes {
        seg,
        kl,
        cal,
        loss,
        image: adv_img,
        gt,
        masks: warped,
        error,
        unc,
        styled_objects,
        style_sources,
        style_targets,
        offsets,
    })
}

/// Adversarial views produced by the current attackers for one prompted object.
#[derive(Clone, Debug)]
pub struct AttackPreview {
    pub before: Grid,
    pub after: Grid,
    pub masks_after: Vec<Grid>,
    /// `(source, adversarial)` statistics per re-styled region.
    pub styles: Vec<(ObjectStyle, ObjectStyle)>,
    pub offsets: Option<OffsetField>,
}

fn col3(g: &Grid) -> [f64; 3] {
    [g.data()[0], g.data()[1], g.data()[2]]
}

pub fn attack_preview(params: &ParamStore, cfg: &TrainConfig, scene: &Scene, object: usize, rng: &mut impl Rng) -> Result<AttackPreview> {
    let target = StepTarget { scene, object };
    let (t, nodes) = build_step(params, cfg, &target, cfg.beta, 1.0, cfg.grl_scale, rng)?;
    let adv = nodes.adv.expect("adversarial branch built for γ > 0");
    let masks_after = match adv.masks {
        Some(m) => {
            let g = t.value(m)?;
            (0..scene.masks.len()).map(|j| g.channel(j)).collect()
        }
        None => scene.masks.clone(),
    };
    let styles = adv
        .style_sources
        .iter()
        .zip(&adv.style_targets)
        .map(|(src, &(mu, sigma))| Ok((*src, ObjectStyle { mu: col3(t.value(mu)?), sigma: col3(t.value(sigma)?) })))
        .collect::<Result<_>>()?;
    let eps_px = deform::eps_to_pixels(cfg.eps_deform, scene.dims().0, scene.dims().1);
    let offsets = adv.offsets.map(|o| Ok::<_, Error>(OffsetField { delta: t.value(o)?.clone(), eps: eps_px })).transpose()?;
    Ok(AttackPreview { before: scene.image.clone(), after: t.value(adv.image)?.clone(), masks_after, styles, offsets })
}
