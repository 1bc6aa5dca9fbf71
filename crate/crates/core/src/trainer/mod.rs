//! Joint head/attacker training with gradient reversal, curriculum and AdamW.

mod optim;
mod step;

pub use optim::AdamW;
pub use step::{
    attack_preview, build_step, AttackPreview, Branches, StepNodes, StepTarget,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform;
use crate::error::{Error, Result};
use crate::head::{self, HeadConfig};
use crate::params::ParamStore;
use crate::style::{self, StyleVariant};
use crate::synth::Scene;

/// Hidden width of the style-residual MLP.
pub const STYLE_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub head: HeadConfig,
    /// KL weight β.
    pub beta: f64,
    /// Adversarial-branch weight γ.
    pub gamma: f64,
    pub lambda_cal: f64,
    /// Relative bound on style statistics.
    pub eps_style: f64,
    /// Displacement bound in normalized `[-1, 1]` grid units.
    pub eps_deform: f64,
    pub lr_head: f64,
    pub lr_attack_start: f64,
    pub lr_attack_end: f64,
    /// Multiplier on the head learning rate.
    pub lr_scale: f64,
    /// Multiplier on the attacker learning rates.
    pub lr_attack_scale: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Curriculum boundaries as fractions of `epochs`.
    pub p1: f64,
    pub p2: f64,
    /// Per-element factor applied to the summed KL on top of β.
    pub kl_element_scale: f64,
    pub grl_scale: f64,
    /// γ = 0 for the whole run.
    pub ue_only: bool,
    pub style: bool,
    pub style_variant: StyleVariant,
    pub deform: bool,
    /// Let the uncertainty channel of the calibration loss update the head.
    pub cal_to_head: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            beta: 0.05,
            gamma: 0.2,
            lambda_cal: 0.1,
            eps_style: 0.3,
            eps_deform: 0.15,
            lr_head: 1e-4,
            lr_attack_start: 1e-3,
            lr_attack_end: 1e-4,
            lr_scale: 30.0,
            lr_attack_scale: 1.0,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 20,
            batch_size: 4,
            p1: 0.2,
            p2: 0.3,
            kl_element_scale: 1e-6,
            grl_scale: 1.0,
            ue_only: false,
            style: true,
            style_variant: StyleVariant::Multi,
            deform: true,
            cal_to_head: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        let weights = [self.beta, self.gamma, self.lambda_cal, self.eps_style, self.eps_deform, self.kl_element_scale, self.weight_decay];
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("loss weights and bounds must be finite and ≥ 0".into()));
        }
        if !(0.0 < self.p1 && self.p1 < self.p2 && self.p2 < 1.0) {
            return Err(Error::InvalidArgument(format!("need 0 < p1 < p2 < 1, got {} / {}", self.p1, self.p2)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.eps_style < 1.0) {
            return Err(Error::InvalidArgument("eps_style must be < 1".into()));
        }
        let lrs = [self.lr_head, self.lr_attack_start, self.lr_attack_end, self.lr_scale, self.lr_attack_scale];
        if lrs.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("learning rates must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Segmentation,
    Bayesian,
    Adversarial,
}

/// Phase and effective `(β, γ)` for an epoch.
pub fn curriculum(epoch: usize, cfg: &TrainConfig) -> (Phase, f64, f64) {
    let e = epoch as f64;
    let n = cfg.epochs as f64;
    let gamma = if cfg.ue_only { 0.0 } else { cfg.gamma };
    if e < cfg.p1 * n {
        (Phase::Segmentation, 0.0, 0.0)
    } else if e < cfg.p2 * n {
        (Phase::Bayesian, cfg.beta, 0.0)
    } else {
        (Phase::Adversarial, cfg.beta, gamma)
    }
}

/// GRL scale at a global step (constant).
pub fn grl_scale_schedule(_step: u64, cfg: &TrainConfig) -> f64 {
    cfg.grl_scale
}

/// Attacker learning rate, decayed linearly from start to end over all steps.
pub fn attack_lr(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let frac = if total_steps <= 1 { 0.0 } else { (step as f64 / (total_steps - 1) as f64).min(1.0) };
    cfg.lr_attack_scale * (cfg.lr_attack_start + (cfg.lr_attack_end - cfg.lr_attack_start) * frac)
}

/// Parameter families and whether they are trained.
pub const HEAD_PREFIX: &str = "head.";
pub const STYLE_PREFIX: &str = "style.";
pub const DEFORM_PREFIX: &str = "deform.off.";

pub fn is_trainable(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX) || name.starts_with(STYLE_PREFIX) || name.starts_with(DEFORM_PREFIX)
}

pub fn is_attacker(name: &str) -> bool {
    name.starts_with(STYLE_PREFIX) || name.starts_with(DEFORM_PREFIX)
}

/// Encoder, head and both attackers, freshly initialized from `seed`.
pub fn init_all_params(cfg: &TrainConfig) -> ParamStore {
    let mut p = head::init_params(&cfg.head, cfg.seed);
    p.extend(style::init_params(cfg.head.enc_out(), STYLE_HIDDEN, cfg.seed));
    p.extend(deform::init_params(cfg.head.enc_out(), cfg.seed));
    p
}

/// One JSON-lines record per optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub phase: Option<Phase>,
    pub beta_eff: f64,
    pub gamma_eff: f64,
    pub lr_head: f64,
    pub lr_attack: f64,
    pub seg_clean: f64,
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
    pub kl_clean: f64,
    pub seg_adv: f64,
    pub kl_adv: f64,
    pub cal: f64,
    pub total: f64,
    pub grad_norm_head: f64,
    pub grad_norm_style: f64,
    pub grad_norm_deform: f64,
}

impl StepRecord {
    fn accumulate(&mut self, o: &StepRecord, w: f64) {
        self.seg_clean += w * o.seg_clean;
        self.focal += w * o.focal;
        self.dice += w * o.dice;
        self.iou += w * o.iou;
        self.kl_clean += w * o.kl_clean;
        self.seg_adv += w * o.seg_adv;
        self.kl_adv += w * o.kl_adv;
        self.cal += w * o.cal;
        self.total += w * o.total;
    }
}

pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    pub epoch: usize,
    pub log: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { params: init_all_params(cfg), opt: AdamW::new(cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay), step: 0, epoch: 0, log: Vec::new() }
    }
}

/// Target object of scene `index` in `epoch`.
pub fn target_object(epoch: usize, index: usize, scene: &Scene) -> usize {
    (epoch + index) % scene.masks.len()
}

fn grad_norm(g: &std::collections::BTreeMap<String, crate::Grid>, pred: impl Fn(&str) -> bool) -> f64 {
    g.iter()
        .filter(|(n, _)| pred(n))
        .flat_map(|(_, v)| v.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One optimizer step on a batch. Gradients are averaged over the batch; a non-finite
/// loss or gradient rejects the step and leaves `state` untouched.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(&Scene, usize)],
    cfg: &TrainConfig,
    epoch: usize,
    total_steps: u64,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (phase, beta_eff, gamma_eff) = curriculum(epoch, cfg);
    let grl = grl_scale_schedule(state.step, cfg);
    let mut rec = StepRecord {
        epoch,
        step: state.step,
        phase: Some(phase),
        beta_eff,
        gamma_eff,
        lr_head: cfg.lr_scale * cfg.lr_head,
        lr_attack: attack_lr(state.step, total_steps, cfg),
        ..Default::default()
    };
    let w = 1.0 / batch.len() as f64;
    let mut grads: std::collections::BTreeMap<String, crate::Grid> = std::collections::BTreeMap::new();
    for (i, &(scene, k)) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.step << 8) ^ (i as u64) ^ 0xa11ce);
        let target = StepTarget { scene, object: k };
        let (tape, nodes) = build_step(&state.params, cfg, &target, beta_eff, gamma_eff, grl, &mut rng)?;
        let part = nodes.record(&tape)?;
        if !part.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "step {} scene {}: seg {} kl {} seg_adv {} kl_adv {} cal {}",
                state.step, scene.seed, part.seg_clean, part.kl_clean, part.seg_adv, part.kl_adv, part.cal
            )));
        }
        rec.accumulate(&part, w);
        let g = tape.grad(nodes.total)?;
        for (name, gv) in g.named() {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += w * b;
                    }
                }
                None => {
                    grads.insert(name, gv.map(|v| w * v));
                }
            }
        }
    }
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("step {}: non-finite gradient", state.step)));
    }
    rec.grad_norm_head = grad_norm(&grads, |n| n.starts_with(HEAD_PREFIX));
    rec.grad_norm_style = grad_norm(&grads, |n| n.starts_with(STYLE_PREFIX));
    rec.grad_norm_deform = grad_norm(&grads, |n| n.starts_with(DEFORM_PREFIX));
    let attackers_live = gamma_eff > 0.0;
    state.opt.step(&mut state.params, &grads, |name| {
        if name.starts_with(HEAD_PREFIX) {
            Some(rec.lr_head)
        } else if is_attacker(name) && attackers_live {
            Some(rec.lr_attack)
        } else {
            None
        }
    })?;
    if !state.params.is_finite() {
        return Err(Error::NonFiniteLoss(format!("step {}: parameters became non-finite", state.step)));
    }
    state.step += 1;
    state.log.push(rec.clone());
    Ok(rec)
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub run_dir: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// Full training run over `scenes`: curriculum phases per epoch, scenes in a seeded
/// shuffled order, per-epoch checkpoints and a JSON-lines log when a run directory is given.
pub fn train(cfg: &TrainConfig, scenes: &[Scene], out: &TrainOutputs) -> Result<TrainState> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut state = TrainState::new(cfg);
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut log = match &out.run_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bde_0000);
    let mut last_phase = None;
    for epoch in 0..cfg.epochs {
        let (phase, _, _) = curriculum(epoch, cfg);
        if last_phase != Some(phase) {
            log::info!("epoch {epoch}: entering {phase:?} phase");
            last_phase = Some(phase);
        }
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Scene, usize)> = chunk.iter().map(|&i| (&scenes[i], target_object(epoch, i, &scenes[i]))).collect();
            let rec = train_step(&mut state, &batch, cfg, epoch, total)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        state.epoch = epoch + 1;
        if let Some(d) = &out.run_dir {
            state.params.save(checkpoint_dir(d, epoch))?;
        }
        let recent = &state.log[state.log.len() - steps_per_epoch as usize..];
        log::debug!(
            "epoch {epoch}: mean total loss {:.4}",
            recent.iter().map(|r| r.total).sum::<f64>() / recent.len() as f64
        );
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    if let Some(d) = &out.run_dir {
        state.params.save(d.join(FINAL_CHECKPOINT))?;
    }
    Ok(state)
}
