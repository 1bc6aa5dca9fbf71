//! Bayesian mask head: Weibull posteriors over pixel features and mask-token weights,
//! with analytic (moment-propagation) and Monte Carlo uncertainty.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{init_weight, Binding, ParamStore, VarMap};
use crate::prompt::{prompt_channels, token_weights, Click};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::weibull::{self, WeibullParams, KAPPA_MAX, KAPPA_MIN};

pub const IMAGE_CHANNELS: usize = 3;
pub const PROMPT_CHANNELS: usize = 2;
/// Keeps Weibull scales strictly positive when softplus underflows.
pub const LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Posterior feature dimension C′.
    pub feat_dim: usize,
    /// Number of parallel mask hypotheses K.
    pub hypotheses: usize,
    pub token_hidden: usize,
    /// Extra channels produced by the frozen image encoder.
    pub enc_channels: usize,
    /// Initial Weibull shape for pixel and token posteriors.
    pub kappa_init: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { feat_dim: 8, hypotheses: 1, token_hidden: 16, enc_channels: 5, kappa_init: 2.0 }
    }
}

impl HeadConfig {
    /// Channels fed to the head: image, encoder features and two prompt maps.
    pub fn in_channels(&self) -> usize {
        IMAGE_CHANNELS + self.enc_channels + PROMPT_CHANNELS
    }

    /// Channels of the frozen encoder output (image plus encoder features).
    pub fn enc_out(&self) -> usize {
        IMAGE_CHANNELS + self.enc_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.hypotheses == 0 || self.hypotheses > 4 || self.token_hidden == 0 {
            return Err(Error::InvalidArgument(format!("invalid head config {self:?}")));
        }
        if !(KAPPA_MIN..=KAPPA_MAX).contains(&self.kappa_init) {
            return Err(Error::InvalidArgument("kappa_init outside [0.5, 10]".into()));
        }
        Ok(())
    }
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Fresh encoder (`enc.*`, frozen) and head (`head.*`) parameters.
pub fn init_params<T: Real>(cfg: &HeadConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, cin, e, hid, k) = (cfg.feat_dim, cfg.in_channels(), cfg.enc_channels, cfg.token_hidden, cfg.hypotheses);
    let kap0 = T::lit(softplus_inv(cfg.kappa_init));
    let mut p = ParamStore::new();
    p.insert("enc.w", init_weight(&mut rng, &[e, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9, 2.0));
    p.insert("enc.b", Grid::zeros(&[e]));
    p.insert("head.conv1.w", init_weight(&mut rng, &[c, cin, 3, 3], cin * 9, 1.4));
    p.insert("head.conv1.b", Grid::full(&[c], T::lit(0.1)));
    p.insert("head.conv2.w", init_weight(&mut rng, &[c, c, 3, 3], c * 9, 1.4));
    p.insert("head.conv2.b", Grid::full(&[c], T::lit(0.1)));
    p.insert("head.lam.w", init_weight(&mut rng, &[c, c, 3, 3], c * 9, 0.5));
    p.insert("head.lam.b", Grid::zeros(&[c]));
    p.insert("head.kap1.w", init_weight(&mut rng, &[c, cin, 3, 3], cin * 9, 1.0));
    p.insert("head.kap1.b", Grid::zeros(&[c]));
    p.insert("head.kap2.w", Grid::zeros(&[c, c, 3, 3]));
    p.insert("head.kap2.b", Grid::full(&[c], kap0));
    p.insert("head.tok.embed", init_weight(&mut rng, &[k, c], 1, 0.1));
    p.insert("head.tok1.w", init_weight(&mut rng, &[hid, c], c, 1.4));
    p.insert("head.tok1.b", Grid::full(&[hid, 1], T::lit(0.1)));
    p.insert("head.tok2.w", init_weight(&mut rng, &[4 * c, hid], hid, 0.3));
    let mut b2 = Grid::zeros(&[4 * c, 1]);
    for i in 0..c {
        // blocks: fg λ, fg κ, bg λ, bg κ
        b2.data_mut()[c + i] = kap0;
        b2.data_mut()[3 * c + i] = kap0;
    }
    p.insert("head.tok2.b", b2);
    p.insert("head.bias", Grid::zeros(&[k]));
    p.insert("head.iou.w", init_weight(&mut rng, &[k, c], c, 0.5));
    p.insert("head.iou.b", Grid::zeros(&[k, 1]));
    p
}

/// Frozen image encoder: `[image ; tanh(conv(image))]`.
pub fn encode<T: Real>(t: &mut Tape<T>, vars: &VarMap, image: Var) -> Result<Var> {
    let c = t.conv3x3(image, vars.get("enc.w")?, Some(vars.get("enc.b")?))?;
    let e = t.tanh(c)?;
    t.concat(&[image, e])
}

/// Encoder output plus the two prompt distance channels.
pub fn features<T: Real>(t: &mut Tape<T>, vars: &VarMap, image: Var, clicks: &[Click]) -> Result<Var> {
    let enc = encode(t, vars, image)?;
    let s = t.shape(image).to_vec();
    let pc = t.constant(prompt_channels(clicks, s[1], s[2]));
    t.concat(&[enc, pc])
}

/// Tape nodes of one mask-token posterior; each `[C′, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenNodes {
    pub fg_lam: Var,
    pub fg_kap: Var,
    pub bg_lam: Var,
    pub bg_kap: Var,
}

/// Tape nodes produced by [`head_on_tape`].
#[derive(Clone, Debug)]
pub struct HeadNodes {
    /// Post-STE-ReLU pixel features `[C′, H, W]`.
    pub hidden: Var,
    pub lam_z: Var,
    pub kap_z: Var,
    pub tokens: Vec<TokenNodes>,
    /// Per-hypothesis logit bias, `[K]`.
    pub bias: Var,
    /// Predicted IoU per hypothesis, `[K, 1]`.
    pub iou: Var,
}

fn positive<T: Real>(t: &mut Tape<T>, raw: Var) -> Result<Var> {
    let s = t.softplus(raw)?;
    t.add_scalar(s, T::lit(LAMBDA_FLOOR))
}

fn shape_param<T: Real>(t: &mut Tape<T>, raw: Var) -> Result<Var> {
    let s = t.softplus(raw)?;
    t.clamp(s, T::lit(KAPPA_MIN), T::lit(KAPPA_MAX))
}

/// Pixel posterior, token posteriors, bias and IoU estimate from head features.
pub fn head_on_tape<T: Real>(
    t: &mut Tape<T>,
    cfg: &HeadConfig,
    vars: &VarMap,
    feats: Var,
    token_w: &Grid<T>,
) -> Result<HeadNodes> {
    let c = cfg.feat_dim;
    let a1 = t.conv3x3(feats, vars.get("head.conv1.w")?, Some(vars.get("head.conv1.b")?))?;
    let h1 = t.ste_relu(a1)?;
    let a2 = t.conv3x3(h1, vars.get("head.conv2.w")?, Some(vars.get("head.conv2.b")?))?;
    let hidden = t.ste_relu(a2)?;
    let lr = t.conv3x3(hidden, vars.get("head.lam.w")?, Some(vars.get("head.lam.b")?))?;
    let lam_z = positive(t, lr)?;
    let k1 = t.conv3x3(feats, vars.get("head.kap1.w")?, Some(vars.get("head.kap1.b")?))?;
    let k1 = t.tanh(k1)?;
    let k2 = t.conv3x3(k1, vars.get("head.kap2.w")?, Some(vars.get("head.kap2.b")?))?;
    let kap_z = shape_param(t, k2)?;

    let pooled = t.masked_mean(hidden, token_w)?;
    let pooled = t.reshape(pooled, &[c, 1])?;
    let embed = vars.get("head.tok.embed")?;
    let mut tokens = Vec::with_capacity(cfg.hypotheses);
    for k in 0..cfg.hypotheses {
        let e = t.slice(embed, k, 1)?;
        let e = t.reshape(e, &[c, 1])?;
        let tok = t.add(pooled, e)?;
        let z1 = t.matmul(vars.get("head.tok1.w")?, tok)?;
        let z1 = t.add(z1, vars.get("head.tok1.b")?)?;
        let hid = t.ste_relu(z1)?;
        let z2 = t.matmul(vars.get("head.tok2.w")?, hid)?;
        let out = t.add(z2, vars.get("head.tok2.b")?)?;
        let blocks: Vec<Var> = (0..4).map(|i| t.slice(out, i * c, c)).collect::<Result<_>>()?;
        tokens.push(TokenNodes {
            fg_lam: positive(t, blocks[0])?,
            fg_kap: shape_param(t, blocks[1])?,
            bg_lam: positive(t, blocks[2])?,
            bg_kap: shape_param(t, blocks[3])?,
        });
    }
    let (_, h, w) = {
        let s = t.shape(hidden);
        (s[0], s[1], s[2])
    };
    let mp = t.masked_mean(hidden, &Grid::ones(&[h, w]))?;
    let mp = t.reshape(mp, &[c, 1])?;
    let iz = t.matmul(vars.get("head.iou.w")?, mp)?;
    let iz = t.add(iz, vars.get("head.iou.b")?)?;
    let iou = t.sigmoid(iz)?;
    Ok(HeadNodes { hidden, lam_z, kap_z, tokens, bias: vars.get("head.bias")?, iou })
}

/// Analytic logit mean and simplified variance `[H, W]` for hypothesis `k`.
pub fn analytic_on_tape<T: Real>(t: &mut Tape<T>, hn: &HeadNodes, k: usize) -> Result<(Var, Var)> {
    let s = t.shape(hn.lam_z).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let tk = hn.tokens[k];
    let (ez, vz) = weibull::moments_on_tape(t, hn.lam_z, hn.kap_z)?;
    let (efg, vfg) = weibull::moments_on_tape(t, tk.fg_lam, tk.fg_kap)?;
    let (ebg, vbg) = weibull::moments_on_tape(t, tk.bg_lam, tk.bg_kap)?;
    let d = t.sub(efg, ebg)?;
    let d = t.reshape(d, &[1, c])?;
    let ez = t.reshape(ez, &[c, h * w])?;
    let m = t.matmul(d, ez)?;
    let b = t.slice(hn.bias, k, 1)?;
    let m = t.add(m, b)?;
    let m = t.reshape(m, &[h, w])?;
    let vw = t.add(vfg, vbg)?;
    let vw = t.reshape(vw, &[1, c])?;
    let vz = t.reshape(vz, &[c, h * w])?;
    let v = t.matmul(vw, vz)?;
    let v = t.reshape(v, &[h, w])?;
    Ok((m, v))
}

/// Probit-adjusted logit `a = m/√(1+πv/8)`, probability `σ(a)` and normalized entropy `u`.
pub fn probit_on_tape<T: Real>(t: &mut Tape<T>, m: Var, v: Var) -> Result<(Var, Var, Var)> {
    let inner = t.affine(v, T::PI() / T::lit(8.0), T::one())?;
    let ks = t.powf(inner, T::lit(-0.5))?;
    let a = t.mul(ks, m)?;
    let p = t.sigmoid(a)?;
    let u = entropy_from_logit_on_tape(t, a, p)?;
    Ok((a, p, u))
}

/// `H(σ(a))/ln 2 = [p·softplus(−a) + (1−p)·softplus(a)]/ln 2`, finite for any `a`.
pub fn entropy_from_logit_on_tape<T: Real>(t: &mut Tape<T>, a: Var, p: Var) -> Result<Var> {
    let na = t.neg(a)?;
    let sp_neg = t.softplus(na)?;
    let sp_pos = t.softplus(a)?;
    let q = t.affine(p, -T::one(), T::one())?;
    let l = t.mul(p, sp_neg)?;
    let r = t.mul(q, sp_pos)?;
    let s = t.add(l, r)?;
    t.scale(s, T::LN_2().recip())
}

/// Uniform noise for one reparameterized draw of every posterior element.
#[derive(Clone, Debug)]
pub struct PosteriorNoise<T: Real> {
    pub z: Grid<T>,
    pub fg: Grid<T>,
    pub bg: Grid<T>,
}

impl<T: Real> PosteriorNoise<T> {
    pub fn draw(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Self {
        let mut u = |shape: &[usize]| Grid::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(Open01)));
        Self { z: u(&[c, h, w]), fg: u(&[c, 1]), bg: u(&[c, 1]) }
    }
}

/// Logits from one reparameterized draw of pixel features and token weights.
pub fn sampled_logits_on_tape<T: Real>(t: &mut Tape<T>, hn: &HeadNodes, k: usize, noise: &PosteriorNoise<T>) -> Result<Var> {
    let s = t.shape(hn.lam_z).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let tk = hn.tokens[k];
    let z = t.weibull_sample(hn.lam_z, hn.kap_z, &noise.z)?;
    let wfg = t.weibull_sample(tk.fg_lam, tk.fg_kap, &noise.fg)?;
    let wbg = t.weibull_sample(tk.bg_lam, tk.bg_kap, &noise.bg)?;
    let d = t.sub(wfg, wbg)?;
    let d = t.reshape(d, &[1, c])?;
    let z = t.reshape(z, &[c, h * w])?;
    let l = t.matmul(d, z)?;
    let b = t.slice(hn.bias, k, 1)?;
    let l = t.add(l, b)?;
    t.reshape(l, &[h, w])
}

/// Per-pixel Weibull posterior over features.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPosterior<T: Real = f64> {
    /// `[C′, H, W]`, positive.
    pub lam: Grid<T>,
    /// `[C′, H, W]`, within `[0.5, 10]`.
    pub kap: Grid<T>,
}

/// Posterior over one hypothesis' foreground/background weight vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPosterior<T: Real = f64> {
    pub fg_lam: Vec<T>,
    pub fg_kap: Vec<T>,
    pub bg_lam: Vec<T>,
    pub bg_kap: Vec<T>,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTokenPosterior<T: Real = f64> {
    pub entries: Vec<TokenPosterior<T>>,
}

/// Logit mean `m` and variance `v`, both `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitStats<T: Real = f64> {
    pub m: Grid<T>,
    pub v: Grid<T>,
}

/// Everything the head predicts for one prompted image.
#[derive(Clone, Debug)]
pub struct Posterior<T: Real = f64> {
    pub pixel: PixelPosterior<T>,
    pub tokens: MaskTokenPosterior<T>,
    pub iou: Vec<T>,
    /// Post-STE-ReLU pixel features `[C′, H, W]`.
    pub hidden: Grid<T>,
}

impl<T: Real> Posterior<T> {
    /// Hypothesis with the highest predicted IoU (ties → lowest index).
    pub fn best_hypothesis(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.iou.iter().enumerate() {
            if v > self.iou[best] {
                best = i;
            }
        }
        best
    }
}

fn column<T: Real>(t: &Tape<T>, v: Var) -> Result<Vec<T>> {
    Ok(t.value(v)?.data().to_vec())
}

/// Runs the frozen encoder and the head without gradients.
pub fn predict<T: Real>(cfg: &HeadConfig, params: &ParamStore<T>, image: &Grid<T>, clicks: &[Click]) -> Result<Posterior<T>> {
    let mut t = Tape::new();
    let mut vars = params.bind(&mut t, "enc.", Binding::Frozen)?;
    vars.extend(params.bind(&mut t, "head.", Binding::Frozen)?);
    let img = t.constant(image.clone());
    let feats = features(&mut t, &vars, img, clicks)?;
    let (_, h, w) = image.chw();
    let hn = head_on_tape(&mut t, cfg, &vars, feats, &token_weights(clicks, h, w))?;
    predict_from_nodes(&t, &hn)
}

/// Reads posterior values off an evaluated tape.
pub fn predict_from_nodes<T: Real>(t: &Tape<T>, hn: &HeadNodes) -> Result<Posterior<T>> {
    let bias = column(t, hn.bias)?;
    let entries = hn
        .tokens
        .iter()
        .zip(&bias)
        .map(|(tk, &b)| {
            Ok(TokenPosterior {
                fg_lam: column(t, tk.fg_lam)?,
                fg_kap: column(t, tk.fg_kap)?,
                bg_lam: column(t, tk.bg_lam)?,
                bg_kap: column(t, tk.bg_kap)?,
                bias: b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Posterior {
        pixel: PixelPosterior { lam: t.value(hn.lam_z)?.clone(), kap: t.value(hn.kap_z)?.clone() },
        tokens: MaskTokenPosterior { entries },
        iou: column(t, hn.iou)?,
        hidden: t.value(hn.hidden)?.clone(),
    })
}

/// Pixel posterior alone, from head input features `[C_in, H, W]`.
pub fn predict_pixel_posterior<T: Real>(cfg: &HeadConfig, params: &ParamStore<T>, feats: &Grid<T>) -> Result<PixelPosterior<T>> {
    let mut t = Tape::new();
    let vars = params.bind(&mut t, "head.", Binding::Frozen)?;
    let f = t.constant(feats.clone());
    let (_, h, w) = feats.chw();
    let hn = head_on_tape(&mut t, cfg, &vars, f, &Grid::ones(&[h, w]))?;
    Ok(PixelPosterior { lam: t.value(hn.lam_z)?.clone(), kap: t.value(hn.kap_z)?.clone() })
}

/// Token posterior for hypothesis `k` from a pooled token vector of length C′.
pub fn predict_mask_posterior<T: Real>(cfg: &HeadConfig, params: &ParamStore<T>, token: &[T], k: usize) -> Result<TokenPosterior<T>> {
    let c = cfg.feat_dim;
    if token.len() != c || k >= cfg.hypotheses {
        return Err(Error::InvalidArgument(format!("token length {} / hypothesis {k}", token.len())));
    }
    let mut t = Tape::new();
    let vars = params.bind(&mut t, "head.", Binding::Frozen)?;
    // a one-pixel feature map whose pooled value is exactly the token
    let hidden = t.constant(Grid::from_vec(&[c, 1, 1], token.to_vec())?);
    let pooled = t.masked_mean(hidden, &Grid::ones(&[1, 1]))?;
    let pooled = t.reshape(pooled, &[c, 1])?;
    let e = t.slice(vars.get("head.tok.embed")?, k, 1)?;
    let e = t.reshape(e, &[c, 1])?;
    let tok = t.add(pooled, e)?;
    let z1 = t.matmul(vars.get("head.tok1.w")?, tok)?;
    let z1 = t.add(z1, vars.get("head.tok1.b")?)?;
    let hid = t.ste_relu(z1)?;
    let z2 = t.matmul(vars.get("head.tok2.w")?, hid)?;
    let out = t.add(z2, vars.get("head.tok2.b")?)?;
    let mut blocks = Vec::new();
    for i in 0..4 {
        let b = t.slice(out, i * c, c)?;
        blocks.push(if i % 2 == 0 { positive(&mut t, b)? } else { shape_param(&mut t, b)? });
    }
    let bias = params.get("head.bias")?.data()[k];
    Ok(TokenPosterior {
        fg_lam: column(&t, blocks[0])?,
        fg_kap: column(&t, blocks[1])?,
        bg_lam: column(&t, blocks[2])?,
        bg_kap: column(&t, blocks[3])?,
        bias,
    })
}

fn moments<T: Real>(lam: &[T], kap: &[T]) -> (Vec<T>, Vec<T>) {
    lam.iter()
        .zip(kap)
        .map(|(&l, &k)| {
            let p = WeibullParams { lambda: l, kappa: k };
            (weibull::weibull_mean(p), weibull::weibull_variance(p))
        })
        .unzip()
}

fn check_dims<T: Real>(px: &PixelPosterior<T>, tk: &TokenPosterior<T>) -> Result<()> {
    let (c, _, _) = px.lam.chw();
    if px.kap.shape() != px.lam.shape() || [tk.fg_lam.len(), tk.fg_kap.len(), tk.bg_lam.len(), tk.bg_kap.len()] != [c; 4] {
        return Err(Error::InvalidArgument("posterior dimensions disagree".into()));
    }
    Ok(())
}

fn token<T: Real>(mk: &MaskTokenPosterior<T>, k: usize) -> Result<&TokenPosterior<T>> {
    mk.entries.get(k).ok_or_else(|| Error::InvalidArgument(format!("no hypothesis {k}")))
}

/// First two moments of every posterior element entering one hypothesis' logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments<T: Real = f64> {
    /// `[C′, H, W]`.
    pub ez: Grid<T>,
    pub vz: Grid<T>,
    pub efg: Vec<T>,
    pub vfg: Vec<T>,
    pub ebg: Vec<T>,
    pub vbg: Vec<T>,
    pub bias: T,
}

impl<T: Real> PosteriorMoments<T> {
    pub fn from_posterior(px: &PixelPosterior<T>, mk: &MaskTokenPosterior<T>, k: usize) -> Result<Self> {
        let tk = token(mk, k)?;
        check_dims(px, tk)?;
        let (ez, vz) = moments(px.lam.data(), px.kap.data());
        let (efg, vfg) = moments(&tk.fg_lam, &tk.fg_kap);
        let (ebg, vbg) = moments(&tk.bg_lam, &tk.bg_kap);
        let s = px.lam.shape();
        Ok(Self { ez: Grid::from_vec(s, ez)?, vz: Grid::from_vec(s, vz)?, efg, vfg, ebg, vbg, bias: tk.bias })
    }

    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.ez.chw();
        if self.vz.shape() != self.ez.shape() || [self.efg.len(), self.vfg.len(), self.ebg.len(), self.vbg.len()] != [c; 4] {
            return Err(Error::InvalidArgument("moment dimensions disagree".into()));
        }
        Ok((c, h, w))
    }

    /// `m = Σ_c E[z_c](E[w_fg,c] − E[w_bg,c]) + b`, `v = Σ_c Var[z_c](Var[w_fg,c] + Var[w_bg,c])`.
    pub fn logit_stats(&self) -> Result<LogitStats<T>> {
        let (c, h, w) = self.dims()?;
        let n = h * w;
        let mut m = vec![self.bias; n];
        let mut v = vec![T::zero(); n];
        for ci in 0..c {
            let d = self.efg[ci] - self.ebg[ci];
            let s = self.vfg[ci] + self.vbg[ci];
            let (ez, vz) = (&self.ez.data()[ci * n..(ci + 1) * n], &self.vz.data()[ci * n..(ci + 1) * n]);
            for i in 0..n {
                m[i] += ez[i] * d;
                v[i] += vz[i] * s;
            }
        }
        Ok(LogitStats { m: Grid::from_vec(&[h, w], m)?, v: Grid::from_vec(&[h, w], v)? })
    }

    /// Exact logit variance under independence:
    /// `Σ_c Var[z](Var[w_fg]+Var[w_bg]) + Var[z](E[w_fg]−E[w_bg])² + (Var[w_fg]+Var[w_bg])E[z]²`.
    pub fn full_variance(&self) -> Result<Grid<T>> {
        let (c, h, w) = self.dims()?;
        let n = h * w;
        let mut v = vec![T::zero(); n];
        for ci in 0..c {
            let d = self.efg[ci] - self.ebg[ci];
            let s = self.vfg[ci] + self.vbg[ci];
            for i in 0..n {
                let (e, var) = (self.ez.data()[ci * n + i], self.vz.data()[ci * n + i]);
                v[i] += var * s + var * d * d + s * e * e;
            }
        }
        Grid::from_vec(&[h, w], v)
    }
}

/// Logit mean and first-order variance for hypothesis `k`.
pub fn logits_analytic<T: Real>(px: &PixelPosterior<T>, mk: &MaskTokenPosterior<T>, k: usize) -> Result<LogitStats<T>> {
    PosteriorMoments::from_posterior(px, mk, k)?.logit_stats()
}

/// Exact per-pixel logit variance for hypothesis `k`.
pub fn full_variance<T: Real>(px: &PixelPosterior<T>, mk: &MaskTokenPosterior<T>, k: usize) -> Result<Grid<T>> {
    PosteriorMoments::from_posterior(px, mk, k)?.full_variance()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Normalized (base-2) Bernoulli entropy of `σ(a)`, computed from the logit.
pub fn entropy_from_logit<T: Real>(a: T) -> T {
    let p = sigmoid(a);
    ((p * softplus(-a) + (T::one() - p) * softplus(a)) / T::LN_2()).min(T::one())
}

/// Normalized Bernoulli entropy of a probability, with `0·log 0 = 0`.
pub fn binary_entropy<T: Real>(p: T) -> T {
    let term = |q: T| if q > T::zero() { -q * q.log2() } else { T::zero() };
    (term(p) + term(T::one() - p)).min(T::one())
}

/// MacKay probit scaling `1/√(1 + πv/8)`.
pub fn probit_scale<T: Real>(v: T) -> T {
    (T::one() + T::PI() * v / T::lit(8.0)).sqrt().recip()
}

/// Per-pixel uncertainty in `[0, 1]` from logit statistics.
pub fn uncertainty_analytic<T: Real>(ls: &LogitStats<T>) -> Result<Grid<T>> {
    if ls.v.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::InvalidArgument("negative logit variance".into()));
    }
    ls.m.zip_map(&ls.v, |m, v| entropy_from_logit(probit_scale(v) * m))
}

/// Probit-adjusted probability `σ(m/√(1+πv/8))`.
pub fn prob_analytic<T: Real>(ls: &LogitStats<T>) -> Result<Grid<T>> {
    ls.m.zip_map(&ls.v, |m, v| sigmoid(probit_scale(v) * m))
}

/// Monte Carlo prediction.
#[derive(Clone, Debug)]
pub struct McOutput<T: Real = f64> {
    pub mean_prob: Grid<T>,
    /// Normalized Bernoulli entropy of `mean_prob`.
    pub unc: Grid<T>,
    /// Variance of the per-sample probabilities.
    pub prob_var: Grid<T>,
}

/// Averages `S` reparameterized draws of features and token weights.
pub fn forward_mc<T: Real>(px: &PixelPosterior<T>, mk: &MaskTokenPosterior<T>, k: usize, samples: usize, seed: u64) -> Result<McOutput<T>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one MC sample".into()));
    }
    let tk = token(mk, k)?;
    check_dims(px, tk)?;
    let (c, h, w) = px.lam.chw();
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |l: T, k: T, rng: &mut ChaCha8Rng| {
        let u: f64 = rng.sample(Open01);
        l * (-(-T::lit(u)).ln_1p()).powf(k.recip())
    };
    let mut sum = vec![T::zero(); n];
    let mut sum_sq = vec![T::zero(); n];
    let mut logit = vec![T::zero(); n];
    for _ in 0..samples {
        let d: Vec<T> = (0..c)
            .map(|ci| draw(tk.fg_lam[ci], tk.fg_kap[ci], &mut rng) - draw(tk.bg_lam[ci], tk.bg_kap[ci], &mut rng))
            .collect();
        logit.iter_mut().for_each(|v| *v = tk.bias);
        for (ci, &dc) in d.iter().enumerate() {
            let (lam, kap) = (&px.lam.data()[ci * n..(ci + 1) * n], &px.kap.data()[ci * n..(ci + 1) * n]);
            for i in 0..n {
                logit[i] += draw(lam[i], kap[i], &mut rng) * dc;
            }
        }
        for i in 0..n {
            let p = sigmoid(logit[i]);
            sum[i] += p;
            sum_sq[i] += p * p;
        }
    }
    let s = T::lit(samples as f64);
    let mean: Vec<T> = sum.iter().map(|&v| v / s).collect();
    let var: Vec<T> = sum_sq.iter().zip(&mean).map(|(&q, &m)| (q / s - m * m).max(T::zero())).collect();
    let unc = mean.iter().map(|&p| binary_entropy(p)).collect();
    Ok(McOutput {
        mean_prob: Grid::from_vec(&[h, w], mean)?,
        unc: Grid::from_vec(&[h, w], unc)?,
        prob_var: Grid::from_vec(&[h, w], var)?,
    })
}

/// Prediction mode for [`head_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Analytic,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Output of [`head_forward`] for the selected hypothesis.
#[derive(Clone, Debug)]
pub struct HeadOutput<T: Real = f64> {
    /// Analytic logit mean; the predicted mask is `logits ≥ 0`.
    pub logits: Grid<T>,
    pub prob: Grid<T>,
    pub unc: Grid<T>,
    pub iou: Vec<T>,
    pub hypothesis: usize,
    pub posterior: Posterior<T>,
}

/// Full prediction: mask logits from the analytic mean, uncertainty from the chosen mode.
pub fn head_forward<T: Real>(cfg: &HeadConfig, params: &ParamStore<T>, image: &Grid<T>, clicks: &[Click], mode: Mode) -> Result<HeadOutput<T>> {
    let post = predict(cfg, params, image, clicks)?;
    let k = post.best_hypothesis();
    let ls = logits_analytic(&post.pixel, &post.tokens, k)?;
    let (prob, unc) = match mode {
        Mode::Analytic => (prob_analytic(&ls)?, uncertainty_analytic(&ls)?),
        Mode::MonteCarlo { samples, seed } => {
            let mc = forward_mc(&post.pixel, &post.tokens, k, samples, seed)?;
            (mc.mean_prob, mc.unc)
        }
    };
    Ok(HeadOutput { logits: ls.m, prob, unc, iou: post.iou.clone(), hypothesis: k, posterior: post })
}
