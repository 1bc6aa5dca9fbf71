//! Per-object adversarial style perturbation: masked RGB statistics, bounded residuals,
//! AdaIN re-styling and optional graph coordination across objects.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{init_weight, ParamStore, VarMap};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// Guard against division by a vanishing source deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const GCN_DIM: usize = 12;
pub const GCN_ALPHA: f64 = 0.1;
const RESIDUALS: usize = 9;
const LN_EPS: f64 = 1e-5;

/// Per-channel mean and population standard deviation inside a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

/// Raw, unbounded residual outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleResidual {
    pub d_mu: [f64; 3],
    pub d_sigma: [f64; 3],
    pub d_shift: [f64; 3],
}

impl StyleResidual {
    pub fn from_slice(v: &[f64]) -> Self {
        let mut r = Self::default();
        r.d_mu.copy_from_slice(&v[0..3]);
        r.d_sigma.copy_from_slice(&v[3..6]);
        r.d_shift.copy_from_slice(&v[6..9]);
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleBounds {
    pub eps_mu: f64,
    pub eps_sigma: f64,
    pub eps_shift: f64,
}

impl StyleBounds {
    pub fn uniform(eps: f64) -> Self {
        Self { eps_mu: eps, eps_sigma: eps, eps_shift: eps }
    }
}

/// Which objects are re-styled and whether a graph network coordinates them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleVariant {
    /// Only the prompted object.
    Single,
    /// Every object independently.
    #[default]
    Multi,
    /// Every object plus the background as an extra pseudo-object.
    MultiBg,
    /// Every object, residuals refined by a two-layer GCN.
    Gcn,
}

impl std::str::FromStr for StyleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            "multi_bg" => Ok(Self::MultiBg),
            "gcn" => Ok(Self::Gcn),
            _ => Err(Error::InvalidArgument(format!("unknown style variant `{s}`"))),
        }
    }
}

/// Masked RGB mean and population std of a `3×H×W` image.
pub fn extract_object_style<T: Real>(image: &Grid<T>, mask: &Grid<T>) -> Result<ObjectStyle> {
    let (c, h, w) = image.chw();
    if c != 3 || mask.len() != h * w {
        return Err(Error::InvalidArgument(format!("image {:?} / mask {:?}", image.shape(), mask.shape())));
    }
    let n = h * w;
    let sel: Vec<usize> = (0..n).filter(|&i| mask.data()[i] > T::lit(0.5)).collect();
    if sel.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut s = ObjectStyle { mu: [0.0; 3], sigma: [0.0; 3] };
    let cnt = sel.len() as f64;
    for ch in 0..3 {
        let plane = &image.data()[ch * n..(ch + 1) * n];
        let mean = sel.iter().map(|&i| plane[i].as_f64()).sum::<f64>() / cnt;
        let var = sel.iter().map(|&i| (plane[i].as_f64() - mean).powi(2)).sum::<f64>() / cnt;
        s.mu[ch] = mean;
        s.sigma[ch] = var.sqrt();
    }
    Ok(s)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `μ̃ = μ(1 + ε_μ(2σ(Δμ)−1)) + ε_shift·tanh(Δshift)`, `σ̃ = σ(1 + ε_σ(2σ(Δσ)−1))`.
pub fn bound_style(style: &ObjectStyle, r: &StyleResidual, b: &StyleBounds) -> ObjectStyle {
    let mut out = *style;
    for c in 0..3 {
        out.mu[c] = style.mu[c] * (1.0 + b.eps_mu * (2.0 * sig(r.d_mu[c]) - 1.0)) + b.eps_shift * r.d_shift[c].tanh();
        out.sigma[c] = (style.sigma[c] * (1.0 + b.eps_sigma * (2.0 * sig(r.d_sigma[c]) - 1.0))).max(0.0);
    }
    out
}

fn check_disjoint<T: Real>(masks: &[Grid<T>]) -> Result<()> {
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let overlap = masks[i]
                .data()
                .iter()
                .zip(masks[j].data())
                .any(|(&a, &b)| a > T::lit(0.5) && b > T::lit(0.5));
            if overlap {
                return Err(Error::OverlappingMasks(i, j));
            }
        }
    }
    Ok(())
}

/// Re-styles each masked region to its target statistics; background pixels are untouched
/// and the result is clipped to `[0, 1]`.
pub fn adain_apply<T: Real>(image: &Grid<T>, masks: &[Grid<T>], targets: &[ObjectStyle]) -> Result<Grid<T>> {
    if masks.len() != targets.len() {
        return Err(Error::InvalidArgument("one target style per mask".into()));
    }
    check_disjoint(masks)?;
    let (_, h, w) = image.chw();
    let n = h * w;
    let mut out = image.clone();
    for (mask, tgt) in masks.iter().zip(targets) {
        let src = extract_object_style(image, mask)?;
        for c in 0..3 {
            let denom = src.sigma[c].max(SIGMA_FLOOR);
            for i in 0..n {
                if mask.data()[i] > T::lit(0.5) {
                    let v = image.data()[c * n + i].as_f64();
                    let y = tgt.sigma[c] * (v - src.mu[c]) / denom + tgt.mu[c];
                    out.data_mut()[c * n + i] = T::lit(y.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

/// Thresholds for object-graph edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphThresholds {
    pub tau_iou: f64,
    pub tau_sim: f64,
    /// Distance gate in pixels.
    pub tau_d: f64,
    /// Distance normalizer in pixels.
    pub d_max: f64,
}

impl GraphThresholds {
    /// `τ_IoU = 0.1`, `τ_sim = 0.5`, `τ_d = d_max = 0.25 ×` image diagonal.
    pub fn for_image(h: usize, w: usize) -> Self {
        let d = 0.25 * ((h * h + w * w) as f64).sqrt();
        Self { tau_iou: 0.1, tau_sim: 0.5, tau_d: d, d_max: d }
    }
}

/// Symmetric weighted adjacency with unit self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectGraph {
    pub n: usize,
    /// Row-major `n×n`.
    pub adj: Vec<f64>,
}

impl ObjectGraph {
    /// `D̃⁻¹Ã`.
    pub fn row_normalized(&self) -> Vec<f64> {
        let mut out = self.adj.clone();
        for i in 0..self.n {
            let d: f64 = self.adj[i * self.n..(i + 1) * self.n].iter().sum();
            for j in 0..self.n {
                out[i * self.n + j] /= d;
            }
        }
        out
    }
}

fn boundary<T: Real>(mask: &Grid<T>) -> Vec<(usize, usize)> {
    let (_, h, w) = mask.chw();
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.data()[y as usize * w + x as usize] > T::lit(0.5)
    };
    let mut b = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                b.push((y as usize, x as usize));
            }
        }
    }
    b
}

/// Minimum Euclidean distance between the boundary pixel sets of two masks.
pub fn boundary_distance<T: Real>(a: &Grid<T>, b: &Grid<T>) -> f64 {
    let (ba, bb) = (boundary(a), boundary(b));
    let mut best = f64::INFINITY;
    for &(y0, x0) in &ba {
        for &(y1, x1) in &bb {
            let d = ((y0 as f64 - y1 as f64).powi(2) + (x0 as f64 - x1 as f64).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

fn mask_iou<T: Real>(a: &Grid<T>, b: &Grid<T>) -> f64 {
    let half = T::lit(0.5);
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (p, q) = (x > half, y > half);
        inter += (p && q) as usize;
        uni += (p || q) as usize;
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Edge weight = IoU term + proximity term + semantic term, each gated by its threshold.
pub fn build_object_graph<T: Real>(masks: &[Grid<T>], feats: &[Vec<f64>], th: &GraphThresholds) -> Result<ObjectGraph> {
    let n = masks.len();
    if n == 0 || feats.len() != n {
        return Err(Error::InvalidArgument("graph needs one feature vector per object (≥ 1)".into()));
    }
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        adj[i * n + i] = 1.0;
        for j in i + 1..n {
            let iou = mask_iou(&masks[i], &masks[j]);
            let mut wgt = if iou > th.tau_iou { iou } else { 0.0 };
            let d = boundary_distance(&masks[i], &masks[j]);
            if d < th.tau_d {
                wgt += (1.0 - d / th.d_max).max(0.0);
            }
            let cs = cosine(&feats[i], &feats[j]);
            if cs > th.tau_sim {
                wgt += cs;
            }
            adj[i * n + j] = wgt;
            adj[j * n + i] = wgt;
        }
    }
    Ok(ObjectGraph { n, adj })
}

/// Trainable style-attack parameters (`style.*`). The output layer and the GCN weights
/// start at zero so the attack begins as the identity.
pub fn init_params<T: Real>(feat_channels: usize, hidden: usize, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5717_e000);
    let mut p = ParamStore::new();
    p.insert("style.mlp1.w", init_weight(&mut rng, &[hidden, feat_channels], feat_channels, 1.0));
    p.insert("style.mlp1.b", Grid::zeros(&[hidden, 1]));
    p.insert("style.mlp2.w", Grid::zeros(&[RESIDUALS, hidden]));
    p.insert("style.mlp2.b", Grid::zeros(&[RESIDUALS, 1]));
    p.insert("style.gcn.proj.w", init_weight(&mut rng, &[6, feat_channels], feat_channels, 1.0));
    p.insert("style.gcn.w1", Grid::zeros(&[GCN_DIM, GCN_DIM]));
    p.insert("style.gcn.ln.g", Grid::ones(&[1, GCN_DIM]));
    p.insert("style.gcn.ln.b", Grid::zeros(&[1, GCN_DIM]));
    p.insert("style.gcn.w2", Grid::zeros(&[GCN_DIM, GCN_DIM]));
    p
}

/// Raw residuals `[9, 1]` from a pooled feature vector `[C, 1]` (no gradient reversal).
pub fn residual_mlp_on_tape<T: Real>(t: &mut Tape<T>, vars: &VarMap, pooled: Var) -> Result<Var> {
    let h = t.matmul(vars.get("style.mlp1.w")?, pooled)?;
    let h = t.add(h, vars.get("style.mlp1.b")?)?;
    let h = t.tanh(h)?;
    let o = t.matmul(vars.get("style.mlp2.w")?, h)?;
    t.add(o, vars.get("style.mlp2.b")?)
}

fn row_broadcast<T: Real>(t: &mut Tape<T>, col: Var, width: usize) -> Result<Var> {
    let ones = t.constant(Grid::ones(&[1, width]));
    t.matmul(col, ones)
}

/// Per-row layer normalization of `[N, D]` with learned gain/bias `[1, D]`.
fn layer_norm<T: Real>(t: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let (n, d) = (t.shape(x)[0], t.shape(x)[1]);
    let avg = t.constant(Grid::full(&[d, 1], T::lit(1.0 / d as f64)));
    let mean = t.matmul(x, avg)?;
    let mean_b = row_broadcast(t, mean, d)?;
    let xc = t.sub(x, mean_b)?;
    let sq = t.mul(xc, xc)?;
    let var = t.matmul(sq, avg)?;
    let var = t.add_scalar(var, T::lit(LN_EPS))?;
    let inv = t.powf(var, T::lit(-0.5))?;
    let inv_b = row_broadcast(t, inv, d)?;
    let xn = t.mul(xc, inv_b)?;
    let ones_n = t.constant(Grid::ones(&[n, 1]));
    let g = t.matmul(ones_n, gain)?;
    let b = t.matmul(ones_n, bias)?;
    let y = t.mul(xn, g)?;
    t.add(y, b)
}

/// Two-layer graph refinement of the `(Δμ, Δσ)` part of each residual; the shift part
/// passes through. `residuals[k]` is `[9, 1]`, `pooled[k]` is `[C, 1]`.
pub fn gcn_refine_on_tape<T: Real>(
    t: &mut Tape<T>,
    vars: &VarMap,
    graph: &ObjectGraph,
    residuals: &[Var],
    pooled: &[Var],
) -> Result<Vec<Var>> {
    let n = residuals.len();
    if graph.n != n || pooled.len() != n {
        return Err(Error::InvalidArgument(format!("graph has {} nodes, got {n} residuals", graph.n)));
    }
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let r6 = t.slice(residuals[k], 0, 6)?;
        let proj = t.matmul(vars.get("style.gcn.proj.w")?, pooled[k])?;
        let node = t.concat(&[r6, proj])?;
        rows.push(t.reshape(node, &[1, GCN_DIM])?);
    }
    let h0 = t.concat(&rows)?;
    let a = t.constant(Grid::from_vec(&[n, n], graph.row_normalized().iter().map(|&v| T::lit(v)).collect())?);
    let m1 = t.matmul(a, h0)?;
    let m1 = t.matmul(m1, vars.get("style.gcn.w1")?)?;
    let m1 = layer_norm(t, m1, vars.get("style.gcn.ln.g")?, vars.get("style.gcn.ln.b")?)?;
    let h1 = t.relu(m1)?;
    let m2 = t.matmul(a, h1)?;
    let h2 = t.matmul(m2, vars.get("style.gcn.w2")?)?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let row = t.slice(h2, k, 1)?;
        let row = t.reshape(row, &[GCN_DIM, 1])?;
        let upd = t.slice(row, 0, 6)?;
        let upd = t.scale(upd, T::lit(GCN_ALPHA))?;
        let r6 = t.slice(residuals[k], 0, 6)?;
        let refined = t.add(r6, upd)?;
        let shift = t.slice(residuals[k], 6, 3)?;
        out.push(t.concat(&[refined, shift])?);
    }
    Ok(out)
}

/// Bounded target statistics `(μ̃, σ̃)`, each `[3, 1]`, from residuals `[9, 1]`.
pub fn bound_style_on_tape<T: Real>(t: &mut Tape<T>, style: &ObjectStyle, r: Var, b: &StyleBounds) -> Result<(Var, Var)> {
    let col = |v: [f64; 3]| Grid::from_vec(&[3, 1], v.iter().map(|&x| T::lit(x)).collect()).expect("3-vector");
    let rm = t.slice(r, 0, 3)?;
    let rs = t.slice(r, 3, 3)?;
    let rsh = t.slice(r, 6, 3)?;
    let sm = t.sigmoid(rm)?;
    let fm = t.affine(sm, T::lit(2.0 * b.eps_mu), T::lit(1.0 - b.eps_mu))?;
    let mu0 = t.constant(col(style.mu));
    let mu = t.mul(fm, mu0)?;
    let th = t.tanh(rsh)?;
    let shift = t.scale(th, T::lit(b.eps_shift))?;
    let mu = t.add(mu, shift)?;
    let ss = t.sigmoid(rs)?;
    let fs = t.affine(ss, T::lit(2.0 * b.eps_sigma), T::lit(1.0 - b.eps_sigma))?;
    let sg0 = t.constant(col(style.sigma));
    let sigma = t.mul(fs, sg0)?;
    Ok((mu, sigma))
}

/// Differentiable composite `I·(1−ΣM) + Σ_k M_k ⊙ AdaIN_k(I)`, clipped to `[0, 1]`.
/// `targets[k] = (μ̃_k, σ̃_k)` as `[3, 1]` nodes.
pub fn adain_on_tape<T: Real>(
    t: &mut Tape<T>,
    image: &Grid<T>,
    masks: &[Grid<T>],
    sources: &[ObjectStyle],
    targets: &[(Var, Var)],
) -> Result<Var> {
    check_disjoint(masks)?;
    let (_, h, w) = image.chw();
    let n = h * w;
    let mut keep = vec![T::one(); n];
    let mut acc: Option<Var> = None;
    for ((mask, src), &(mu, sigma)) in masks.iter().zip(sources).zip(targets) {
        let mut normalized = Grid::zeros(&[3, h, w]);
        for c in 0..3 {
            let denom = src.sigma[c].max(SIGMA_FLOOR);
            for i in 0..n {
                let v = image.data()[c * n + i].as_f64();
                normalized.data_mut()[c * n + i] = T::lit((v - src.mu[c]) / denom);
            }
        }
        for (k, &m) in keep.iter_mut().zip(mask.data()) {
            *k -= m;
        }
        let nz = t.constant(normalized);
        let sig_b = row_broadcast(t, sigma, n)?;
        let sig_b = t.reshape(sig_b, &[3, h, w])?;
        let mu_b = row_broadcast(t, mu, n)?;
        let mu_b = t.reshape(mu_b, &[3, h, w])?;
        let styled = t.mul(sig_b, nz)?;
        let styled = t.add(styled, mu_b)?;
        let m3 = t.constant(mask.repeat_channels(3));
        let part = t.mul(styled, m3)?;
        acc = Some(match acc {
            None => part,
            Some(a) => t.add(a, part)?,
        });
    }
    let keep = Grid::from_vec(&[h, w], keep)?.repeat_channels(3);
    let bg = t.constant(image.zip_map(&keep, |a, b| a * b)?);
    let out = match acc {
        None => bg,
        Some(a) => t.add(a, bg)?,
    };
    t.clamp(out, T::zero(), T::one())
}
