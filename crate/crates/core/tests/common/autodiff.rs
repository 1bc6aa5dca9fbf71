//! Finite-difference checks of every primitive op and of the sg/GRL routing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruackit_core::tape::{grad_check, weighted_sum, BackwardOptions};
use ruackit_core::{Border, Grid, Tape, Var};

pub const POINTS: usize = 10;
pub const TOL: f64 = 1e-4;
pub const TOL_GRID_SAMPLE: f64 = 1e-3;

type Build = fn(&mut Tape, &[Var]) -> ruackit_core::Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    /// Shape and sampling range of every input leaf.
    pub inputs: Vec<(Vec<usize>, (f64, f64))>,
    pub build: Build,
    pub tol: f64,
}

fn case(name: &'static str, inputs: &[(&[usize], (f64, f64))], build: Build) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|(s, r)| (s.to_vec(), *r)).collect(), build, tol: TOL }
}

const V: &[usize] = &[2, 3];
const ANY: (f64, f64) = (-2.0, 2.0);
const POS: (f64, f64) = (0.3, 3.0);

pub fn cases() -> Vec<OpCase> {
    let mut v = vec![
        case("add", &[(V, ANY), (V, ANY)], |t, x| t.add(x[0], x[1])),
        case("sub", &[(V, ANY), (V, ANY)], |t, x| t.sub(x[0], x[1])),
        case("mul", &[(V, ANY), (V, ANY)], |t, x| t.mul(x[0], x[1])),
        case("div", &[(V, ANY), (V, POS)], |t, x| t.div(x[0], x[1])),
        case("neg", &[(V, ANY)], |t, x| t.neg(x[0])),
        case("exp", &[(V, ANY)], |t, x| t.exp(x[0])),
        case("log", &[(V, POS)], |t, x| t.log(x[0])),
        case("pow", &[(V, POS)], |t, x| t.powf(x[0], -1.7)),
        case("sigmoid", &[(V, ANY)], |t, x| t.sigmoid(x[0])),
        case("tanh", &[(V, ANY)], |t, x| t.tanh(x[0])),
        case("softplus", &[(V, ANY)], |t, x| t.softplus(x[0])),
        case("log_gamma", &[(V, (0.2, 6.0))], |t, x| t.ln_gamma(x[0])),
        case("sum", &[(V, ANY)], |t, x| {
            let s = t.sum(x[0])?;
            t.mul(s, s)
        }),
        case("mean", &[(V, ANY)], |t, x| {
            let s = t.mean(x[0])?;
            t.mul(s, s)
        }),
        case("masked_mean", &[(&[2, 3, 4], ANY)], |t, x| {
            let w = Grid::from_fn(&[3, 4], |i| (i % 3) as f64 * 0.5);
            t.masked_mean(x[0], &w)
        }),
        case("matmul", &[(&[2, 3], ANY), (&[3, 4], ANY)], |t, x| t.matmul(x[0], x[1])),
        case("conv3x3", &[(&[2, 4, 5], ANY), (&[3, 2, 3, 3], ANY), (&[3], ANY)], |t, x| {
            t.conv3x3(x[0], x[1], Some(x[2]))
        }),
        case("weibull", &[(V, POS), (V, (0.6, 4.0))], |t, x| {
            let u = Grid::from_fn(V, |i| 0.1 + 0.13 * i as f64);
            t.weibull_sample(x[0], x[1], &u)
        }),
    ];
    // offsets keep a fractional part in [0.2, 0.8] so probes never cross a bilinear kink
    let mut gs = case("grid_sample", &[(&[2, 4, 5], ANY), (&[2, 4, 5], (0.2, 0.8))], |t, x| {
        let off = t.affine(x[1], 1.0, -1.0)?;
        t.grid_sample(x[0], off, Border::Zero)
    });
    gs.tol = TOL_GRID_SAMPLE;
    v.push(gs);
    v
}

/// Worst relative error over `POINTS` random points.
pub fn worst_error(c: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let mut t = Tape::new();
        let xs: Vec<Var> = c
            .inputs
            .iter()
            .enumerate()
            .map(|(i, (s, (lo, hi)))| {
                let g = Grid::from_fn(s, |_| rng.gen_range(*lo..*hi));
                t.param(&format!("x{i}"), g).unwrap()
            })
            .collect();
        let y = (c.build)(&mut t, &xs).unwrap();
        let loss = weighted_sum(&mut t, y, rng.gen()).unwrap();
        worst = worst.max(grad_check(&mut t, loss, &[], 1e-6).unwrap());
    }
    worst
}

/// Relative error of the grid-sample offset gradient on a smooth ramp image, clamp border.
pub fn grid_sample_ramp_error() -> f64 {
    let mut t = Tape::new();
    let img = t.constant(Grid::from_fn(&[1, 6, 6], |i| 0.3 * (i / 6) as f64 + 0.1 * (i % 6) as f64));
    let off = t.param("off", Grid::from_fn(&[2, 6, 6], |i| 0.25 + 0.4 * ((i * 7) % 11) as f64 / 11.0)).unwrap();
    let y = t.grid_sample(img, off, Border::Clamp).unwrap();
    let y2 = t.mul(y, y).unwrap();
    let loss = weighted_sum(&mut t, y2, 5).unwrap();
    grad_check(&mut t, loss, &[], 1e-6).unwrap()
}

/// `(ste_relu forward at −1, its gradient there)`: expected `(0, 1)`.
pub fn ste_relu_contract() -> (f64, f64) {
    let mut t = Tape::new();
    let x = t.param("x", Grid::scalar(-1.0)).unwrap();
    let y = t.ste_relu(x).unwrap();
    (t.item(y).unwrap(), t.grad(y).unwrap().by_name("x").unwrap().item())
}

/// Exact sign tests: sg blocks its input, GRL gradient = −scale × identity-GRL gradient.
pub fn sg_grl_exact() -> bool {
    let mut t = Tape::new();
    let x = t.param("x", Grid::from_vec(&[3], vec![2.0, -1.0, 0.5]).unwrap()).unwrap();
    let s = t.stop_grad(x).unwrap();
    let y = t.mul(s, x).unwrap();
    let y = t.sum(y).unwrap();
    let sg_ok = t.grad(y).unwrap().by_name("x").unwrap().data() == [2.0, -1.0, 0.5];

    let mut ok = sg_ok;
    for scale in [0.0, 1.0, 2.0, 0.37] {
        let mut t = Tape::new();
        let x = t.param("x", Grid::from_vec(&[3], vec![2.0, -1.0, 0.5]).unwrap()).unwrap();
        let r = t.grl(x, scale).unwrap();
        let y = t.tanh(r).unwrap();
        let y = t.mul(y, r).unwrap();
        let y = t.sum(y).unwrap();
        let g = t.grad(y).unwrap().by_name("x").unwrap();
        let id = t.backward_with(&[(y, Grid::scalar(1.0))], BackwardOptions { grl_as_identity: true }).unwrap();
        let id = id.by_name("x").unwrap();
        ok &= g.data().iter().zip(id.data()).all(|(a, b)| *a == -scale * b);
    }
    ok
}

/// Max deviation of routed calibration-loss gradients from finite differences in which the
/// stop-gradient copies are held fixed.
pub fn calibration_routing_error() -> f64 {
    use ruackit_core::losses::calibration_loss_on_tape;
    // direct form with separate live and frozen arguments
    let l = |e: f64, u: f64, ef: f64, uf: f64| e * (-uf).exp() + ef * (-u).exp() + (1.0 - e) * uf.exp() + (1.0 - ef) * u.exp();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for &(e0, u0) in &[(0.3, 0.7), (0.0, 0.0), (1.0, 0.2), (0.55, 0.95), (0.1, 0.05)] {
        let mut t = Tape::new();
        let e = t.param("e", Grid::scalar(e0)).unwrap();
        let u = t.param("u", Grid::scalar(u0)).unwrap();
        let loss = calibration_loss_on_tape(&mut t, e, u).unwrap();
        let g = t.grad(loss).unwrap();
        let fd_u = (l(e0, u0 + h, e0, u0) - l(e0, u0 - h, e0, u0)) / (2.0 * h);
        let fd_e = (l(e0 + h, u0, e0, u0) - l(e0 - h, u0, e0, u0)) / (2.0 * h);
        worst = worst.max((g.by_name("u").unwrap().item() - fd_u).abs());
        worst = worst.max((g.by_name("e").unwrap().item() - fd_e).abs());
    }
    worst
}
