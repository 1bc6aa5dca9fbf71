//! Reverse-mode differentiation over [`Grid`] values.
//!
//! A [`Tape`] records nodes in creation order, so it is topologically sorted by
//! construction. Nodes whose inputs all have values are evaluated eagerly;
//! [`Tape::forward_eval`] rebinds named leaves and replays every node.

mod check;
pub mod kernels;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::special;

pub use check::{grad_check, weighted_sum};
pub use kernels::Border;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Input(String),
    Param,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    PowConst(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    SteRelu(usize),
    Relu(usize),
    LnGamma(usize),
    Sum(usize),
    Mean(usize),
    MaskedMean(usize, Grid<T>),
    MatMul(usize, usize),
    Conv3x3 { x: usize, w: usize, b: Option<usize> },
    GridSample { img: usize, off: usize, border: Border },
    Weibull { lam: usize, kap: usize, noise: Grid<T> },
    StopGrad(usize),
    Grl(usize, T),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Clamp { x: usize, lo: T, hi: T },
    Affine { x: usize, scale: T, shift: T },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::PowConst(..) => "pow",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::SteRelu(_) => "ste_relu",
            Op::Relu(_) => "relu",
            Op::LnGamma(_) => "ln_gamma",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaskedMean(..) => "masked_mean",
            Op::MatMul(..) => "matmul",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::GridSample { .. } => "grid_sample",
            Op::Weibull { .. } => "weibull_sample",
            Op::StopGrad(_) => "stop_grad",
            Op::Grl(..) => "grl",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input(_) | Op::Param | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::PowConst(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::SteRelu(a)
            | Op::Relu(a)
            | Op::LnGamma(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaskedMean(a, _)
            | Op::StopGrad(a)
            | Op::Grl(a, _)
            | Op::Reshape(a)
            | Op::Slice { x: a, .. }
            | Op::Clamp { x: a, .. }
            | Op::Affine { x: a, .. } => vec![*a],
            Op::Conv3x3 { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GridSample { img, off, .. } => vec![*img, *off],
            Op::Weibull { lam, kap, .. } => vec![*lam, *kap],
            Op::Concat(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Option<Grid<T>>,
    needs_grad: bool,
}

/// Options for [`Tape::backward_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Treat gradient-reversal nodes as identity (used to verify their sign).
    pub grl_as_identity: bool,
}

/// Recorded computation over grids.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<String, usize>,
    outputs: BTreeMap<String, usize>,
}

/// Gradients produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Grads<T: Real = f64> {
    by_node: Vec<Option<Grid<T>>>,
    leaf_names: Vec<(String, usize)>,
    leaf_shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Grid<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named leaf; a zero grid when no gradient reached it.
    pub fn by_name(&self, name: &str) -> Option<Grid<T>> {
        let i = self.leaf_names.iter().position(|(n, _)| n == name)?;
        let (_, id) = &self.leaf_names[i];
        Some(self.by_node[*id].clone().unwrap_or_else(|| Grid::zeros(&self.leaf_shapes[i])))
    }

    /// Gradients for every named leaf (parameters and inputs).
    pub fn named(&self) -> BTreeMap<String, Grid<T>> {
        self.leaf_names
            .iter()
            .zip(&self.leaf_shapes)
            .map(|((n, id), s)| {
                (n.clone(), self.by_node[*id].clone().unwrap_or_else(|| Grid::zeros(s)))
            })
            .collect()
    }
}

fn elementwise_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let la: usize = a.iter().product();
    let lb: usize = b.iter().product();
    if a == b || lb == 1 {
        Some(a.to_vec())
    } else if la == 1 {
        Some(b.to_vec())
    } else {
        None
    }
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

/// Apply `f` element-wise with length-1 broadcasting on either side.
fn zip_broadcast<T: Real>(a: &Grid<T>, b: &Grid<T>, shape: &[usize], f: impl Fn(T, T) -> T) -> Grid<T> {
    let n: usize = shape.iter().product();
    let (da, db) = (a.data(), b.data());
    let data: Vec<T> = match (da.len(), db.len()) {
        (x, y) if x == y => da.iter().zip(db).map(|(&p, &q)| f(p, q)).collect(),
        (1, _) => db.iter().map(|&q| f(da[0], q)).collect(),
        _ => da.iter().map(|&p| f(p, db[0])).collect(),
    };
    debug_assert_eq!(data.len(), n);
    Grid::from_vec(shape, data).expect("broadcast shape")
}

/// Reduce a gradient to the (possibly length-1) shape of a broadcast operand.
fn unbroadcast<T: Real>(g: Vec<T>, shape: &[usize]) -> Grid<T> {
    let n: usize = shape.iter().product();
    if g.len() == n {
        Grid::from_vec(shape, g).expect("grad shape")
    } else {
        Grid::from_vec(shape, vec![g.iter().copied().sum()]).expect("grad shape")
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: HashMap::new(), outputs: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> Result<&Grid<T>> {
        self.nodes[v.0].value.as_ref().ok_or(Error::NotEvaluated(v.0))
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<T> {
        Ok(self.value(v)?.item())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).map(|&i| Var(i))
    }

    pub fn leaf_names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.leaves.iter().map(|(n, &i)| (i, n.clone())).collect();
        v.sort();
        v.into_iter().map(|(_, n)| n).collect()
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { node: self.nodes.len(), op, detail }
    }

    fn add_leaf(&mut self, name: &str, op: Op<T>, shape: Vec<usize>, value: Option<Grid<T>>) -> Result<Var> {
        if self.leaves.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, value, needs_grad: true });
        self.leaves.insert(name.to_string(), id);
        Ok(Var(id))
    }

    /// Unbound named input; bind it with [`Tape::forward_eval`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        Grid::<T>::from_vec(shape, vec![T::zero(); shape.iter().product()])?;
        self.add_leaf(name, Op::Input(name.to_string()), shape.to_vec(), None)
    }

    /// Named trainable leaf with a current value.
    pub fn param(&mut self, name: &str, value: Grid<T>) -> Result<Var> {
        let shape = value.shape().to_vec();
        self.add_leaf(name, Op::Param, shape, Some(value))
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&mut self, value: Grid<T>) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node { op: Op::Const, shape, value: Some(value), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Grid::scalar(v))
    }

    /// Records `name` as a named output returned by [`Tape::forward_eval`].
    pub fn mark_output(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v.0);
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> Result<Var> {
        let inputs = op.inputs();
        let needs_grad = !matches!(op, Op::StopGrad(_)) && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let ready = inputs.iter().all(|&i| self.nodes[i].value.is_some());
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, value: None, needs_grad });
        if ready {
            let v = self.compute(id)?;
            self.nodes[id].value = Some(v);
        }
        Ok(Var(id))
    }

    fn val(&self, i: usize) -> &Grid<T> {
        self.nodes[i].value.as_ref().expect("input evaluated before consumer")
    }

    fn compute(&self, id: usize) -> Result<Grid<T>> {
        let node = &self.nodes[id];
        let shape = node.shape.as_slice();
        let map = |a: usize, f: &dyn Fn(T) -> T| self.val(a).map(f);
        let out = match &node.op {
            Op::Input(name) => return Err(Error::UnboundInput(name.clone())),
            Op::Param | Op::Const => return Err(Error::NotEvaluated(id)),
            Op::Add(a, b) => zip_broadcast(self.val(*a), self.val(*b), shape, |p, q| p + q),
            Op::Sub(a, b) => zip_broadcast(self.val(*a), self.val(*b), shape, |p, q| p - q),
            Op::Mul(a, b) => zip_broadcast(self.val(*a), self.val(*b), shape, |p, q| p * q),
            Op::Div(a, b) => zip_broadcast(self.val(*a), self.val(*b), shape, |p, q| p / q),
            Op::Neg(a) => map(*a, &|x| -x),
            Op::Exp(a) => map(*a, &|x| x.exp()),
            Op::Log(a) => map(*a, &|x| x.ln()),
            Op::PowConst(a, p) => {
                let p = *p;
                map(*a, &move |x| x.powf(p))
            }
            Op::Sigmoid(a) => map(*a, &sigmoid),
            Op::Tanh(a) => map(*a, &|x| x.tanh()),
            Op::Softplus(a) => map(*a, &softplus),
            Op::SteRelu(a) | Op::Relu(a) => map(*a, &|x| x.max(T::zero())),
            Op::LnGamma(a) => map(*a, &special::ln_gamma),
            Op::Sum(a) => Grid::scalar(self.val(*a).sum()),
            Op::Mean(a) => Grid::scalar(self.val(*a).mean()),
            Op::MaskedMean(a, wts) => {
                let x = self.val(*a);
                let (c, _, _) = x.chw();
                let n = wts.len();
                let total = wts.sum();
                let data = (0..c)
                    .map(|ci| {
                        let plane = &x.data()[ci * n..(ci + 1) * n];
                        plane.iter().zip(wts.data()).map(|(&v, &w)| v * w).sum::<T>() / total
                    })
                    .collect();
                Grid::from_vec(shape, data)?
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ga.shape()[0], ga.shape()[1], gb.shape()[1]);
                Grid::from_vec(shape, kernels::matmul(ga.data(), gb.data(), m, k, n))?
            }
            Op::Conv3x3 { x, w, b } => {
                let (gx, gw) = (self.val(*x), self.val(*w));
                let d = kernels::ConvDims {
                    cin: gx.shape()[0],
                    cout: gw.shape()[0],
                    h: gx.shape()[1],
                    w: gx.shape()[2],
                };
                let bias = b.map(|b| self.val(b).data());
                Grid::from_vec(shape, kernels::conv3x3(gx.data(), gw.data(), bias, &d))?
            }
            Op::GridSample { img, off, border } => {
                let gi = self.val(*img);
                let (c, h, w) = gi.chw();
                let data = kernels::grid_sample(gi.data(), self.val(*off).data(), c, h, w, *border);
                Grid::from_vec(shape, data)?
            }
            Op::Weibull { lam, kap, noise } => {
                let (l, k) = (self.val(*lam), self.val(*kap));
                let data = l
                    .data()
                    .iter()
                    .zip(k.data())
                    .zip(noise.data())
                    .map(|((&l, &k), &u)| l * (-(-u).ln_1p()).powf(T::one() / k))
                    .collect();
                Grid::from_vec(shape, data)?
            }
            Op::StopGrad(a) | Op::Grl(a, _) | Op::Reshape(a) => {
                Grid::from_vec(shape, self.val(*a).data().to_vec())?
            }
            Op::Concat(parts) => {
                let mut data = Vec::with_capacity(shape.iter().product());
                for &p in parts {
                    data.extend_from_slice(self.val(p).data());
                }
                Grid::from_vec(shape, data)?
            }
            Op::Slice { x, start } => {
                let g = self.val(*x);
                let inner: usize = g.shape()[1..].iter().product();
                let n: usize = shape.iter().product();
                Grid::from_vec(shape, g.data()[start * inner..start * inner + n].to_vec())?
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                map(*x, &move |v| v.max(lo).min(hi))
            }
            Op::Affine { x, scale, shift } => {
                let (s, t) = (*scale, *shift);
                map(*x, &move |v| v * s + t)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { node: id, op: node.op.name() });
        }
        Ok(out)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>) -> Result<Var> {
        let name = op.name();
        let shape = elementwise_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            self.shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)))
        })?;
        self.push(op, shape)
    }

    fn unary(&mut self, a: Var, op: Op<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    /// Element-wise `a + b`; either side may be a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a.0))
    }

    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(a, Op::PowConst(a.0, p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a.0))
    }

    /// Hard ReLU forward, identity backward.
    pub fn ste_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::SteRelu(a.0))
    }

    /// ReLU with the usual masked gradient.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LnGamma(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a.0), vec![1])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a.0), vec![1])
    }

    /// Weighted spatial mean per channel: `x` is `C×H×W` (or `H×W`), `weights` is `H×W`
    /// and non-negative; the result has shape `[C]`.
    pub fn masked_mean(&mut self, x: Var, weights: &Grid<T>) -> Result<Var> {
        let (c, h, w) = self.chw(x);
        if weights.len() != h * w || self.shape(x).len() < 2 {
            return Err(self.shape_err(
                "masked_mean",
                format!("x {:?}, weights {:?}", self.shape(x), weights.shape()),
            ));
        }
        if weights.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("masked_mean weights must be non-negative".into()));
        }
        if weights.sum() <= T::zero() {
            return Err(Error::EmptyMask);
        }
        self.push(Op::MaskedMean(x.0, weights.clone()), vec![c])
    }

    fn chw(&self, v: Var) -> (usize, usize, usize) {
        match self.shape(v) {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            s => (s[0], 1, s[1..].iter().product()),
        }
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        self.push(Op::MatMul(a.0, b.0), vec![sa[0], sb[1]])
    }

    /// 3×3 convolution, unit stride, reflect padding. `x: Cin×H×W`, `w: Cout×Cin×3×3`,
    /// optional bias `b: [Cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ok = sx.len() == 3
            && sw.len() == 4
            && sw[1] == sx[0]
            && sw[2] == 3
            && sw[3] == 3
            && b.map_or(true, |b| self.shape(b) == [sw[0]]);
        if !ok {
            let sb = b.map(|b| self.shape(b).to_vec());
            return Err(self.shape_err("conv3x3", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        self.push(Op::Conv3x3 { x: x.0, w: w.0, b: b.map(|b| b.0) }, vec![sw[0], sx[1], sx[2]])
    }

    /// Bilinear resampling of `img: C×H×W` at `(y + δy, x + δx)` with `off: 2×H×W`
    /// holding pixel offsets `(δy, δx)`.
    pub fn grid_sample(&mut self, img: Var, off: Var, border: Border) -> Result<Var> {
        let (si, so) = (self.shape(img).to_vec(), self.shape(off).to_vec());
        if si.len() != 3 || so != [2, si[1], si[2]] {
            return Err(self.shape_err("grid_sample", format!("img {si:?}, offsets {so:?}")));
        }
        self.push(Op::GridSample { img: img.0, off: off.0, border }, si)
    }

    /// Reparameterized Weibull draw `λ·(−ln(1−u))^{1/κ}` with fixed uniforms `u ∈ (0,1)`.
    pub fn weibull_sample(&mut self, lam: Var, kap: Var, u: &Grid<T>) -> Result<Var> {
        let s = self.shape(lam).to_vec();
        if self.shape(kap) != s.as_slice() || u.shape() != s.as_slice() {
            return Err(self.shape_err(
                "weibull_sample",
                format!("lam {s:?}, kap {:?}, u {:?}", self.shape(kap), u.shape()),
            ));
        }
        if u.data().iter().any(|&v| !(v > T::zero() && v < T::one())) {
            return Err(Error::InvalidArgument("uniform noise must lie in (0, 1)".into()));
        }
        self.push(Op::Weibull { lam: lam.0, kap: kap.0, noise: u.clone() }, s)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::StopGrad(a.0))
    }

    /// Identity forward, `−scale ×` gradient backward.
    pub fn grl(&mut self, a: Var, scale: T) -> Result<Var> {
        self.unary(a, Op::Grl(a.0, scale))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.shape(a).iter().product::<usize>() || shape.is_empty() || n == 0 {
            return Err(self.shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        self.push(Op::Reshape(a.0), shape.to_vec())
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| self.shape_err("concat", "no inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != tail[..] {
                return Err(self.shape_err("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), shape)
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(self.shape_err("slice", format!("{start}..{} of {s:?}", start + len)));
        }
        let mut shape = s;
        shape[0] = len;
        self.push(Op::Slice { x: x.0, start }, shape)
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, Op::Clamp { x: x.0, lo, hi })
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(x, Op::Affine { x: x.0, scale, shift })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, T::one(), s)
    }

    /// Binds named leaves, re-evaluates every node in order and returns the marked outputs.
    pub fn forward_eval(&mut self, bindings: &[(&str, Grid<T>)]) -> Result<BTreeMap<String, Grid<T>>> {
        for (name, g) in bindings {
            self.bind(name, g.clone())?;
        }
        self.replay()?;
        self.outputs
            .iter()
            .map(|(n, &i)| Ok((n.clone(), self.nodes[i].value.clone().ok_or(Error::NotEvaluated(i))?)))
            .collect()
    }

    /// Sets the value of a named input or parameter without re-evaluating.
    pub fn bind(&mut self, name: &str, g: Grid<T>) -> Result<()> {
        let &id = self
            .leaves
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no leaf named `{name}`")))?;
        if self.nodes[id].shape != g.shape() {
            return Err(Error::ShapeMismatch {
                node: id,
                op: self.nodes[id].op.name(),
                detail: format!("bound {:?}, declared {:?}", g.shape(), self.nodes[id].shape),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { node: id, op: "bind" });
        }
        self.nodes[id].value = Some(g);
        Ok(())
    }

    /// Re-evaluates every non-leaf node in order.
    pub fn replay(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            match &self.nodes[id].op {
                Op::Const | Op::Param => {}
                Op::Input(name) => {
                    if self.nodes[id].value.is_none() {
                        return Err(Error::UnboundInput(name.clone()));
                    }
                }
                _ => {
                    let v = self.compute(id)?;
                    self.nodes[id].value = Some(v);
                }
            }
        }
        Ok(())
    }

    pub fn backward(&self, seeds: &[(Var, Grid<T>)]) -> Result<Grads<T>> {
        self.backward_with(seeds, BackwardOptions::default())
    }

    /// Backward pass seeded by gradients on marked outputs, keyed by output name.
    pub fn backward_named(&self, seeds: &BTreeMap<String, Grid<T>>) -> Result<Grads<T>> {
        let mut s = Vec::with_capacity(seeds.len());
        for (name, g) in seeds {
            let &id = self
                .outputs
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no output named `{name}`")))?;
            s.push((Var(id), g.clone()));
        }
        self.backward(&s)
    }

    /// Backward pass from a scalar node with seed 1.
    pub fn grad(&self, loss: Var) -> Result<Grads<T>> {
        let shape = self.shape(loss).to_vec();
        self.backward(&[(loss, Grid::ones(&shape))])
    }

    pub fn backward_with(&self, seeds: &[(Var, Grid<T>)], opts: BackwardOptions) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Grid<T>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if node.value.is_none() {
                return Err(Error::NotEvaluated(v.0));
            }
            if g.shape() != node.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    node: v.0,
                    op: node.op.name(),
                    detail: format!("seed {:?} vs node {:?}", g.shape(), node.shape),
                });
            }
            accumulate(&mut grads[v.0], g.clone());
            top = top.max(v.0 + 1);
        }
        for id in (0..top).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.node_backward(id, &g, opts)?;
            grads[id] = Some(g);
            for (input, cg) in contributions {
                if self.nodes[input].needs_grad {
                    accumulate(&mut grads[input], cg);
                }
            }
        }
        let mut leaf_names: Vec<(String, usize)> = self.leaves.iter().map(|(n, &i)| (n.clone(), i)).collect();
        leaf_names.sort_by_key(|(_, i)| *i);
        let leaf_shapes = leaf_names.iter().map(|(_, i)| self.nodes[*i].shape.clone()).collect();
        Ok(Grads { by_node: grads, leaf_names, leaf_shapes })
    }

    fn node_backward(&self, id: usize, g: &Grid<T>, opts: BackwardOptions) -> Result<Vec<(usize, Grid<T>)>> {
        let node = &self.nodes[id];
        let out = node.value.as_ref().ok_or(Error::NotEvaluated(id))?;
        let gd = g.data();
        let val = |i: usize| self.nodes[i].value.as_ref().ok_or(Error::NotEvaluated(i));
        let like = |i: usize, data: Vec<T>| Grid::from_vec(&self.nodes[i].shape, data).expect("grad shape");
        let pointwise = |a: usize, f: &dyn Fn(T, T, T) -> T| -> Result<Vec<(usize, Grid<T>)>> {
            let x = val(a)?;
            let data = x.data().iter().zip(out.data()).zip(gd).map(|((&x, &y), &g)| f(x, y, g)).collect();
            Ok(vec![(a, like(a, data))])
        };
        let bcast = |i: usize| -> Result<Vec<T>> {
            let v = val(i)?;
            Ok(if v.len() == gd.len() { v.data().to_vec() } else { vec![v.item(); gd.len()] })
        };
        Ok(match &node.op {
            Op::Input(_) | Op::Param | Op::Const => vec![],
            Op::Add(a, b) => vec![
                (*a, unbroadcast(gd.to_vec(), &self.nodes[*a].shape)),
                (*b, unbroadcast(gd.to_vec(), &self.nodes[*b].shape)),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(gd.to_vec(), &self.nodes[*a].shape)),
                (*b, unbroadcast(gd.iter().map(|&v| -v).collect(), &self.nodes[*b].shape)),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (bcast(*a)?, bcast(*b)?);
                let ga = gd.iter().zip(&vb).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(&va).map(|(&g, &x)| g * x).collect();
                vec![(*a, unbroadcast(ga, &self.nodes[*a].shape)), (*b, unbroadcast(gb, &self.nodes[*b].shape))]
            }
            Op::Div(a, b) => {
                let (va, vb) = (bcast(*a)?, bcast(*b)?);
                let ga = gd.iter().zip(&vb).map(|(&g, &y)| g / y).collect();
                let gb = gd.iter().zip(va.iter().zip(&vb)).map(|(&g, (&x, &y))| -g * x / (y * y)).collect();
                vec![(*a, unbroadcast(ga, &self.nodes[*a].shape)), (*b, unbroadcast(gb, &self.nodes[*b].shape))]
            }
            Op::Neg(a) => pointwise(*a, &|_, _, g| -g)?,
            Op::Exp(a) => pointwise(*a, &|_, y, g| g * y)?,
            Op::Log(a) => pointwise(*a, &|x, _, g| g / x)?,
            Op::PowConst(a, p) => {
                let p = *p;
                pointwise(*a, &move |x, _, g| g * p * x.powf(p - T::one()))?
            }
            Op::Sigmoid(a) => pointwise(*a, &|_, y, g| g * y * (T::one() - y))?,
            Op::Tanh(a) => pointwise(*a, &|_, y, g| g * (T::one() - y * y))?,
            Op::Softplus(a) => pointwise(*a, &|x, _, g| g * sigmoid(x))?,
            Op::SteRelu(a) | Op::StopGrad(a) | Op::Reshape(a) => {
                // StopGrad nodes never reach here: they are marked as not needing grad.
                vec![(*a, like(*a, gd.to_vec()))]
            }
            Op::Relu(a) => pointwise(*a, &|x, _, g| if x > T::zero() { g } else { T::zero() })?,
            Op::LnGamma(a) => pointwise(*a, &|x, _, g| g * special::digamma(x))?,
            Op::Sum(a) => vec![(*a, Grid::full(&self.nodes[*a].shape, gd[0]))],
            Op::Mean(a) => {
                let n = T::lit(val(*a)?.len() as f64);
                vec![(*a, Grid::full(&self.nodes[*a].shape, gd[0] / n))]
            }
            Op::MaskedMean(a, wts) => {
                let total = wts.sum();
                let n = wts.len();
                let mut data = Vec::with_capacity(val(*a)?.len());
                for &gc in gd {
                    data.extend(wts.data().iter().map(|&w| gc * w / total));
                }
                debug_assert_eq!(data.len(), n * gd.len());
                vec![(*a, like(*a, data))]
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = (val(*a)?, val(*b)?);
                let (m, k, n) = (ga.shape()[0], ga.shape()[1], gb.shape()[1]);
                let (da, db) = kernels::matmul_backward(ga.data(), gb.data(), gd, m, k, n);
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Conv3x3 { x, w, b } => {
                let (gx, gw) = (val(*x)?, val(*w)?);
                let d = kernels::ConvDims {
                    cin: gx.shape()[0],
                    cout: gw.shape()[0],
                    h: gx.shape()[1],
                    w: gx.shape()[2],
                };
                let (dx, dw, db) = kernels::conv3x3_backward(gx.data(), gw.data(), gd, &d);
                let mut v = vec![(*x, like(*x, dx)), (*w, like(*w, dw))];
                if let Some(b) = b {
                    v.push((*b, like(*b, db)));
                }
                v
            }
            Op::GridSample { img, off, border } => {
                let gi = val(*img)?;
                let (c, h, w) = gi.chw();
                let (di, doff) =
                    kernels::grid_sample_backward(gi.data(), val(*off)?.data(), gd, c, h, w, *border);
                vec![(*img, like(*img, di)), (*off, like(*off, doff))]
            }
            Op::Weibull { lam, kap, noise } => {
                let (l, k) = (val(*lam)?, val(*kap)?);
                let mut dl = Vec::with_capacity(gd.len());
                let mut dk = Vec::with_capacity(gd.len());
                for i in 0..gd.len() {
                    let eps = -(-noise.data()[i]).ln_1p();
                    let kv = k.data()[i];
                    let base = eps.powf(T::one() / kv);
                    dl.push(gd[i] * base);
                    dk.push(gd[i] * l.data()[i] * base * eps.ln() * -(T::one() / (kv * kv)));
                }
                vec![(*lam, like(*lam, dl)), (*kap, like(*kap, dk))]
            }
            Op::Grl(a, scale) => {
                if opts.grl_as_identity {
                    vec![(*a, like(*a, gd.to_vec()))]
                } else {
                    let s = *scale;
                    vec![(*a, like(*a, gd.iter().map(|&v| -(s * v)).collect()))]
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.nodes[p].shape.iter().product::<usize>();
                    v.push((p, like(p, gd[off..off + n].to_vec())));
                    off += n;
                }
                v
            }
            Op::Slice { x, start } => {
                let s = &self.nodes[*x].shape;
                let inner: usize = s[1..].iter().product();
                let mut data = vec![T::zero(); s.iter().product()];
                data[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                vec![(*x, like(*x, data))]
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                pointwise(*x, &move |v, _, g| if v >= lo && v <= hi { g } else { T::zero() })?
            }
            Op::Affine { x, scale, .. } => {
                let s = *scale;
                pointwise(*x, &move |_, _, g| g * s)?
            }
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Grid<T>>, g: Grid<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Grid<f64> {
        Grid::scalar(v)
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.input("x", &[1]).unwrap();
        let y = t.sigmoid(x).unwrap();
        t.mark_output("y", y);
        let out = t.forward_eval(&[("x", s(0.0))]).unwrap();
        assert_eq!(out["y"].item(), 0.5);
    }

    #[test]
    fn ste_relu_forward_and_identity_backward() {
        let mut t = Tape::<f64>::new();
        let x = t.param("x", s(-1.0)).unwrap();
        let y = t.ste_relu(x).unwrap();
        assert_eq!(t.item(y).unwrap(), 0.0);
        let g = t.grad(y).unwrap();
        assert_eq!(g.by_name("x").unwrap().item(), 1.0);
    }

    #[test]
    fn polynomial_value_and_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param("x", s(3.0)).unwrap();
        let xx = t.mul(x, x).unwrap();
        let y = t.add(xx, x).unwrap();
        assert_eq!(t.item(y).unwrap(), 12.0);
        assert_eq!(t.grad(xx).unwrap().by_name("x").unwrap().item(), 6.0);
        assert_eq!(t.grad(y).unwrap().by_name("x").unwrap().item(), 7.0);
    }

    #[test]
    fn stop_grad_freezes_one_factor() {
        let mut t = Tape::<f64>::new();
        let x = t.param("x", s(2.0)).unwrap();
        let f = t.stop_grad(x).unwrap();
        let y = t.mul(f, x).unwrap();
        assert_eq!(t.grad(y).unwrap().by_name("x").unwrap().item(), 2.0);
    }

    #[test]
    fn grl_flips_sign() {
        let mut t = Tape::<f64>::new();
        let x = t.param("x", s(2.0)).unwrap();
        let r = t.grl(x, 1.0).unwrap();
        let y = t.mul(r, r).unwrap();
        assert_eq!(t.item(y).unwrap(), 4.0);
        assert_eq!(t.grad(y).unwrap().by_name("x").unwrap().item(), -4.0);
        let id = t.backward_with(&[(y, s(1.0))], BackwardOptions { grl_as_identity: true }).unwrap();
        assert_eq!(id.by_name("x").unwrap().item(), 4.0);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut t = Tape::<f64>::new();
        let x = t.input("x", &[1]).unwrap();
        let y = t.exp(x).unwrap();
        assert!(matches!(t.backward(&[(y, s(1.0))]), Err(Error::NotEvaluated(_))));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Grid::zeros(&[2, 3]));
        let b = t.constant(Grid::zeros(&[3, 2]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let mut t = Tape::<f64>::new();
        let x = t.input("x", &[1]).unwrap();
        let _y = t.log(x).unwrap();
        match t.forward_eval(&[("x", s(-1.0))]) {
            Err(Error::NonFinite { node: 1, op: "log" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut t = Tape::<f64>::new();
        t.input("x", &[1]).unwrap();
        assert!(matches!(t.forward_eval(&[]), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn grid_sample_hand_case() {
        let mut t = Tape::<f64>::new();
        let img = t.constant(Grid::from_vec(&[1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        let off = t.constant(Grid::from_vec(&[2, 1, 3], vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5]).unwrap());
        let y = t.grid_sample(img, off, Border::Clamp).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[0.5, 1.5, 2.0]);
    }

    #[test]
    fn forward_eval_is_bit_deterministic() {
        let mut t = Tape::<f64>::new();
        let x = t.input("x", &[1, 4, 4]).unwrap();
        let w = t.param("w", Grid::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.37).sin())).unwrap();
        let c = t.conv3x3(x, w, None).unwrap();
        let y = t.tanh(c).unwrap();
        t.mark_output("y", y);
        let xin = Grid::from_fn(&[1, 4, 4], |i| (i as f64).cos());
        let a = t.forward_eval(&[("x", xin.clone())]).unwrap();
        let b = t.forward_eval(&[("x", xin)]).unwrap();
        assert_eq!(a["y"].to_bytes(), b["y"].to_bytes());
    }
}
