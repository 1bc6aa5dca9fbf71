//! Dense kernels behind the heavier tape ops (matmul, 3×3 conv, bilinear sampling).

use crate::scalar::Real;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of `a·b` given the output gradient `g[m×n]`.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            ga[i * k + p] = acc;
            let av = a[i * k + p];
            if av != T::zero() {
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, &gv) in gbrow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
    (ga, gb)
}

/// Reflect an index in `-1..=n` into `0..n`; a single-row axis clamps instead.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Reflect-padded copy `[C × (H+2) × (W+2)]`.
fn pad_reflect<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); c * ph * pw];
    for ci in 0..c {
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            for px in 0..pw {
                let sx = reflect(px as isize - 1, w);
                out[(ci * ph + py) * pw + px] = x[(ci * h + sy) * w + sx];
            }
        }
    }
    out
}

pub struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv3x3<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let ConvDims { cin, cout, h, w } = *d;
    let xp = pad_reflect(x, cin, h, w);
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); cout * h * w];
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in 0..h {
                        let src = &xp[(ci * ph + y + ky) * pw + kx..][..w];
                        let dst = &mut plane[y * w..(y + 1) * w];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    wt: &[T],
    g: &[T],
    d: &ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvDims { cin, cout, h, w } = *d;
    let xp = pad_reflect(x, cin, h, w);
    let (ph, pw) = (h + 2, w + 2);
    let mut gxp = vec![T::zero(); cin * ph * pw];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); cout];
    for co in 0..cout {
        let gplane = &g[co * h * w..(co + 1) * h * w];
        gb[co] = gplane.iter().copied().sum();
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wv = wt[widx];
                    let mut acc = T::zero();
                    for y in 0..h {
                        let off = (ci * ph + y + ky) * pw + kx;
                        let grow = &gplane[y * w..(y + 1) * w];
                        let src = &xp[off..off + w];
                        for (&gv, &s) in grow.iter().zip(src) {
                            acc += gv * s;
                        }
                        if wv != T::zero() {
                            let dst = &mut gxp[off..off + w];
                            for (o, &gv) in dst.iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    let mut gx = vec![T::zero(); cin * h * w];
    for ci in 0..cin {
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            for px in 0..pw {
                let sx = reflect(px as isize - 1, w);
                gx[(ci * h + sy) * w + sx] += gxp[(ci * ph + py) * pw + px];
            }
        }
    }
    (gx, gw, gb)
}

/// Out-of-range handling for bilinear sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    /// Sampling coordinates are clamped into the image.
    #[default]
    Clamp,
    /// Taps outside the image read as zero.
    Zero,
}

struct Taps<T> {
    y0: isize,
    x0: isize,
    wy: T,
    wx: T,
    // whether the coordinate moved freely (false where clamping pinned it)
    ay: bool,
    ax: bool,
}

#[inline]
fn taps<T: Real>(sy: T, sx: T, h: usize, w: usize, border: Border) -> Taps<T> {
    match border {
        Border::Clamp => {
            let hmax = T::lit((h - 1) as f64);
            let wmax = T::lit((w - 1) as f64);
            let ay = sy > T::zero() && sy < hmax;
            let ax = sx > T::zero() && sx < wmax;
            let cy = sy.max(T::zero()).min(hmax);
            let cx = sx.max(T::zero()).min(wmax);
            let fy = cy.floor();
            let fx = cx.floor();
            Taps {
                y0: fy.as_f64() as isize,
                x0: fx.as_f64() as isize,
                wy: cy - fy,
                wx: cx - fx,
                ay,
                ax,
            }
        }
        Border::Zero => {
            let fy = sy.floor();
            let fx = sx.floor();
            Taps {
                y0: fy.as_f64() as isize,
                x0: fx.as_f64() as isize,
                wy: sy - fy,
                wx: sx - fx,
                ay: true,
                ax: true,
            }
        }
    }
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize, border: Border) -> T {
    match border {
        Border::Clamp => {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            plane[yy * w + xx]
        }
        Border::Zero => {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                T::zero()
            } else {
                plane[y as usize * w + x as usize]
            }
        }
    }
}

pub fn grid_sample<T: Real>(
    img: &[T],
    off: &[T],
    c: usize,
    h: usize,
    w: usize,
    border: Border,
) -> Vec<T> {
    let n = h * w;
    let mut out = vec![T::zero(); c * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = T::lit(y as f64) + off[i];
            let sx = T::lit(x as f64) + off[n + i];
            let t = taps(sy, sx, h, w, border);
            let (one, wy, wx) = (T::one(), t.wy, t.wx);
            for ci in 0..c {
                let p = &img[ci * n..(ci + 1) * n];
                let v00 = fetch(p, h, w, t.y0, t.x0, border);
                let v01 = fetch(p, h, w, t.y0, t.x0 + 1, border);
                let v10 = fetch(p, h, w, t.y0 + 1, t.x0, border);
                let v11 = fetch(p, h, w, t.y0 + 1, t.x0 + 1, border);
                out[ci * n + i] = (one - wy) * (one - wx) * v00
                    + (one - wy) * wx * v01
                    + wy * (one - wx) * v10
                    + wy * wx * v11;
            }
        }
    }
    out
}

/// Returns `(grad_img, grad_offsets)`.
pub fn grid_sample_backward<T: Real>(
    img: &[T],
    off: &[T],
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    border: Border,
) -> (Vec<T>, Vec<T>) {
    let n = h * w;
    let mut gi = vec![T::zero(); c * n];
    let mut go = vec![T::zero(); 2 * n];
    let scatter = |gi: &mut [T], ci: usize, y: isize, x: isize, v: T| {
        let (yy, xx) = match border {
            Border::Clamp => (y.clamp(0, h as isize - 1), x.clamp(0, w as isize - 1)),
            Border::Zero => {
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    return;
                }
                (y, x)
            }
        };
        gi[ci * n + yy as usize * w + xx as usize] += v;
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = T::lit(y as f64) + off[i];
            let sx = T::lit(x as f64) + off[n + i];
            let t = taps(sy, sx, h, w, border);
            let (one, wy, wx) = (T::one(), t.wy, t.wx);
            let mut gdy = T::zero();
            let mut gdx = T::zero();
            for ci in 0..c {
                let gv = g[ci * n + i];
                if gv == T::zero() {
                    continue;
                }
                let p = &img[ci * n..(ci + 1) * n];
                let v00 = fetch(p, h, w, t.y0, t.x0, border);
                let v01 = fetch(p, h, w, t.y0, t.x0 + 1, border);
                let v10 = fetch(p, h, w, t.y0 + 1, t.x0, border);
                let v11 = fetch(p, h, w, t.y0 + 1, t.x0 + 1, border);
                scatter(&mut gi, ci, t.y0, t.x0, gv * (one - wy) * (one - wx));
                scatter(&mut gi, ci, t.y0, t.x0 + 1, gv * (one - wy) * wx);
                scatter(&mut gi, ci, t.y0 + 1, t.x0, gv * wy * (one - wx));
                scatter(&mut gi, ci, t.y0 + 1, t.x0 + 1, gv * wy * wx);
                gdy += gv * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                gdx += gv * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
            }
            if t.ay {
                go[i] = gdy;
            }
            if t.ax {
                go[n + i] = gdx;
            }
        }
    }
    (gi, go)
}
