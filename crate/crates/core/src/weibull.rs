//! Weibull posterior mathematics: reparameterized draws, moments, KL to a Gamma prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::special::{gamma, ln_gamma};
use crate::tape::{Tape, Var};

pub const KAPPA_MIN: f64 = 0.5;
pub const KAPPA_MAX: f64 = 10.0;

/// Scale `lambda` and shape `kappa` of a Weibull distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeibullParams<T: Real = f64> {
    pub lambda: T,
    pub kappa: T,
}

impl<T: Real> WeibullParams<T> {
    pub fn new(lambda: T, kappa: T) -> Result<Self> {
        if !(lambda > T::zero() && kappa > T::zero() && lambda.is_finite() && kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("weibull params λ={lambda}, κ={kappa}")));
        }
        Ok(Self { lambda, kappa })
    }

    /// Same scale with the shape clamped into `[0.5, 10]`.
    pub fn clamped(self) -> Self {
        Self { lambda: self.lambda, kappa: clamp_kappa(self.kappa) }
    }
}

pub fn clamp_kappa<T: Real>(k: T) -> T {
    k.max(T::lit(KAPPA_MIN)).min(T::lit(KAPPA_MAX))
}

/// Gamma prior with shape `alpha` and rate `beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 3.0 }
    }
}

impl GammaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma prior α={alpha}, β={beta}")));
        }
        Ok(Self { alpha, beta })
    }
}

/// `λ·(−ln(1−u))^{1/κ}` for `u ∈ (0, 1)`.
pub fn weibull_sample<T: Real>(p: WeibullParams<T>, u: T) -> Result<T> {
    if !(u > T::zero() && u < T::one()) {
        return Err(Error::InvalidArgument(format!("uniform draw {u} outside (0, 1)")));
    }
    Ok(p.lambda * (-(-u).ln_1p()).powf(T::one() / p.kappa))
}

/// `λ·Γ(1 + 1/κ)`.
pub fn weibull_mean<T: Real>(p: WeibullParams<T>) -> T {
    p.lambda * gamma(T::one() + p.kappa.recip())
}

/// `λ²·[Γ(1 + 2/κ) − Γ²(1 + 1/κ)]`.
pub fn weibull_variance<T: Real>(p: WeibullParams<T>) -> T {
    let g1 = gamma(T::one() + p.kappa.recip());
    let g2 = gamma(T::one() + T::lit(2.0) / p.kappa);
    (p.lambda * p.lambda * (g2 - g1 * g1)).max(T::zero())
}

/// Closed-form `KL(Weibull(λ, κ) ‖ Gamma(α, β))`.
pub fn kl_weibull_gamma<T: Real>(p: WeibullParams<T>, prior: GammaPrior) -> T {
    let a = T::lit(prior.alpha);
    let b = T::lit(prior.beta);
    let eg = T::euler_gamma();
    eg * a / p.kappa - a * p.lambda.ln() + p.kappa.ln() + b * weibull_mean(p) - a * b.ln()
        + ln_gamma(a)
        - eg
        - T::one()
}

/// `Γ(1 + c/κ)` on the tape, via `exp(lnΓ(·))`.
fn gamma_term<T: Real>(t: &mut Tape<T>, kap: Var, c: T) -> Result<Var> {
    let inv = t.powf(kap, -T::one())?;
    let arg = t.affine(inv, c, T::one())?;
    let lg = t.ln_gamma(arg)?;
    t.exp(lg)
}

/// Element-wise mean and variance of a Weibull field on the tape.
pub fn moments_on_tape<T: Real>(t: &mut Tape<T>, lam: Var, kap: Var) -> Result<(Var, Var)> {
    let g1 = gamma_term(t, kap, T::one())?;
    let g2 = gamma_term(t, kap, T::lit(2.0))?;
    let mean = t.mul(lam, g1)?;
    let g1sq = t.mul(g1, g1)?;
    let spread = t.sub(g2, g1sq)?;
    let lam2 = t.mul(lam, lam)?;
    let var = t.mul(lam2, spread)?;
    Ok((mean, var))
}

/// Element-wise KL to the prior on the tape.
pub fn kl_on_tape<T: Real>(t: &mut Tape<T>, lam: Var, kap: Var, prior: GammaPrior) -> Result<Var> {
    let a = T::lit(prior.alpha);
    let b = T::lit(prior.beta);
    let eg = T::euler_gamma();
    let inv_k = t.powf(kap, -T::one())?;
    let t1 = t.scale(inv_k, eg * a)?;
    let ln_l = t.log(lam)?;
    let t2 = t.scale(ln_l, -a)?;
    let t3 = t.log(kap)?;
    let g1 = gamma_term(t, kap, T::one())?;
    let m = t.mul(lam, g1)?;
    let t4 = t.scale(m, b)?;
    let s12 = t.add(t1, t2)?;
    let s123 = t.add(s12, t3)?;
    let s = t.add(s123, t4)?;
    t.add_scalar(s, -a * b.ln() + ln_gamma(a) - eg - T::one())
}
