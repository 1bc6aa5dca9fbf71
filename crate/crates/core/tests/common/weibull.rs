//! Sampling oracles for the Weibull moments and the Weibull–Gamma KL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use ruackit_core::weibull::{kl_weibull_gamma, weibull_mean, weibull_sample, weibull_variance, GammaPrior, WeibullParams};
use statrs::distribution::{Continuous, Gamma, Weibull};

pub const N: usize = 1_000_000;
pub const LAMBDAS: [f64; 3] = [0.5, 1.0, 2.0];
pub const KAPPAS: [f64; 4] = [0.7, 1.0, 2.0, 5.0];

/// `(λ, κ, relative mean error, relative variance error)` from `N` reparameterized draws.
pub fn moment_errors(seed: u64) -> Vec<(f64, f64, f64, f64)> {
    let mut out = Vec::new();
    for &l in &LAMBDAS {
        for &k in &KAPPAS {
            let p = WeibullParams::new(l, k).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((l * 1e3) as u64) << 16 ^ (k * 1e3) as u64);
            let (mut s, mut s2) = (0.0, 0.0);
            let xs: Vec<f64> = (0..N).map(|_| weibull_sample(p, rng.sample(Open01)).unwrap()).collect();
            for &x in &xs {
                s += x;
            }
            let m = s / N as f64;
            for &x in &xs {
                s2 += (x - m) * (x - m);
            }
            let v = s2 / (N - 1) as f64;
            let (em, ev) = (weibull_mean(p), weibull_variance(p));
            out.push((l, k, ((m - em) / em).abs(), ((v - ev) / ev).abs()));
        }
    }
    out
}

pub const KL_CASES: [(f64, f64, f64, f64); 9] = [
    (1.0, 2.0, 1.0, 3.0),
    (0.5, 1.0, 1.0, 3.0),
    (2.0, 1.5, 1.0, 3.0),
    (1.0, 0.7, 1.0, 3.0),
    (0.3, 3.0, 2.0, 1.0),
    (1.5, 5.0, 0.5, 2.0),
    (0.8, 1.2, 3.0, 4.0),
    (3.0, 2.5, 1.0, 0.5),
    (0.1, 0.9, 1.0, 3.0),
];

/// `(closed form, MC estimate)` of `E_q[ln q(w) − ln p(w)]` with densities from statrs.
pub fn kl_pairs(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KL_CASES
        .iter()
        .map(|&(l, k, a, b)| {
            let q = Weibull::new(k, l).unwrap();
            let pr = Gamma::new(a, b).unwrap();
            let p = WeibullParams::new(l, k).unwrap();
            let mut s = 0.0;
            for _ in 0..N {
                let w = weibull_sample(p, rng.sample(Open01)).unwrap();
                s += q.ln_pdf(w) - pr.ln_pdf(w);
            }
            (kl_weibull_gamma(p, GammaPrior::new(a, b).unwrap()), s / N as f64)
        })
        .collect()
}

pub fn kl_at_matched_exponential() -> f64 {
    kl_weibull_gamma(WeibullParams::new(1.0 / 3.0, 1.0).unwrap(), GammaPrior::default())
}
