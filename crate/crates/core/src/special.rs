//! Log-gamma and digamma.

use crate::scalar::Real;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7). Evaluated in `f64` for either scalar type.
pub fn ln_gamma<T: Real>(x: T) -> T {
    T::lit(ln_gamma_f64(x.as_f64()))
}

fn ln_gamma_f64(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the series in its accurate range
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma_f64(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `Γ(x)` for `x > 0`.
pub fn gamma<T: Real>(x: T) -> T {
    ln_gamma(x).exp()
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma<T: Real>(x: T) -> T {
    T::lit(digamma_f64(x.as_f64()))
}

fn digamma_f64(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    acc + x.ln() - 0.5 * inv - series
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_and_half_points() {
        assert!((gamma(5.0_f64) - 24.0).abs() < 1e-11);
        assert!((gamma(1.5_f64) - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-14);
        assert!(ln_gamma(1.0_f64).abs() < 1e-14);
        assert!(ln_gamma(2.0_f64).abs() < 1e-14);
    }

    #[test]
    fn digamma_known_values() {
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0_f64) + euler).abs() < 1e-12);
        assert!((digamma(0.5_f64) + euler + 2.0 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn digamma_matches_lgamma_slope() {
        for &x in &[0.6_f64, 1.3, 2.7, 9.0, 18.5] {
            let h = 1e-5;
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((digamma(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
