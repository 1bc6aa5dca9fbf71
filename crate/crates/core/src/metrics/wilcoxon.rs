//! Exact Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};

use super::calib::midranks;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `a` tends to exceed `b`.
    Greater,
    Less,
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub p: f64,
}

/// Exact null distribution of the positive rank sum, as counts indexed by twice the sum
/// (midranks are multiples of ½).
fn null_counts(doubled: &[usize]) -> Vec<f64> {
    let total: usize = doubled.iter().sum();
    let mut dp = vec![0.0; total + 1];
    dp[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        for s in (0..=reach).rev() {
            if dp[s] != 0.0 {
                dp[s + r] += dp[s];
            }
        }
        reach += r;
    }
    dp
}

/// Zero differences are dropped, ties share midranks and the p-value is exact.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alt: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("wilcoxon: unequal lengths".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::Undefined("all paired differences are zero"));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let w2: usize = doubled.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let counts = null_counts(&doubled);
    let all = 2f64.powi(d.len() as i32);
    let upper = counts[w2..].iter().sum::<f64>() / all;
    let lower = counts[..=w2].iter().sum::<f64>() / all;
    let p = match alt {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    };
    Ok(WilcoxonResult { w_plus: w2 as f64 / 2.0, n: d.len(), p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let a = [5.0, 6.0, 7.0, 8.0, 9.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap().p, 1.0 / 32.0);
        let one = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.5], Alternative::Greater).unwrap();
        assert_eq!((one.n, one.p), (1, 0.5));
        let sym = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0], &[0.0; 4], Alternative::TwoSided).unwrap();
        assert_eq!(sym.p, 1.0);
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0], Alternative::Greater).is_err());
    }
}
