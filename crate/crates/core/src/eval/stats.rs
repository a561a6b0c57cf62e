//! Two-sided Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{EvalError, Result};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroMethod {
    /// Discard zero differences before ranking.
    #[default]
    Wilcox,
    /// Rank zero differences with the others, then discard them.
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// min(W+, W-).
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
}

/// Ranks of the non-zero differences (average ranks for ties) and their
/// signs.
fn signed_ranks(diffs: &[f64], zero: ZeroMethod) -> Vec<(f64, bool)> {
    let mut items: Vec<f64> = match zero {
        ZeroMethod::Wilcox => diffs.iter().copied().filter(|d| *d != 0.0).collect(),
        ZeroMethod::Pratt => diffs.to_vec(),
    };
    items.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut ranked = Vec::with_capacity(items.len());
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].abs() == items[i].abs() {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for d in &items[i..=j] {
            if *d != 0.0 {
                ranked.push((rank, *d > 0.0));
            }
        }
        i = j + 1;
    }
    ranked
}

fn validate(diffs: &[f64]) -> Result<()> {
    if diffs.is_empty() {
        return Err(EvalError::Empty);
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(EvalError::Malformed {
            line: 0,
            reason: "non-finite paired difference".into(),
        });
    }
    Ok(())
}

fn degenerate() -> WilcoxonResult {
    WilcoxonResult {
        n: 0,
        w_plus: 0.0,
        w_minus: 0.0,
        statistic: 0.0,
        p_value: 1.0,
        method: TestMethod::Degenerate,
    }
}

fn sums(ranked: &[(f64, bool)]) -> (f64, f64) {
    let plus = ranked.iter().filter(|r| r.1).map(|r| r.0).sum();
    let minus = ranked.iter().filter(|r| !r.1).map(|r| r.0).sum();
    (plus, minus)
}

/// Exact null distribution of W+ by dynamic programming over doubled ranks,
/// which are integers even with ties.
pub fn wilcoxon_exact(diffs: &[f64], zero: ZeroMethod) -> Result<WilcoxonResult> {
    validate(diffs)?;
    let ranked = signed_ranks(diffs, zero);
    if ranked.is_empty() {
        return Ok(degenerate());
    }
    let doubled: Vec<usize> = ranked.iter().map(|r| (2.0 * r.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let (w_plus, w_minus) = sums(&ranked);
    let statistic = w_plus.min(w_minus);
    let limit = (2.0 * statistic).round() as usize;
    let tail: f64 = counts[..=limit].iter().sum();
    let p = (2.0 * tail / 2f64.powi(ranked.len() as i32)).min(1.0);
    Ok(WilcoxonResult {
        n: ranked.len(),
        w_plus,
        w_minus,
        statistic,
        p_value: p,
        method: TestMethod::Exact,
    })
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn wilcoxon_normal(diffs: &[f64], zero: ZeroMethod) -> Result<WilcoxonResult> {
    validate(diffs)?;
    let ranked = signed_ranks(diffs, zero);
    if ranked.is_empty() {
        return Ok(degenerate());
    }
    let (w_plus, w_minus) = sums(&ranked);
    let statistic = w_plus.min(w_minus);
    let mean = ranked.iter().map(|r| r.0).sum::<f64>() / 2.0;
    let sd = (ranked.iter().map(|r| r.0 * r.0).sum::<f64>() / 4.0).sqrt();
    let dev = ((mean - statistic).abs() - 0.5).max(0.0);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.cdf(-dev / sd)).min(1.0);
    Ok(WilcoxonResult {
        n: ranked.len(),
        w_plus,
        w_minus,
        statistic,
        p_value: p,
        method: TestMethod::Normal,
    })
}

/// Exact test up to [`EXACT_MAX_N`] non-zero differences, normal
/// approximation beyond.
pub fn wilcoxon_signed_rank(diffs: &[f64], zero: ZeroMethod) -> Result<WilcoxonResult> {
    validate(diffs)?;
    let nonzero = diffs.iter().filter(|d| **d != 0.0).count();
    if nonzero <= EXACT_MAX_N {
        wilcoxon_exact(diffs, zero)
    } else {
        wilcoxon_normal(diffs, zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-sided p by enumerating every sign assignment of the ranks.
    fn enumerate(diffs: &[f64]) -> f64 {
        let ranked = signed_ranks(diffs, ZeroMethod::Wilcox);
        let n = ranked.len();
        let (plus, minus) = sums(&ranked);
        let t = plus.min(minus);
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranked[i].0).sum();
            if w <= t + 1e-9 {
                hits += 1;
            }
        }
        (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn five_positive_differences() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], ZeroMethod::Wilcox).unwrap();
        assert_eq!(r.method, TestMethod::Exact);
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn all_zero_is_p_one() {
        let r = wilcoxon_signed_rank(&[0.0; 7], ZeroMethod::Wilcox).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(wilcoxon_signed_rank(&[], ZeroMethod::Wilcox).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        let ranked = signed_ranks(&[1.0, -1.0, 2.0, 0.0], ZeroMethod::Wilcox);
        assert_eq!(ranked, vec![(1.5, true), (1.5, false), (3.0, true)]);
        let pratt = signed_ranks(&[1.0, -1.0, 2.0, 0.0], ZeroMethod::Pratt);
        assert_eq!(pratt, vec![(2.5, true), (2.5, false), (4.0, true)]);
    }

    proptest! {
        #[test]
        fn exact_matches_enumeration(diffs in proptest::collection::vec(-4i32..=4, 1..=12)) {
            let diffs: Vec<f64> = diffs.into_iter().map(f64::from).collect();
            let r = wilcoxon_exact(&diffs, ZeroMethod::Wilcox).unwrap();
            if r.n > 0 {
                prop_assert!((r.p_value - enumerate(&diffs)).abs() < 1e-12);
            }
            prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }

        #[test]
        fn sign_flip_symmetry(diffs in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let flipped: Vec<f64> = diffs.iter().map(|d| -d).collect();
            let a = wilcoxon_signed_rank(&diffs, ZeroMethod::Wilcox).unwrap();
            let b = wilcoxon_signed_rank(&flipped, ZeroMethod::Wilcox).unwrap();
            prop_assert_eq!(a.p_value, b.p_value);
            prop_assert_eq!(a.statistic, b.statistic);
        }

        #[test]
        fn normal_close_to_exact_at_25(diffs in proptest::collection::vec(-1.0f64..1.0, 25)) {
            let e = wilcoxon_exact(&diffs, ZeroMethod::Wilcox).unwrap();
            let n = wilcoxon_normal(&diffs, ZeroMethod::Wilcox).unwrap();
            prop_assert!((e.p_value - n.p_value).abs() < 0.01, "exact {} normal {}", e.p_value, n.p_value);
        }
    }
}
