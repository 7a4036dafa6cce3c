//! Paired two-sided Wilcoxon signed-rank test.
//!
//! Exact null distribution (by dynamic programming over doubled ranks, so
//! tied mid-ranks stay integral) up to [`EXACT_MAX_N`] non-zero differences,
//! normal approximation with tie and continuity correction above.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Number of pairs supplied.
    pub n: usize,
    /// Pairs with a non-zero difference (the ones ranked).
    pub n_nonzero: usize,
    /// Sum of ranks of positive differences `a − b`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    /// All differences were zero; `p_value` is 1 by convention.
    pub degenerate: bool,
    /// Median of `a − b`.
    pub median_difference: f64,
}

/// Mid-ranks of `|d|`, 1-based, with ties averaged.
fn ranks(abs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut r = vec![0.0; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Two-sided exact p-value for observed positive-rank sum `w_plus`.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // Doubled ranks are integers even with ties.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut count = vec![0.0f64; total + 1];
    count[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            count[s] += count[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let lower: f64 = count[..=w].iter().sum::<f64>() / all;
    let upper: f64 = count[w..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn paired_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::InvalidInput(format!(
            "paired test needs at least {MIN_PAIRS} pairs, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in paired samples".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let median_difference = super::metrics::median(&diffs);
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(PairedTest {
            n: a.len(),
            n_nonzero: 0,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
            degenerate: true,
            median_difference,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let r = ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&r).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (p_value, exact) = if n <= EXACT_MAX_N {
        (exact_p(&r, w_plus), true)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        // Tie correction: sum over tie groups of (t³ − t) / 48.
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut tie = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let norm = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * (1.0 - norm.cdf(z))).min(1.0), false)
    };
    Ok(PairedTest {
        n: a.len(),
        n_nonzero: n,
        statistic: w_plus,
        p_value,
        exact,
        degenerate: false,
        median_difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force two-sided p-value by enumerating all sign patterns.
    fn enumerate_p(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                le += 1;
            }
            if s >= w - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64) / total).min(1.0)
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = paired_test(&a, &a).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn constant_shift_n10_exact() {
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.37).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 0.5).collect();
        let t = paired_test(&a, &b).unwrap();
        // All ten signs positive: 1 of 1024 patterns in each tail.
        assert_eq!(t.p_value, 2.0 / 1024.0);
        assert_eq!(t.statistic, 55.0);
        assert!(t.exact);
    }

    #[test]
    fn six_pairs_minimum() {
        let a = [1.0; 5];
        assert!(paired_test(&a, &a).is_err());
        assert!(paired_test(&[1.0; 6], &[0.0; 7]).is_err());
        // n = 6, all positive: p = 2/64.
        let t = paired_test(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap();
        assert_eq!(t.p_value, 2.0 / 64.0);
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let d = [0.5, -0.5, 1.0, 2.0, -2.0, 2.0, 3.0, -0.25, 0.75, 1.0, -3.0, 4.0];
        let zeros = vec![0.0; d.len()];
        let t = paired_test(&d, &zeros).unwrap();
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let r = ranks(&abs);
        assert!((t.p_value - enumerate_p(&r, t.statistic)).abs() < 1e-12);
    }

    #[test]
    fn mid_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let mut b = a;
        b[0] = 0.0;
        let t = paired_test(&a, &b).unwrap();
        assert_eq!(t.n, 7);
        assert_eq!(t.n_nonzero, 1);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn normal_approximation_close_to_exact_at_boundary() {
        // Same data analysed both ways at n = 25.
        let d: Vec<f64> = (1..=25).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let zeros = vec![0.0; 25];
        let exact = paired_test(&d, &zeros).unwrap();
        let mut d26 = d.clone();
        d26.push(0.0); // dropped as zero difference; still 25 ranked
        let still_exact = paired_test(&d26, &vec![0.0; 26]).unwrap();
        assert_eq!(exact.p_value, still_exact.p_value);
        let nf = 25.0f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0).sqrt();
        let z = ((exact.statistic - mu).abs() - 0.5) / sd;
        let approx = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z));
        assert!((approx - exact.p_value).abs() < 0.01, "{approx} vs {}", exact.p_value);
    }

    #[test]
    fn large_sample_uses_normal() {
        let a: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.01).collect();
        let b = vec![0.0; 50];
        let t = paired_test(&a, &b).unwrap();
        assert!(!t.exact);
        assert!(t.p_value < 1e-8);
    }
}
