use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact test.
pub const EXACT_MAX_N: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W−)`.
    pub statistic: f64,
    pub p_two_sided: f64,
    pub exact: bool,
    /// Every difference was zero; `p` is 1 by convention.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

struct Ranked {
    ranks: Vec<f64>,
    w_plus: f64,
    w_minus: f64,
}

fn rank_diffs(diffs: &[f64]) -> Ranked {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let ranks = average_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus = nz.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    Ranked { ranks, w_plus, w_minus }
}

fn degenerate() -> WilcoxonResult {
    WilcoxonResult {
        n: 0,
        w_plus: 0.0,
        w_minus: 0.0,
        statistic: 0.0,
        p_two_sided: 1.0,
        exact: true,
        degenerate: true,
    }
}

/// Exact two-sided p: `2·min(P(W+ ≤ w), P(W+ ≥ w))` under the null that
/// every sign is equally likely, counted with a subset-sum DP over doubled
/// (hence integral) ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if !(var > 0.0) {
        return 1.0;
    }
    let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

fn result(r: Ranked, exact: bool) -> WilcoxonResult {
    let p = if exact {
        exact_p(&r.ranks, r.w_plus)
    } else {
        normal_p(&r.ranks, r.w_plus)
    };
    WilcoxonResult {
        n: r.ranks.len(),
        w_plus: r.w_plus,
        w_minus: r.w_minus,
        statistic: r.w_plus.min(r.w_minus),
        p_two_sided: p,
        exact,
        degenerate: false,
    }
}

/// Signed-rank test on differences; zeros are dropped, exact for
/// `n ≤ 20`, normal approximation above.
pub fn wilcoxon_from_diffs(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Argument("Wilcoxon differences must be finite".into()));
    }
    let r = rank_diffs(diffs);
    if r.ranks.is_empty() {
        return Ok(degenerate());
    }
    let exact = r.ranks.len() <= EXACT_MAX_N;
    Ok(result(r, exact))
}

/// The normal approximation regardless of `n`.
pub fn wilcoxon_normal(diffs: &[f64]) -> Result<WilcoxonResult> {
    let r = rank_diffs(diffs);
    if r.ranks.is_empty() {
        return Ok(degenerate());
    }
    Ok(result(r, false))
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired samples of different lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    wilcoxon_from_diffs(&diffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let r = wilcoxon_from_diffs(&[1.5, -0.5, 2.0, 3.0]).unwrap();
        assert_eq!(r.w_minus, 1.0);
        assert_eq!(r.w_plus, 9.0);
        assert_eq!(r.p_two_sided, 0.25);
        assert!(r.exact && !r.degenerate);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }
}
