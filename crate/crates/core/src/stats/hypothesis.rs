// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wilcoxon signed-rank, Spearman and Bonferroni.

use itertools::Itertools;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::bootstrap::draw_rng;
use crate::error::{FixlabError, Result};

/// Largest nonzero-difference count for which Wilcoxon p is exact.
pub const WILCOXON_EXACT_MAX: usize = 12;
/// Largest sample size for which Spearman p enumerates all permutations.
pub const SPEARMAN_EXACT_MAX: usize = 8;
/// Largest sample size for which Spearman p uses Monte Carlo permutations.
pub const SPEARMAN_PERMUTATION_MAX: usize = 30;
/// Monte Carlo permutations for `9..=30`.
pub const SPEARMAN_MC_DRAWS: usize = 20_000;

/// Mid-ranks (1-based) of `x`.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences used.
    pub n: usize,
    pub n_zero: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    /// Evidence that differences tend to be positive.
    pub p_greater: f64,
    pub p_less: f64,
    pub exact: bool,
}

/// Signed-rank test on paired differences (zeros dropped, ties mid-ranked).
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(FixlabError::Stats("non-finite difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n < 5 {
        return Err(FixlabError::Stats(format!(
            "Wilcoxon needs at least 5 nonzero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_greater, p_less, exact) = if n <= WILCOXON_EXACT_MAX {
        // doubled mid-ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let obs = (w_plus * 2.0).round() as usize;
        let ge: f64 = counts[obs..].iter().sum();
        let le: f64 = counts[..=obs].iter().sum();
        (ge / all, le / all, true)
    } else {
        let mut ties = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        for (_, g) in &sorted.iter().chunk_by(|v| v.to_bits()) {
            let t = g.count() as f64;
            ties += t * t * t - t;
        }
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let norm = Normal::new(0.0, 1.0).expect("standard normal");
        (1.0 - norm.cdf(z), norm.cdf(z), false)
    };
    Ok(WilcoxonResult {
        n,
        n_zero: diffs.len() - n,
        w_plus,
        w_minus,
        p_two_sided: (2.0 * p_greater.min(p_less)).min(1.0),
        p_greater,
        p_less,
        exact,
    })
}

/// Direction of a one-sided alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// rho < 0
    Negative,
    /// rho > 0
    Positive,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    ExactPermutation,
    MonteCarloPermutation,
    TApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
    pub method: PMethod,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with a one- or two-sided p-value.
///
/// Exact permutation for `n <= 8`, seeded Monte Carlo permutation up to 30,
/// Student-t approximation beyond.
pub fn spearman(x: &[f64], y: &[f64], alt: Alternative, seed: u64) -> Result<SpearmanResult> {
    let n = x.len();
    if n != y.len() {
        return Err(FixlabError::Stats("x and y differ in length".into()));
    }
    if n < 5 {
        return Err(FixlabError::Stats(format!("Spearman needs n >= 5, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(FixlabError::Stats("non-finite input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(FixlabError::Stats("rho undefined: constant input".into()));
    }
    let rx = midranks(x);
    let ry = midranks(y);
    let rho = pearson(&rx, &ry);
    const EPS: f64 = 1e-12;
    let extreme = |r: f64| match alt {
        Alternative::Negative => r <= rho + EPS,
        Alternative::Positive => r >= rho - EPS,
        Alternative::TwoSided => r.abs() >= rho.abs() - EPS,
    };

    let (p, method) = if n <= SPEARMAN_EXACT_MAX {
        let mut hits = 0u64;
        let mut total = 0u64;
        let mut perm = vec![0.0; n];
        for order in (0..n).permutations(n) {
            for (dst, &src) in perm.iter_mut().zip(&order) {
                *dst = ry[src];
            }
            total += 1;
            hits += u64::from(extreme(pearson(&rx, &perm)));
        }
        (hits as f64 / total as f64, PMethod::ExactPermutation)
    } else if n <= SPEARMAN_PERMUTATION_MAX {
        let mut hits = 0usize;
        let mut perm = ry.clone();
        for d in 0..SPEARMAN_MC_DRAWS {
            let mut rng = draw_rng(seed, d as u64);
            perm.shuffle(&mut rng);
            hits += usize::from(extreme(pearson(&rx, &perm)));
        }
        // count the observed arrangement
        (
            (hits + 1) as f64 / (SPEARMAN_MC_DRAWS + 1) as f64,
            PMethod::MonteCarloPermutation,
        )
    } else {
        let df = (n - 2) as f64;
        let p = if rho.abs() >= 1.0 {
            let hit = match alt {
                Alternative::Negative => rho < 0.0,
                Alternative::Positive => rho > 0.0,
                Alternative::TwoSided => true,
            };
            if hit {
                0.0
            } else {
                1.0
            }
        } else {
            let t = rho * (df / (1.0 - rho * rho)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
            match alt {
                Alternative::Negative => dist.cdf(t),
                Alternative::Positive => 1.0 - dist.cdf(t),
                Alternative::TwoSided => 2.0 * (1.0 - dist.cdf(t.abs())),
            }
        };
        (p, PMethod::TApproximation)
    };
    Ok(SpearmanResult { rho, p, n, method })
}

/// One-sided test of a negative monotone relation.
pub fn spearman_one_sided(x: &[f64], y: &[f64], seed: u64) -> Result<SpearmanResult> {
    spearman(x, y, Alternative::Negative, seed)
}

/// `min(1, p * N)` with `N = p_values.len()`.
pub fn bonferroni(p_values: &[f64]) -> Result<Vec<f64>> {
    if p_values.is_empty() {
        return Err(FixlabError::Stats("no p-values to correct".into()));
    }
    bonferroni_n(p_values, p_values.len())
}

/// `min(1, p * n_tests)` for a family of `n_tests` (which may exceed the
/// number of values supplied).
pub fn bonferroni_n(p_values: &[f64], n_tests: usize) -> Result<Vec<f64>> {
    if n_tests < p_values.len() || n_tests == 0 {
        return Err(FixlabError::Stats("family size below number of tests".into()));
    }
    p_values
        .iter()
        .map(|&p| {
            if (0.0..=1.0).contains(&p) {
                Ok((p * n_tests as f64).min(1.0))
            } else {
                Err(FixlabError::Stats(format!("p-value {p} outside [0, 1]")))
            }
        })
        .collect()
}
