use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Mid-ranks (1-based) of `values`; tied values share the mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
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
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc scores/labels", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParam("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc { positives: pos, negatives: neg });
    }
    let ranks = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = r_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    /// Mean of the resampled AUROCs.
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: Vec<f64>,
    /// Resamples that had a single class and were drawn again.
    pub redraws: usize,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Record-level bootstrap of the AUROC with a percentile interval.
///
/// Resample `b` draws from the stream `(seed, "bootstrap", b)`; a resample
/// with one class is drawn again from the same stream, so the output is a
/// pure function of the inputs.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], resamples: usize, alpha: f64, seed: u64) -> Result<BootstrapCi> {
    auroc(scores, labels)?;
    if resamples == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!("bootstrap B={resamples} alpha={alpha}")));
    }
    let n = scores.len();
    let draws: Vec<(f64, usize)> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, "bootstrap", b as u64);
            let mut redraws = 0;
            loop {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                match auroc(&s, &l) {
                    Ok(a) => return (a, redraws),
                    Err(_) => redraws += 1,
                }
            }
        })
        .collect();
    let samples: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        point: samples.iter().sum::<f64>() / resamples as f64,
        lower: quantile(&sorted, alpha / 2.0),
        upper: quantile(&sorted, 1.0 - alpha / 2.0),
        samples,
        redraws: draws.iter().map(|d| d.1).sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of sample `a`: pairs where `a` wins, ties counting one half.
    pub u: f64,
    /// One-sided p for "a is stochastically greater than b".
    pub p: f64,
    pub exact: bool,
}

/// Largest pooled size handled by exact enumeration.
pub const EXACT_MAX: usize = 20;

fn u_statistic(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let r_a: f64 = ranks[..a.len()].iter().sum();
    (r_a - (a.len() * (a.len() + 1)) as f64 / 2.0, ranks)
}

/// One-sided Mann-Whitney U test, exact up to [`EXACT_MAX`] pooled values
/// and normal approximation (tie and continuity corrected) beyond.
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.len() + b.len() <= EXACT_MAX {
        mann_whitney_exact(a, b)
    } else {
        mann_whitney_normal(a, b)
    }
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParam("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidParam("NaN in Mann-Whitney sample".into()));
    }
    Ok(())
}

/// Exact permutation p-value: the share of the `C(n, n_a)` ways of choosing
/// which pooled mid-ranks belong to `a` whose rank sum is at least the
/// observed one. Counted by dynamic programming over doubled rank sums.
pub fn mann_whitney_exact(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check(a, b)?;
    let (u, ranks) = u_statistic(a, b);
    let na = a.len();
    let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = twice.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; na + 1];
    ways[0][0] = 1.0;
    for &r in &twice {
        for k in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let observed: usize = twice[..na].iter().sum();
    let total: f64 = ways[na].iter().sum();
    let tail: f64 = ways[na][observed..].iter().sum();
    Ok(MannWhitney {
        u,
        p: tail / total,
        exact: true,
    })
}

pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check(a, b)?;
    let (u, _) = u_statistic(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let j = pooled[i..].iter().take_while(|&&v| v == pooled[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        if u > mean {
            0.0
        } else {
            1.0
        }
    } else {
        let z = (u - mean - 0.5) / var.sqrt();
        1.0 - Normal::standard().cdf(z)
    };
    Ok(MannWhitney { u, p, exact: false })
}
