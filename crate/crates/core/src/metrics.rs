//! Ranking metrics and prefix-entropy stratification.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math;

/// Cut-offs reported as `Acc@k`.
pub const ACC_CUTOFFS: [usize; 4] = [1, 3, 5, 10];
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.75, 0.80, 0.85, 0.90];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub mrr: f64,
}

impl EvalReport {
    pub fn acc(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.acc1),
            3 => Some(self.acc3),
            5 => Some(self.acc5),
            10 => Some(self.acc10),
            _ => None,
        }
    }
}

/// 1-indexed rank of `target` when candidates are sorted by descending
/// probability with ties broken by ascending id.
pub fn rank_of(probs: &[f64], target: usize) -> usize {
    let p = probs[target];
    1 + probs.iter().enumerate().filter(|&(l, &q)| q > p || (q == p && l < target)).count()
}

/// `Acc@k` is the fraction of ranks `≤ k`; MRR is the mean of `1 / rank`.
pub fn compute_metrics(ranks: &[usize]) -> Result<EvalReport> {
    ensure!(!ranks.is_empty(), "cannot compute metrics over zero ranks");
    ensure!(ranks.iter().all(|&r| r >= 1), "ranks are 1-indexed");
    let n = ranks.len() as f64;
    let acc = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(EvalReport {
        n_samples: ranks.len(),
        acc1: acc(1),
        acc3: acc(3),
        acc5: acc(5),
        acc10: acc(10),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
    })
}

/// Normalised Shannon entropy of the location frequencies in `prefix`,
/// `H / ln m` with `m` distinct locations; 0 when `m = 1`.
pub fn prefix_entropy(prefix: &[usize]) -> Result<f64> {
    ensure!(!prefix.is_empty(), "prefix entropy needs at least one prior location");
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in prefix {
        *counts.entry(l).or_insert(0) += 1;
    }
    if counts.len() == 1 {
        return Ok(0.0);
    }
    let n = prefix.len() as f64;
    let h: f64 = counts.values().map(|&c| c as f64 / n).map(|p| -p * math::ln(p)).sum();
    Ok((h / math::ln(counts.len() as f64)).clamp(0.0, 1.0))
}

/// Metrics over the high-entropy steps (`Ĥ ≥ threshold`) and their
/// complement. Empty subsets carry no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub threshold: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub high: Option<EvalReport>,
    pub low: Option<EvalReport>,
}

pub fn entropy_stratified(ranks: &[usize], entropies: &[f64], thresholds: &[f64]) -> Result<Vec<StratumReport>> {
    ensure!(ranks.len() == entropies.len(), "{} ranks but {} entropies", ranks.len(), entropies.len());
    thresholds
        .iter()
        .map(|&threshold| {
            let (mut high, mut low) = (Vec::new(), Vec::new());
            for (&r, &h) in ranks.iter().zip(entropies) {
                if h >= threshold {
                    high.push(r)
                } else {
                    low.push(r)
                }
            }
            let summarize = |v: &[usize]| if v.is_empty() { Ok(None) } else { compute_metrics(v).map(Some) };
            Ok(StratumReport {
                threshold,
                n_high: high.len(),
                n_low: low.len(),
                high: summarize(&high)?,
                low: summarize(&low)?,
            })
        })
        .collect()
}
