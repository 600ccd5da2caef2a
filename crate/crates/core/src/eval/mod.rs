//! Full-catalogue ranking metrics and transition-score analysis.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalCase;
use crate::error::{Error, Result};
use crate::model::CastModel;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
pub const HISTOGRAM_BINS: usize = 50;
const EVAL_CHUNK: usize = 256;

/// 1-based rank of `target`; items tied with it are ranked ahead.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && s >= t)
        .count()
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub recall: f64,
    pub ndcg: f64,
    /// Same values scaled by 100 for tables.
    pub recall_x100: f64,
    pub ndcg_x100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub k: BTreeMap<usize, AtK>,
    pub users: usize,
}

impl MetricReport {
    pub fn from_ranks(split: &str, ranks: &[usize], ks: &[usize]) -> Self {
        let k = ks
            .iter()
            .map(|&k| {
                let (recall, ndcg) = (recall_at_k(ranks, k), ndcg_at_k(ranks, k));
                (
                    k,
                    AtK {
                        recall,
                        ndcg,
                        recall_x100: recall * 100.0,
                        ndcg_x100: ndcg * 100.0,
                    },
                )
            })
            .collect();
        MetricReport {
            split: split.to_string(),
            k,
            users: ranks.len(),
        }
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.k.get(&k).map(|m| m.ndcg)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.k.get(&k).map(|m| m.recall)
    }
}

/// Ranks of each case's target over the full item set. With
/// `exclude_history`, items in the prefix (other than the target) are
/// pushed to the bottom.
pub fn rank_cases(model: &CastModel, cases: &[EvalCase], exclude_history: bool) -> Result<Vec<usize>> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset("no evaluation cases".into()));
    }
    let chunks: Vec<Result<Vec<usize>>> = cases
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let prefixes: Vec<Vec<usize>> = chunk.iter().map(|c| c.prefix.clone()).collect();
            let logits = model.predict(&prefixes)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, case)| {
                    let mut row = logits.row(r).to_vec();
                    if exclude_history {
                        for &h in &case.prefix {
                            if h != case.target {
                                row[h] = f64::NEG_INFINITY;
                            }
                        }
                    }
                    rank_of_target(&row, case.target)
                })
                .collect())
        })
        .collect();
    let mut ranks = Vec::with_capacity(cases.len());
    for c in chunks {
        ranks.extend(c?);
    }
    Ok(ranks)
}

pub fn evaluate(model: &CastModel, split: &str, cases: &[EvalCase], ks: &[usize], exclude_history: bool) -> Result<MetricReport> {
    let ranks = rank_cases(model, cases, exclude_history)?;
    Ok(MetricReport::from_ranks(split, &ranks, ks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl ScoreSummary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return ScoreSummary {
                n,
                mean: 0.0,
                std: 0.0,
                median: 0.0,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        ScoreSummary {
            n,
            mean,
            std,
            median: median(xs),
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDistributions {
    pub comp: ScoreSummary,
    pub random: ScoreSummary,
    /// `comp.mean − random.mean`.
    pub delta: f64,
    /// Pooled standard deviation of the two groups.
    pub pooled_std: f64,
    /// Fraction of complementary pairs scoring above the random-pair median.
    pub comp_above_random_median: f64,
    pub bin_edges: Vec<f64>,
    pub comp_counts: Vec<usize>,
    pub random_counts: Vec<usize>,
}

fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64).floor() as isize
        } else {
            0
        };
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

/// Compares transition scores of `comp_pairs` against `n_random` uniformly
/// drawn ordered pairs of distinct items that are not in `comp_pairs`.
pub fn transition_analysis(
    model: &CastModel,
    comp_pairs: &[(usize, usize)],
    n_random: usize,
    seed: u64,
) -> Result<TransitionDistributions> {
    if comp_pairs.is_empty() {
        return Err(Error::EmptyDataset("no complementary pairs to analyse".into()));
    }
    let n = model.cfg.num_items;
    let known: HashSet<(usize, usize)> = comp_pairs.iter().copied().collect();
    if n < 2 || known.len() >= n * (n - 1) {
        return Err(Error::Invalid("no non-complementary pairs left to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_pairs = Vec::with_capacity(n_random);
    while random_pairs.len() < n_random {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !known.contains(&(a, b)) {
            random_pairs.push((a, b));
        }
    }
    let comp = model.transition_score_values(comp_pairs)?;
    let random = if random_pairs.is_empty() {
        Vec::new()
    } else {
        model.transition_score_values(&random_pairs)?
    };
    Ok(compare_distributions(&comp, &random))
}

pub fn compare_distributions(comp: &[f64], random: &[f64]) -> TransitionDistributions {
    let cs = ScoreSummary::of(comp);
    let rs = ScoreSummary::of(random);
    let (n1, n2) = (comp.len() as f64, random.len() as f64);
    let pooled_std = if n1 + n2 > 2.0 {
        let s1 = cs.std * cs.std * n1 / (n1 - 1.0).max(1.0);
        let s2 = rs.std * rs.std * n2 / (n2 - 1.0).max(1.0);
        (((n1 - 1.0).max(0.0) * s1 + (n2 - 1.0).max(0.0) * s2) / (n1 + n2 - 2.0)).sqrt()
    } else {
        0.0
    };
    let above = if comp.is_empty() {
        0.0
    } else {
        comp.iter().filter(|&&x| x > rs.median).count() as f64 / comp.len() as f64
    };
    let lo = comp.iter().chain(random).copied().fold(f64::INFINITY, f64::min);
    let hi = comp.iter().chain(random).copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|b| lo + (hi - lo) * b as f64 / HISTOGRAM_BINS as f64)
        .collect();
    TransitionDistributions {
        delta: cs.mean - rs.mean,
        pooled_std,
        comp_above_random_median: above,
        comp_counts: histogram(comp, &edges),
        random_counts: histogram(random, &edges),
        bin_edges: edges,
        comp: cs,
        random: rs,
    }
}
