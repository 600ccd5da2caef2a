//! Independent reference implementations shared by integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use cast_core::corpus::Item;
use cast_core::numcore::Tensor;
use cast_core::relminer::{CompScorer, FileScorer, MineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Literal, quadratic-everything relation mining. Self-pair candidates are
/// never scored and self-pairs are removed from the result.
pub fn reference_relations(
    seqs: &[Vec<usize>],
    items: &[Item],
    emb: &Tensor,
    scorer: &dyn CompScorer,
    cfg: &MineConfig,
) -> BTreeMap<(usize, usize), f64> {
    let n = items.len();
    let mut freq = vec![vec![0u32; n]; n];
    for s in seqs {
        for p in 0..s.len() {
            for q in 0..s.len() {
                if p < q && q - p < cfg.window {
                    freq[s[p]][s[q]] += 1;
                }
            }
        }
    }
    let mut rc: Vec<(usize, usize, f64)> = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && freq[a][b] >= cfg.theta_f {
                if let Some(w) = scorer.score(&items[a], &items[b]).unwrap() {
                    if w >= cfg.theta_c {
                        rc.push((a, b, w));
                    }
                }
            }
        }
    }
    let mut rs: Vec<(usize, usize)> = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let (x, y) = (emb.row(a), emb.row(b));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sim = if nx == 0.0 || ny == 0.0 { 0.0 } else { dot / (nx * ny) };
            if sim >= cfg.theta_s {
                rs.push((a, b));
            }
        }
    }
    let mut expanded = rc.clone();
    for &(i, j, w) in &rc {
        for &(x, k) in &rs {
            if x == i {
                expanded.push((k, j, w));
            }
        }
    }
    let mut sym = expanded.clone();
    for &(i, j, w) in &expanded {
        if !sym.contains(&(j, i, w)) {
            sym.push((j, i, w));
        }
    }
    let mut out: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, j, w) in sym {
        if i == j {
            continue;
        }
        let e = out.entry((i, j)).or_insert(w);
        *e = e.max(w);
    }
    out
}

pub struct RandomMiningCase {
    pub seqs: Vec<Vec<usize>>,
    pub items: Vec<Item>,
    pub emb: Tensor,
    pub scorer: FileScorer,
    pub cfg: MineConfig,
}

/// Tiny corpus with at most 8 items and 5 sequences, a random score table
/// and embeddings that include near-duplicates.
pub fn random_mining_case(seed: u64) -> RandomMiningCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8usize);
    let items: Vec<Item> = (0..n)
        .map(|i| {
            let mut it = Item::bare(&format!("v{i}"));
            it.index = i;
            it
        })
        .collect();
    let num_seqs = rng.random_range(1..=5usize);
    let seqs: Vec<Vec<usize>> = (0..num_seqs)
        .map(|_| {
            let len = rng.random_range(1..=8usize);
            (0..len).map(|_| rng.random_range(0..n)).collect()
        })
        .collect();
    let dim = 3;
    let mut data: Vec<f64> = Vec::with_capacity(n * dim);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.4) {
            // perturbed copy of an earlier row
            let src = rng.random_range(0..i);
            for d in 0..dim {
                let v = data[src * dim + d] + rng.random_range(-0.15..0.15);
                data.push(v);
            }
        } else if rng.random_bool(0.1) {
            data.extend(std::iter::repeat_n(0.0, dim));
        } else {
            for _ in 0..dim {
                data.push(rng.random_range(-1.0..1.0));
            }
        }
    }
    let emb = Tensor::matrix(n, dim, data).unwrap();
    let grid = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9, 1.0];
    let mut table = HashMap::new();
    for a in 0..n {
        for b in 0..n {
            if rng.random_bool(0.7) {
                table.insert((format!("v{a}"), format!("v{b}")), grid[rng.random_range(0..grid.len())]);
            }
        }
    }
    let cfg = MineConfig {
        window: rng.random_range(2..=4),
        theta_f: rng.random_range(1..=2),
        theta_c: [0.3, 0.5, 0.7][rng.random_range(0..3)],
        theta_s: [0.6, 0.85, 0.95][rng.random_range(0..3)],
        full_subst_scan: rng.random_bool(0.5),
    };
    RandomMiningCase {
        seqs,
        items,
        emb,
        scorer: FileScorer::from_map(table),
        cfg,
    }
}
