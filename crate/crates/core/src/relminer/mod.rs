//! Complementary relation mining: co-purchase candidates, pairwise
//! complementarity scoring, similarity-based expansion and symmetrization.

mod scorer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub use scorer::{
    build_prompt, parse_score, score_pairs, CompScorer, FileScorer, HttpScorer, HttpScorerConfig, MockScorer,
    ScorerConfig, MOCK_MATCH_SCORE, MOCK_MISMATCH_SCORE,
};

/// Ordered `(earlier, later)` pair counts.
pub type CoPurchaseCounts = BTreeMap<(usize, usize), u32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    pub window: usize,
    pub theta_f: u32,
    pub theta_c: f64,
    pub theta_s: f64,
    /// Compare every item pair for substitutability instead of only the
    /// sources of kept relations. The mined relations are identical.
    pub full_subst_scan: bool,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            window: 3,
            theta_f: 2,
            theta_c: 0.5,
            theta_s: 0.85,
            full_subst_scan: false,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Invalid(format!("window must be >= 2, got {}", self.window)));
        }
        if self.theta_f < 1 {
            return Err(Error::Invalid("theta_f must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_c) {
            return Err(Error::Invalid(format!("theta_c {} outside [0, 1]", self.theta_c)));
        }
        if !(self.theta_s > 0.0 && self.theta_s <= 1.0) {
            return Err(Error::Invalid(format!("theta_s {} outside (0, 1]", self.theta_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationSet {
    /// Symmetric weighted complementary pairs, no self-pairs.
    pub comp: BTreeMap<(usize, usize), f64>,
    /// Substitutable pairs stored as `(min, max)`.
    pub subst: BTreeSet<(usize, usize)>,
}

impl RelationSet {
    pub fn is_symmetric(&self) -> bool {
        self.comp.iter().all(|(&(i, j), w)| self.comp.get(&(j, i)) == Some(w))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MineReport {
    pub counted_pairs: usize,
    pub candidates: usize,
    pub skipped: usize,
    pub kept: usize,
    pub subst_pairs: usize,
    pub final_pairs: usize,
}

/// Counts every ordered position pair `i < j` with `j - i < window`.
pub fn count_copurchases(sequences: &[Vec<usize>], window: usize) -> CoPurchaseCounts {
    let merged = sequences
        .par_iter()
        .fold(HashMap::<(usize, usize), u32>::new, |mut acc, seq| {
            for (p, &a) in seq.iter().enumerate() {
                for &b in seq.iter().skip(p + 1).take(window.saturating_sub(1)) {
                    *acc.entry((a, b)).or_insert(0) += 1;
                }
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    merged.into_iter().collect()
}

/// Ordered pairs with count at least `theta_f`, in key order.
pub fn candidate_pairs(counts: &CoPurchaseCounts, theta_f: u32) -> Vec<(usize, usize)> {
    counts.iter().filter(|(_, &c)| c >= theta_f).map(|(&k, _)| k).collect()
}

/// Cosine similarity; zero vectors are dissimilar to everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Substitutable pairs among all items (`sources = None`) or among pairs
/// with at least one endpoint in `sources`.
pub fn build_substitutable(embeddings: &Tensor, theta_s: f64, sources: Option<&BTreeSet<usize>>) -> BTreeSet<(usize, usize)> {
    let n = embeddings.rows();
    let rows: Vec<usize> = match sources {
        Some(s) => s.iter().copied().filter(|&i| i < n).collect(),
        None => (0..n).collect(),
    };
    let found: Vec<Vec<(usize, usize)>> = rows
        .par_iter()
        .map(|&i| {
            (0..n)
                .filter(|&j| j != i && cosine(embeddings.row(i), embeddings.row(j)) >= theta_s)
                .map(|j| (i.min(j), i.max(j)))
                .collect()
        })
        .collect();
    found.into_iter().flatten().collect()
}

/// Runs the full mining pipeline over training sequences.
pub fn mine_relations(
    sequences: &[Vec<usize>],
    items: &[Item],
    embeddings: &Tensor,
    scorer: &dyn CompScorer,
    cfg: &MineConfig,
) -> Result<(RelationSet, MineReport)> {
    cfg.validate()?;
    if embeddings.rows() != items.len() {
        return Err(Error::Invalid(format!(
            "{} embeddings for {} items",
            embeddings.rows(),
            items.len()
        )));
    }
    if let Some(&bad) = sequences.iter().flatten().find(|&&i| i >= items.len()) {
        return Err(Error::Invalid(format!("item index {bad} out of range")));
    }
    let mut report = MineReport::default();
    let counts = count_copurchases(sequences, cfg.window);
    report.counted_pairs = counts.len();
    // an item is never scored against itself
    let candidates: Vec<(usize, usize)> = candidate_pairs(&counts, cfg.theta_f)
        .into_iter()
        .filter(|&(i, j)| i != j)
        .collect();
    report.candidates = candidates.len();
    log::info!("{} co-purchase pairs, {} candidates", counts.len(), candidates.len());

    let scores = score_pairs(scorer, items, &candidates)?;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for (&(i, j), s) in candidates.iter().zip(&scores) {
        match s {
            None => report.skipped += 1,
            Some(w) if *w >= cfg.theta_c => kept.push((i, j, *w)),
            Some(_) => {}
        }
    }
    report.kept = kept.len();

    let sources: BTreeSet<usize> = kept.iter().map(|&(i, _, _)| i).collect();
    let subst = build_substitutable(embeddings, cfg.theta_s, (!cfg.full_subst_scan).then_some(&sources));
    report.subst_pairs = subst.len();

    let mut neighbours: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(a, b) in &subst {
        neighbours.entry(a).or_default().push(b);
        neighbours.entry(b).or_default().push(a);
    }

    let mut comp: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut insert = |a: usize, b: usize, w: f64| {
        if a == b {
            return;
        }
        for key in [(a, b), (b, a)] {
            let e = comp.entry(key).or_insert(w);
            if w > *e {
                *e = w;
            }
        }
    };
    for &(i, j, w) in &kept {
        insert(i, j, w);
        for &k in neighbours.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            insert(k, j, w);
        }
    }
    report.final_pairs = comp.len();
    log::info!(
        "{} pairs kept of {} scored ({} skipped); {} substitutable; {} directed relations",
        report.kept,
        report.candidates,
        report.skipped,
        report.subst_pairs,
        report.final_pairs
    );
    Ok((RelationSet { comp, subst }, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct RelationLine {
    i: String,
    j: String,
    w: f64,
}

pub fn write_relations(path: &Path, rel: &RelationSet, items: &[Item]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (&(i, j), &wt) in &rel.comp {
        let line = RelationLine {
            i: items[i].item_id.clone(),
            j: items[j].item_id.clone(),
            w: wt,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads relations written by [`write_relations`]; pairs naming unknown
/// items are an error. Substitutable pairs are not persisted.
pub fn read_relations(path: &Path, items: &[Item]) -> Result<RelationSet> {
    let index: HashMap<&str, usize> = items.iter().enumerate().map(|(k, it)| (it.item_id.as_str(), k)).collect();
    let mut comp = BTreeMap::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: RelationLine = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let i = *index.get(rec.i.as_str()).ok_or_else(|| perr(format!("unknown item {}", rec.i)))?;
        let j = *index.get(rec.j.as_str()).ok_or_else(|| perr(format!("unknown item {}", rec.j)))?;
        comp.insert((i, j), rec.w);
    }
    Ok(RelationSet {
        comp,
        subst: BTreeSet::new(),
    })
}
