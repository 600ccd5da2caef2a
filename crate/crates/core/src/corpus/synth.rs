use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionSequence, Item};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_bundles: usize,
    /// Probability that a step follows the planted bundle chain.
    pub p_bundle: f64,
    pub num_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_items: 300,
            num_bundles: 30,
            p_bundle: 0.7,
            num_users: 2000,
            min_len: 5,
            max_len: 15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bundles == 0 || self.num_items < 2 * self.num_bundles {
            return Err(Error::Invalid(format!(
                "synthetic corpus needs at least two items per bundle ({} items, {} bundles)",
                self.num_items, self.num_bundles
            )));
        }
        if !(0.0..=1.0).contains(&self.p_bundle) {
            return Err(Error::Invalid(format!("p_bundle {} outside [0, 1]", self.p_bundle)));
        }
        if self.num_users == 0 || self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Invalid("synthetic sequence lengths must satisfy 3 <= min_len <= max_len".into()));
        }
        Ok(())
    }
}

/// Generated corpus plus the ground truth that was planted in it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Items of each bundle in chain order; the chain wraps around.
    pub bundles: Vec<Vec<usize>>,
    pub bundle_of: Vec<usize>,
}

impl SyntheticCorpus {
    /// Directed chain-adjacent pairs `(a, next(a))`, the transitions walks follow.
    pub fn planted_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for b in &self.bundles {
            for (p, &a) in b.iter().enumerate() {
                out.push((a, b[(p + 1) % b.len()]));
            }
        }
        out
    }

    pub fn bundle_tag(g: usize) -> String {
        format!("bundle-{g:03}")
    }

    /// Writes `interactions.tsv` and `items.jsonl` in the raw input format.
    pub fn write_raw(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("interactions.tsv"))?);
        for seq in &self.dataset.sequences {
            for (t, &i) in seq.items.iter().enumerate() {
                let ts = seq.timestamps.as_ref().map_or(t as i64, |v| v[t]);
                writeln!(w, "{}\t{}\t{}", seq.user_id, self.dataset.items[i].item_id, ts)?;
            }
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("items.jsonl"))?);
        for it in &self.dataset.items {
            let raw = serde_json::json!({
                "item_id": it.item_id,
                "title": it.title,
                "categories": it.categories,
                "brand": it.brand,
            });
            writeln!(w, "{raw}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_items;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    // near-equal bundle sizes
    let mut bundles = Vec::with_capacity(cfg.num_bundles);
    let mut start = 0;
    for g in 0..cfg.num_bundles {
        let size = n / cfg.num_bundles + usize::from(g < n % cfg.num_bundles);
        bundles.push(perm[start..start + size].to_vec());
        start += size;
    }
    let mut bundle_of = vec![0; n];
    let mut next = vec![0; n];
    for (g, b) in bundles.iter().enumerate() {
        for (p, &i) in b.iter().enumerate() {
            bundle_of[i] = g;
            next[i] = b[(p + 1) % b.len()];
        }
    }

    let items: Vec<Item> = (0..n)
        .map(|i| Item {
            item_id: format!("item{i:05}"),
            index: i,
            title: format!("Item {i}"),
            categories: vec!["Synthetic".into(), SyntheticCorpus::bundle_tag(bundle_of[i])],
            brand: format!("Brand {}", i % 13),
        })
        .collect();

    let mut sequences = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut cur = rng.random_range(0..n);
        let mut seq = vec![cur];
        while seq.len() < len {
            cur = if rng.random_bool(cfg.p_bundle) {
                next[cur]
            } else {
                rng.random_range(0..n)
            };
            seq.push(cur);
        }
        let base = 1_600_000_000 + (u as i64) * 10_000;
        sequences.push(InteractionSequence {
            user_id: format!("user{u:05}"),
            timestamps: Some((0..seq.len() as i64).map(|t| base + t * 60).collect()),
            items: seq,
        });
    }

    Ok(SyntheticCorpus {
        dataset: Dataset { items, sequences },
        bundles,
        bundle_of,
    })
}
