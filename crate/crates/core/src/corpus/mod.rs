//! Interaction and item-metadata ingestion, k-core filtering, text features
//! and leave-one-out splits.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SynthConfig, SyntheticCorpus};

pub const DEFAULT_MAX_LEN: usize = 20;
pub const DEFAULT_K_CORE: usize = 5;

/// Item metadata. `index` is the dense internal index assigned after filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    #[serde(default)]
    pub index: usize,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub brand: String,
}

impl Item {
    pub fn bare(item_id: &str) -> Self {
        Item {
            item_id: item_id.to_string(),
            index: 0,
            title: String::new(),
            categories: Vec::new(),
            brand: String::new(),
        }
    }

    pub fn text_feature(&self) -> String {
        build_text_feature(self)
    }
}

/// One user's chronologically ordered history over internal item indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
}

/// A user's history before filtering, keyed by raw item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub user_id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

#[derive(Debug, Clone, Default)]
pub struct RawCorpus {
    pub sequences: Vec<RawSequence>,
    pub items: HashMap<String, Item>,
    /// Items referenced by interactions but absent from the metadata file.
    pub missing_metadata: usize,
}

/// Filtered corpus with dense item indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub sequences: Vec<InteractionSequence>,
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    pub fn text_features(&self) -> Vec<String> {
        self.items.iter().map(build_text_feature).collect()
    }
}

/// Evaluation case: the model sees `prefix` and must rank `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    /// Full training history per user (last two interactions removed, not truncated).
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    pub max_len: usize,
}

/// Reads the interactions TSV (`user \t item \t timestamp`) and the items
/// JSON Lines file.
pub fn load_corpus(interactions_path: &Path, items_path: &Path) -> Result<RawCorpus> {
    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<String, Vec<(i64, String)>> = HashMap::new();
    let reader = BufReader::new(File::open(interactions_path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: interactions_path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated columns, got {}", fields.len())));
        }
        let ts: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp `{}`", fields[2])))?;
        let user = fields[0].trim();
        let item = fields[1].trim();
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        by_user
            .entry(user.to_string())
            .or_insert_with(|| {
                order.push(user.to_string());
                Vec::new()
            })
            .push((ts, item.to_string()));
    }

    let mut sequences = Vec::with_capacity(order.len());
    for user in order {
        let mut events = by_user.remove(&user).unwrap_or_default();
        // stable: equal timestamps keep input order
        events.sort_by_key(|(ts, _)| *ts);
        let (timestamps, items) = events.into_iter().unzip();
        sequences.push(RawSequence {
            user_id: user,
            items,
            timestamps,
        });
    }

    let mut items = HashMap::new();
    let reader = BufReader::new(File::open(items_path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: items_path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        items.entry(item.item_id.clone()).or_insert(item);
    }

    let mut missing = HashSet::new();
    for seq in &sequences {
        for it in &seq.items {
            if !items.contains_key(it) {
                missing.insert(it.clone());
            }
        }
    }
    if !missing.is_empty() {
        log::warn!("{} referenced items have no metadata; using empty text fields", missing.len());
    }
    Ok(RawCorpus {
        sequences,
        items,
        missing_metadata: missing.len(),
    })
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes, then assigns dense item indices in order of first
/// appearance.
pub fn k_core_filter(sequences: &[RawSequence], k: usize) -> Result<(Vec<RawSequence>, Vec<String>)> {
    if k == 0 {
        return Err(Error::Invalid("k-core requires k >= 1".into()));
    }
    let mut seqs: Vec<RawSequence> = sequences.to_vec();
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &seqs {
            for it in &s.items {
                *counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let weak: HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < k)
            .map(|(it, _)| it.to_string())
            .collect();
        let mut changed = !weak.is_empty();
        if changed {
            for s in &mut seqs {
                let (items, timestamps) = s
                    .items
                    .drain(..)
                    .zip(s.timestamps.drain(..))
                    .filter(|(it, _)| !weak.contains(it))
                    .unzip();
                s.items = items;
                s.timestamps = timestamps;
            }
        }
        let before = seqs.len();
        seqs.retain(|s| s.items.len() >= k);
        changed |= seqs.len() != before;
        if !changed {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::EmptyDataset(format!("{}-core filtering removed every user", k)));
    }
    let mut seen = HashSet::new();
    let mut item_order = Vec::new();
    for s in &seqs {
        for it in &s.items {
            if seen.insert(it.as_str()) {
                item_order.push(it.clone());
            }
        }
    }
    Ok((seqs, item_order))
}

/// Builds the dense dataset from a loaded corpus.
pub fn build_dataset(raw: &RawCorpus, k: usize) -> Result<Dataset> {
    let (seqs, item_order) = k_core_filter(&raw.sequences, k)?;
    let index: HashMap<&str, usize> = item_order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let items = item_order
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut item = raw.items.get(id).cloned().unwrap_or_else(|| Item::bare(id));
            item.index = i;
            item
        })
        .collect();
    let sequences = seqs
        .into_iter()
        .map(|s| InteractionSequence {
            items: s.items.iter().map(|it| index[it.as_str()]).collect(),
            user_id: s.user_id,
            timestamps: Some(s.timestamps),
        })
        .collect();
    Ok(Dataset { items, sequences })
}

/// `"title. cat1, cat2. brand."` with empty parts skipped; falls back to
/// the item id when every field is empty.
pub fn build_text_feature(item: &Item) -> String {
    let cats: Vec<&str> = item
        .categories
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .collect();
    let parts: Vec<String> = [item.title.trim().to_string(), cats.join(", "), item.brand.trim().to_string()]
        .into_iter()
        .filter(|p| !p.is_empty())
        .map(|p| format!("{p}."))
        .collect();
    if parts.is_empty() {
        item.item_id.clone()
    } else {
        parts.join(" ")
    }
}

/// Most recent `max_len` items of `items`.
pub fn truncate_recent(items: &[usize], max_len: usize) -> Vec<usize> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

/// Leave-one-out: last item is test, second-to-last is validation.
pub fn split_leave_one_out(sequences: &[InteractionSequence], max_len: usize) -> Result<DatasetSplits> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be positive".into()));
    }
    let short = sequences.iter().filter(|s| s.items.len() < 3).count();
    if short > 0 {
        return Err(Error::Invalid(format!(
            "{} of {} sequences are shorter than 3 interactions",
            short,
            sequences.len()
        )));
    }
    let mut splits = DatasetSplits {
        train: Vec::with_capacity(sequences.len()),
        valid: Vec::with_capacity(sequences.len()),
        test: Vec::with_capacity(sequences.len()),
        max_len,
    };
    for (user, s) in sequences.iter().enumerate() {
        let n = s.items.len();
        splits.train.push(s.items[..n - 2].to_vec());
        splits.valid.push(EvalCase {
            user,
            prefix: truncate_recent(&s.items[..n - 2], max_len),
            target: s.items[n - 2],
        });
        splits.test.push(EvalCase {
            user,
            prefix: truncate_recent(&s.items[..n - 1], max_len),
            target: s.items[n - 1],
        });
    }
    Ok(splits)
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    user: &'a str,
    prefix: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<&'a str>,
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` into `dir`, using
/// raw user and item ids.
pub fn write_splits(dir: &Path, dataset: &Dataset, splits: &DatasetSplits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ids = |xs: &[usize]| -> Vec<&str> { xs.iter().map(|&i| dataset.items[i].item_id.as_str()).collect() };
    let mut w = BufWriter::new(File::create(dir.join("train.jsonl"))?);
    for (user, seq) in splits.train.iter().enumerate() {
        let rec = SplitRecord {
            user: &dataset.sequences[user].user_id,
            prefix: ids(seq),
            target: None,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    for (name, cases) in [("valid.jsonl", &splits.valid), ("test.jsonl", &splits.test)] {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        for c in cases {
            let rec = SplitRecord {
                user: &dataset.sequences[c.user].user_id,
                prefix: ids(&c.prefix),
                target: Some(&dataset.items[c.target].item_id),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Writes the dataset as two JSON Lines files: `items.jsonl` (dense index
/// order) and `sequences.jsonl`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("items.jsonl"))?);
    for it in &dataset.items {
        writeln!(w, "{}", serde_json::to_string(it)?)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("sequences.jsonl"))?);
    for s in &dataset.sequences {
        writeln!(w, "{}", serde_json::to_string(s)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(out)
    }
    let items: Vec<Item> = read_lines(&dir.join("items.jsonl"))?;
    for (i, it) in items.iter().enumerate() {
        if it.index != i {
            return Err(Error::Format(format!("items.jsonl: item {} out of index order", it.item_id)));
        }
    }
    let sequences: Vec<InteractionSequence> = read_lines(&dir.join("sequences.jsonl"))?;
    if let Some(bad) = sequences.iter().flat_map(|s| &s.items).find(|&&i| i >= items.len()) {
        return Err(Error::Format(format!("sequences.jsonl references item index {}", bad)));
    }
    Ok(Dataset { items, sequences })
}
