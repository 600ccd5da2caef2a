//! File-based pipeline stages. Each stage reads its inputs from an output
//! directory, writes its artifacts there and leaves a `<artifact>.meta.json`
//! sidecar with the config hash and input digests.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, RunConfig};
use crate::corpus::{self, generate_synthetic, Dataset, DatasetSplits, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, TransitionDistributions};
use crate::model::{self, CastModel, CheckpointMeta};
use crate::numcore::Tensor;
use crate::opq::{self, MockEmbedder};
use crate::relminer::{self, MineReport, RelationSet};
use crate::train::{self, EpochLog};

pub const RAW_DIR: &str = "raw";
pub const DATA_DIR: &str = "data";
pub const SPLITS_DIR: &str = "data/splits";
pub const ITEMS: &str = "data/items.jsonl";
pub const SEQUENCES: &str = "data/sequences.jsonl";
pub const EMBEDDINGS: &str = "embeddings.emb";
pub const TEXT: &str = "text.emb";
pub const CODEBOOK: &str = "codebook.opq";
pub const CODES: &str = "codes.sid";
pub const RELATIONS: &str = "relations.jsonl";
pub const CHECKPOINT: &str = "model.cast";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_VALID: &str = "metrics_valid.json";
pub const METRICS_TEST: &str = "metrics_test.json";
pub const TRANSITIONS: &str = "transitions.json";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    stage: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
}

/// A run rooted at one output directory.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: PathBuf,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out)?;
        Ok(Run {
            cfg,
            out: out.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn interactions_path(&self) -> PathBuf {
        self.cfg
            .paths
            .interactions
            .clone()
            .unwrap_or_else(|| self.out.join(RAW_DIR).join("interactions.tsv"))
    }

    fn raw_items_path(&self) -> PathBuf {
        self.cfg
            .paths
            .items
            .clone()
            .unwrap_or_else(|| self.out.join(RAW_DIR).join("items.jsonl"))
    }

    fn require(&self, path: &Path, producer: &'static str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer,
            })
        }
    }

    fn input(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        self.require(&p, producer)?;
        Ok(p)
    }

    fn begin(&self, stage: &str) {
        log::info!("{stage}: config {} seed {}", self.cfg.hash(), self.cfg.seed);
    }

    fn sidecar(&self, stage: &str, output: &Path, inputs: &[&Path]) -> Result<()> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            let key = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            digests.insert(key, hex_digest(&fs::read(p)?));
        }
        let meta = Sidecar {
            stage: stage.to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            inputs: digests,
        };
        let mut name = output.as_os_str().to_owned();
        name.push(".meta.json");
        fs::write(PathBuf::from(name), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Generates the planted-bundle corpus into `raw/`.
    pub fn synth(&self) -> Result<SyntheticCorpus> {
        self.begin("synth");
        let corpus = generate_synthetic(&self.cfg.synth)?;
        let dir = self.out.join(RAW_DIR);
        corpus.write_raw(&dir)?;
        let tsv = dir.join("interactions.tsv");
        self.sidecar("synth", &tsv, &[])?;
        self.sidecar("synth", &dir.join("items.jsonl"), &[])?;
        log::info!(
            "synth: {} items, {} users, {} bundles",
            corpus.dataset.num_items(),
            corpus.dataset.num_users(),
            corpus.bundles.len()
        );
        Ok(corpus)
    }

    pub fn prepare_data(&self) -> Result<Dataset> {
        self.begin("prepare-data");
        let (tsv, items) = (self.interactions_path(), self.raw_items_path());
        self.require(&tsv, "synth")?;
        self.require(&items, "synth")?;
        let raw = corpus::load_corpus(&tsv, &items)?;
        let dataset = corpus::build_dataset(&raw, self.cfg.corpus.k_core)?;
        let splits = corpus::split_leave_one_out(&dataset.sequences, self.cfg.corpus.max_len)?;
        corpus::save_dataset(&self.path(DATA_DIR), &dataset)?;
        corpus::write_splits(&self.path(SPLITS_DIR), &dataset, &splits)?;
        for out in [ITEMS, SEQUENCES] {
            self.sidecar("prepare-data", &self.path(out), &[&tsv, &items])?;
        }
        log::info!(
            "prepare-data: {} users, {} items, {} interactions",
            dataset.num_users(),
            dataset.num_items(),
            dataset.num_interactions()
        );
        Ok(dataset)
    }

    fn dataset(&self) -> Result<(Dataset, DatasetSplits)> {
        self.input(ITEMS, "prepare-data")?;
        self.input(SEQUENCES, "prepare-data")?;
        let dataset = corpus::load_dataset(&self.path(DATA_DIR))?;
        let splits = corpus::split_leave_one_out(&dataset.sequences, self.cfg.corpus.max_len)?;
        Ok((dataset, splits))
    }

    fn raw_embeddings(&self, dataset: &Dataset) -> Result<Tensor> {
        match &self.cfg.paths.embeddings {
            None => Ok(MockEmbedder::new(self.cfg.opq.mock_dim).embed_items(&dataset.items)),
            Some(p) => load_embedding_jsonl(p, dataset),
        }
    }

    /// Embeds item text, reduces it with PCA and quantizes it into codes.
    pub fn build_codes(&self) -> Result<opq::CodeAssignment> {
        self.begin("build-codes");
        let (dataset, _) = self.dataset()?;
        let items_path = self.path(ITEMS);
        let raw = self.raw_embeddings(&dataset)?;
        let text = opq::pca_reduce(&raw, self.cfg.opq.d_text)?;
        let (codebook, report) = opq::train_opq(&text, &self.cfg.opq_config())?;
        let codes = codebook.encode(&text)?;
        log::info!(
            "build-codes: {} outer iterations, error {:.4} -> {:.4}",
            report.errors.len(),
            report.errors.first().copied().unwrap_or(0.0),
            report.errors.last().copied().unwrap_or(0.0)
        );
        opq::write_embeddings(&self.path(EMBEDDINGS), &raw)?;
        opq::write_embeddings(&self.path(TEXT), &text)?;
        opq::write_codebook(&self.path(CODEBOOK), &codebook)?;
        opq::write_codes(&self.path(CODES), &codes)?;
        let mut inputs = vec![items_path.as_path()];
        if let Some(p) = &self.cfg.paths.embeddings {
            inputs.push(p);
        }
        for out in [EMBEDDINGS, TEXT, CODEBOOK, CODES] {
            self.sidecar("build-codes", &self.path(out), &inputs)?;
        }
        Ok(codes)
    }

    pub fn mine_relations(&self) -> Result<(RelationSet, MineReport)> {
        self.begin("mine-relations");
        let (dataset, splits) = self.dataset()?;
        let text_path = self.input(TEXT, "build-codes")?;
        let text = opq::read_embeddings(&text_path)?;
        let scorer = self.cfg.miner.scorer.build(&dataset.items)?;
        let (rel, report) =
            relminer::mine_relations(&splits.train, &dataset.items, &text, scorer.as_ref(), &self.cfg.mine_config())?;
        log::info!(
            "mine-relations: {} candidates, {} kept, {} skipped, {} substitutable, {} final",
            report.candidates,
            report.kept,
            report.skipped,
            report.subst_pairs,
            report.final_pairs
        );
        let out = self.path(RELATIONS);
        relminer::write_relations(&out, &rel, &dataset.items)?;
        self.sidecar("mine-relations", &out, &[&self.path(SEQUENCES), &text_path])?;
        Ok((rel, report))
    }

    /// Builds a prior-initialized model from the stored artifacts.
    pub fn init_model(&self) -> Result<CastModel> {
        let (dataset, _) = self.dataset()?;
        let codes = opq::read_codes(&self.input(CODES, "build-codes")?)?;
        let text = opq::read_embeddings(&self.input(TEXT, "build-codes")?)?;
        let rel = relminer::read_relations(&self.input(RELATIONS, "mine-relations")?, &dataset.items)?;
        let prior = model::init_transition_prior(&rel.comp, &codes, self.cfg.model.eps)?;
        CastModel::new(
            self.cfg.model_config(dataset.num_items()),
            &codes,
            text,
            Some(prior),
            self.cfg.seed,
        )
    }

    pub fn train(&self) -> Result<Vec<EpochLog>> {
        self.begin("train");
        let (_, splits) = self.dataset()?;
        let model = self.init_model()?;
        let tc = self.cfg.train_config();
        let fit = train::fit(model, &splits, &tc, Some(&self.path(TRAIN_LOG)))?;
        let meta = CheckpointMeta {
            seed: self.cfg.seed,
            epoch: fit.best_epoch,
            valid_ndcg10: fit.best_valid_ndcg10,
        };
        let out = self.path(CHECKPOINT);
        model::save_checkpoint(&out, &fit.best, &meta)?;
        let inputs = [CODES, TEXT, RELATIONS, SEQUENCES].map(|n| self.path(n));
        let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        self.sidecar("train", &out, &inputs)?;
        log::info!(
            "train: best epoch {} valid ndcg@10 {:.4}",
            fit.best_epoch,
            fit.best_valid_ndcg10
        );
        Ok(fit.log)
    }

    fn load_model(&self, dataset: &Dataset) -> Result<CastModel> {
        let (model, _) = model::load_checkpoint(&self.input(CHECKPOINT, "train")?)?;
        if model.cfg.num_items != dataset.num_items() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} items but the dataset has {}",
                model.cfg.num_items,
                dataset.num_items()
            )));
        }
        Ok(model)
    }

    /// Full-ranking metrics on the validation and test splits.
    pub fn evaluate(&self) -> Result<(MetricReport, MetricReport)> {
        self.begin("evaluate");
        let (dataset, splits) = self.dataset()?;
        let model = self.load_model(&dataset)?;
        let ks = &self.cfg.eval.ks;
        let excl = self.cfg.eval.exclude_history;
        let valid = eval::evaluate(&model, "valid", &splits.valid, ks, excl)?;
        let test = eval::evaluate(&model, "test", &splits.test, ks, excl)?;
        for (name, r) in [(METRICS_VALID, &valid), (METRICS_TEST, &test)] {
            let out = self.path(name);
            fs::write(&out, serde_json::to_string_pretty(r)? + "\n")?;
            self.sidecar("evaluate", &out, &[&self.path(CHECKPOINT), &self.path(SEQUENCES)])?;
        }
        for (k, m) in &test.k {
            log::info!("evaluate: test recall@{k} {:.4} ndcg@{k} {:.4}", m.recall, m.ndcg);
        }
        Ok((valid, test))
    }

    /// Transition scores of mined complementary pairs against random pairs.
    pub fn analyze_transitions(&self) -> Result<TransitionDistributions> {
        self.begin("analyze-transitions");
        let (dataset, _) = self.dataset()?;
        let model = self.load_model(&dataset)?;
        let rel_path = self.input(RELATIONS, "mine-relations")?;
        let rel = relminer::read_relations(&rel_path, &dataset.items)?;
        let pairs: Vec<(usize, usize)> = rel.comp.keys().copied().collect();
        let dist = eval::transition_analysis(&model, &pairs, self.cfg.eval.random_pairs, self.cfg.seed)?;
        let out = self.path(TRANSITIONS);
        fs::write(&out, serde_json::to_string_pretty(&dist)? + "\n")?;
        self.sidecar("analyze-transitions", &out, &[&self.path(CHECKPOINT), &rel_path])?;
        log::info!(
            "analyze-transitions: comp mean {:.4}, random mean {:.4}, delta {:.4}",
            dist.comp.mean,
            dist.random.mean,
            dist.delta
        );
        Ok(dist)
    }

    /// Runs every stage after `synth` in order.
    pub fn run_all(&self) -> Result<MetricReport> {
        self.prepare_data()?;
        self.build_codes()?;
        self.mine_relations()?;
        self.train()?;
        let (_, test) = self.evaluate()?;
        self.analyze_transitions()?;
        Ok(test)
    }
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    item_id: String,
    embedding: Vec<f64>,
}

/// Reads `{item_id, embedding}` lines and orders rows by dataset index.
pub fn load_embedding_jsonl(path: &Path, dataset: &Dataset) -> Result<Tensor> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if *dim.get_or_insert(rec.embedding.len()) != rec.embedding.len() {
            return Err(parse(format!("embedding of {} has the wrong length", rec.item_id)));
        }
        by_id.insert(rec.item_id, rec.embedding);
    }
    let dim = dim.ok_or_else(|| Error::EmptyDataset(format!("{} has no embeddings", path.display())))?;
    let mut data = Vec::with_capacity(dataset.num_items() * dim);
    for it in &dataset.items {
        let v = by_id
            .get(&it.item_id)
            .ok_or_else(|| Error::Invalid(format!("no embedding for item {}", it.item_id)))?;
        data.extend_from_slice(v);
    }
    Tensor::matrix(dataset.num_items(), dim, data)
}
