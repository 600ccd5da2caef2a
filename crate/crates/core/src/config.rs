//! Run configuration: one JSON document covering every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{SynthConfig, DEFAULT_K_CORE, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::opq::{OpqConfig, DEFAULT_CODEBOOK_SIZE, DEFAULT_D_TEXT, DEFAULT_SUBSPACES};
use crate::relminer::{MineConfig, ScorerConfig};
use crate::train::TrainConfig;

/// Input files. Unset paths resolve inside the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// `user \t item \t timestamp` file; default `<out>/raw/interactions.tsv`.
    pub interactions: Option<PathBuf>,
    /// Item metadata JSON Lines; default `<out>/raw/items.jsonl`.
    pub items: Option<PathBuf>,
    /// Precomputed item embeddings as JSON Lines `{item_id, embedding}`.
    /// When unset, the deterministic mock embedder is used.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub k_core: usize,
    pub max_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            k_core: DEFAULT_K_CORE,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerSection {
    pub window: usize,
    pub theta_f: u32,
    pub theta_c: f64,
    pub theta_s: f64,
    pub full_subst_scan: bool,
    pub scorer: ScorerConfig,
}

impl Default for MinerSection {
    fn default() -> Self {
        let m = MineConfig::default();
        MinerSection {
            window: m.window,
            theta_f: m.theta_f,
            theta_c: m.theta_c,
            theta_s: m.theta_s,
            full_subst_scan: m.full_subst_scan,
            scorer: ScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpqSection {
    /// Dimension of mock embeddings before PCA.
    pub mock_dim: usize,
    pub d_text: usize,
    pub subspaces: usize,
    pub codebook_size: usize,
    pub outer_iters: usize,
    pub kmeans_iters: usize,
    pub tol: f64,
}

impl Default for OpqSection {
    fn default() -> Self {
        let o = OpqConfig::default();
        OpqSection {
            mock_dim: 256,
            d_text: DEFAULT_D_TEXT,
            subspaces: DEFAULT_SUBSPACES,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            outer_iters: o.outer_iters,
            kmeans_iters: o.kmeans_iters,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub d_align: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub lambda: f64,
    /// Smoothing constant inside the log of the transition prior.
    pub eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 128,
            d_align: 256,
            layers: 2,
            heads: 2,
            d_ffn: 256,
            dropout: 0.2,
            lambda: 1.2,
            eps: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            gamma: t.gamma,
            tau: 0.07,
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Rank previously seen items last.
    pub exclude_history: bool,
    /// Random pairs drawn for the transition analysis.
    pub random_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![5, 10, 20],
            exclude_history: false,
            random_pairs: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Projected text only, no code tables.
    pub no_sem_codes: bool,
    /// Mean-pooled code embeddings instead of the alignment MLP.
    pub no_alignment: bool,
    /// `λ = γ = 0`.
    pub no_trans_guide: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub corpus: CorpusSection,
    pub miner: MinerSection,
    pub opq: OpqSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablation: AblationFlags,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{section}: {}", strip_prefix(&e)));
            }
        };
        check("synth", self.synth.validate());
        check("miner", self.mine_config().validate());
        check("miner.scorer", self.miner.scorer.validate());
        check("train", self.train_config().validate());
        check("model", self.model_config(1).validate());

        let c = &self.corpus;
        if c.k_core == 0 {
            errs.push("corpus: k_core must be at least 1".into());
        }
        if c.max_len == 0 {
            errs.push("corpus: max_len must be positive".into());
        }
        let o = &self.opq;
        if o.d_text == 0 || o.subspaces == 0 || !o.d_text.is_multiple_of(o.subspaces) {
            errs.push(format!("opq: d_text {} must be a positive multiple of subspaces {}", o.d_text, o.subspaces));
        }
        if o.codebook_size < 2 || o.codebook_size > u16::MAX as usize + 1 {
            errs.push(format!("opq: codebook_size {} outside [2, 65536]", o.codebook_size));
        }
        if self.paths.embeddings.is_none() && o.mock_dim < o.d_text {
            errs.push(format!("opq: mock_dim {} is smaller than d_text {}", o.mock_dim, o.d_text));
        }
        if o.outer_iters == 0 || o.kmeans_iters == 0 {
            errs.push("opq: iteration counts must be positive".into());
        }
        if !(o.tol >= 0.0) {
            errs.push(format!("opq: tol {} must be non-negative", o.tol));
        }
        if !(self.model.eps > 0.0) {
            errs.push(format!("model: eps {} must be positive", self.model.eps));
        }
        if !self.model.lambda.is_finite() || self.model.lambda < 0.0 {
            errs.push(format!("model: lambda {} must be non-negative", self.model.lambda));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            errs.push("eval: ks must be a non-empty list of positive cutoffs".into());
        }
        if self.ablation.no_sem_codes && self.ablation.no_alignment {
            errs.push("ablation: no_sem_codes and no_alignment are mutually exclusive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errs.join("\n")))
        }
    }

    pub fn variant(&self) -> Variant {
        if self.ablation.no_sem_codes {
            Variant::NoSemCodes
        } else if self.ablation.no_alignment {
            Variant::NoAlignment
        } else {
            Variant::Full
        }
    }

    pub fn lambda(&self) -> f64 {
        if self.ablation.no_trans_guide {
            0.0
        } else {
            self.model.lambda
        }
    }

    pub fn gamma(&self) -> f64 {
        if self.ablation.no_trans_guide {
            0.0
        } else {
            self.train.gamma
        }
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_items,
            d_text: self.opq.d_text,
            subspaces: self.opq.subspaces,
            codebook_size: self.opq.codebook_size,
            d: m.d,
            d_align: m.d_align,
            layers: m.layers,
            heads: m.heads,
            d_ffn: m.d_ffn,
            max_len: self.corpus.max_len,
            dropout: m.dropout,
            lambda: self.lambda(),
            tau: self.train.tau,
            variant: self.variant(),
        }
    }

    pub fn mine_config(&self) -> MineConfig {
        let m = &self.miner;
        MineConfig {
            window: m.window,
            theta_f: m.theta_f,
            theta_c: m.theta_c,
            theta_s: m.theta_s,
            full_subst_scan: m.full_subst_scan,
        }
    }

    pub fn opq_config(&self) -> OpqConfig {
        OpqConfig {
            subspaces: self.opq.subspaces,
            codebook_size: self.opq.codebook_size,
            outer_iters: self.opq.outer_iters,
            kmeans_iters: self.opq.kmeans_iters,
            tol: self.opq.tol,
            seed: self.seed,
            freeze_rotation: false,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            gamma: self.gamma(),
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip_norm: t.clip_norm,
            seed: self.seed,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Invalid(m) => m.clone(),
        other => other.to_string(),
    }
}
