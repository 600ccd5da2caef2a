use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::error::{Error, Result};

pub const MOCK_MATCH_SCORE: f64 = 0.9;
pub const MOCK_MISMATCH_SCORE: f64 = 0.1;

/// Complementarity scorer. `Ok(None)` means the pair was skipped.
pub trait CompScorer: Sync {
    fn score(&self, a: &Item, b: &Item) -> Result<Option<f64>>;

    /// Upper bound on concurrent `score` calls.
    fn concurrency(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Mock,
    File {
        path: PathBuf,
    },
    Http {
        url: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default = "default_token_env")]
        token_env: String,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_concurrency")]
        concurrency: usize,
    },
}

fn default_token_env() -> String {
    "SCORER_API_KEY".into()
}
fn default_retries() -> u32 {
    4
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_concurrency() -> usize {
    4
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScorerConfig::Mock => Ok(()),
            ScorerConfig::File { path } if path.as_os_str().is_empty() => {
                Err(Error::Invalid("file scorer needs a path".into()))
            }
            ScorerConfig::File { .. } => Ok(()),
            ScorerConfig::Http { url, concurrency, .. } => {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    return Err(Error::Invalid(format!("scorer url must be http(s): {url}")));
                }
                if *concurrency == 0 {
                    return Err(Error::Invalid("scorer concurrency must be at least 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self, items: &[Item]) -> Result<Box<dyn CompScorer>> {
        self.validate()?;
        Ok(match self {
            ScorerConfig::Mock => Box::new(MockScorer),
            ScorerConfig::File { path } => Box::new(FileScorer::load(path, items)?),
            ScorerConfig::Http {
                url,
                model,
                token_env,
                max_retries,
                backoff_ms,
                timeout_secs,
                concurrency,
            } => Box::new(HttpScorer::new(HttpScorerConfig {
                url: url.clone(),
                model: model.clone(),
                token: std::env::var(token_env).ok(),
                max_retries: *max_retries,
                backoff: Duration::from_millis(*backoff_ms),
                timeout: Duration::from_secs(*timeout_secs),
                concurrency: *concurrency,
            })),
        })
    }
}

/// Scores 0.9 when both items carry the same non-empty trailing category.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

impl CompScorer for MockScorer {
    fn score(&self, a: &Item, b: &Item) -> Result<Option<f64>> {
        let shared = match (a.categories.last(), b.categories.last()) {
            (Some(x), Some(y)) => !x.is_empty() && x == y,
            _ => false,
        };
        Ok(Some(if shared { MOCK_MATCH_SCORE } else { MOCK_MISMATCH_SCORE }))
    }
}

#[derive(Debug, Deserialize)]
struct ScoreLine {
    i: String,
    j: String,
    w: f64,
}

/// Precomputed scores keyed by item id. Lookup tries `(a, b)` then `(b, a)`;
/// absent pairs score 0.
#[derive(Debug, Clone, Default)]
pub struct FileScorer {
    scores: HashMap<(String, String), f64>,
}

impl FileScorer {
    pub fn load(path: &Path, _items: &[Item]) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut scores = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            if !(0.0..=1.0).contains(&rec.w) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("score {} outside [0, 1]", rec.w),
                });
            }
            scores.insert((rec.i, rec.j), rec.w);
        }
        Ok(FileScorer { scores })
    }

    pub fn from_map(scores: HashMap<(String, String), f64>) -> Self {
        FileScorer { scores }
    }
}

impl CompScorer for FileScorer {
    fn score(&self, a: &Item, b: &Item) -> Result<Option<f64>> {
        let key = (a.item_id.clone(), b.item_id.clone());
        let rev = (b.item_id.clone(), a.item_id.clone());
        Ok(Some(self.scores.get(&key).or_else(|| self.scores.get(&rev)).copied().unwrap_or(0.0)))
    }
}

fn product_line(item: &Item) -> String {
    let title = if item.title.is_empty() { &item.item_id } else { &item.title };
    let cats = if item.categories.is_empty() {
        "unknown".to_string()
    } else {
        item.categories.join(" > ")
    };
    let brand = if item.brand.is_empty() { "unknown" } else { &item.brand };
    format!("[{title}, {cats}, {brand}]")
}

/// Fills the complementarity prompt for one ordered pair.
pub fn build_prompt(a: &Item, b: &Item) -> String {
    format!(
        "Task Description: You are an assistant who determines to what extent two products are complementary on a [0, 1] scale.\n\
         \n\
         Evaluation Criteria:\n\
         1. Direct Interaction: Are they often used together for the same intent?\n\
         2. Functional Enhancement: Does one enhance the functionality of the other?\n\
         3. Market Relationship: Considerations of market co-occurrence.\n\
         \n\
         Input:\n\
         - Product 1: {}\n\
         - Product 2: {}\n\
         \n\
         Output Requirements:\n\
         1. Step-by-step reasoning referencing the criteria.\n\
         2. A single numeric score from 0 to 1.\n",
        product_line(a),
        product_line(b)
    )
}

/// Last numeric token of a model reply, if it lies in `[0, 1]`.
pub fn parse_score(text: &str) -> Option<f64> {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let re = NUM.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?|\.\d+").expect("static regex"));
    let last = re.find_iter(text).last()?;
    let v: f64 = last.as_str().parse().ok()?;
    (0.0..=1.0).contains(&v).then_some(v)
}

#[derive(Debug, Clone)]
pub struct HttpScorerConfig {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub max_retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
    pub concurrency: usize,
}

/// Chat-completions client.
pub struct HttpScorer {
    cfg: HttpScorerConfig,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(cfg: HttpScorerConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpScorer { cfg, agent }
    }

    fn request(&self, prompt: &str) -> std::result::Result<Option<String>, (bool, String)> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.cfg.url).header("Content-Type", "application/json");
        if let Some(t) = &self.cfg.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}")));
        }
        let v: serde_json::Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(e) => {
                log::warn!("scorer returned a non-JSON body: {e}");
                return Ok(None);
            }
        };
        Ok(v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string))
    }
}

impl CompScorer for HttpScorer {
    fn score(&self, a: &Item, b: &Item) -> Result<Option<f64>> {
        let prompt = build_prompt(a, b);
        let mut attempt = 0;
        loop {
            match self.request(&prompt) {
                Ok(Some(text)) => {
                    let s = parse_score(&text);
                    if s.is_none() {
                        log::warn!("unparseable score for ({}, {}); pair skipped", a.item_id, b.item_id);
                    }
                    return Ok(s);
                }
                Ok(None) => {
                    log::warn!("reply without content for ({}, {}); pair skipped", a.item_id, b.item_id);
                    return Ok(None);
                }
                Err((retryable, msg)) => {
                    if !retryable || attempt >= self.cfg.max_retries {
                        return Err(Error::Scorer(format!(
                            "pair ({}, {}) failed after {} attempts: {msg}",
                            a.item_id,
                            b.item_id,
                            attempt + 1
                        )));
                    }
                    let wait = self.cfg.backoff.saturating_mul(1 << attempt.min(16));
                    log::debug!("scorer retry {} after {msg}; waiting {:?}", attempt + 1, wait);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }

    fn concurrency(&self) -> usize {
        self.cfg.concurrency.max(1)
    }
}

/// Scores `pairs` with at most `scorer.concurrency()` calls in flight.
/// The output is aligned with `pairs`.
pub fn score_pairs(scorer: &dyn CompScorer, items: &[Item], pairs: &[(usize, usize)]) -> Result<Vec<Option<f64>>> {
    let one = |&(i, j): &(usize, usize)| -> Result<Option<f64>> {
        match scorer.score(&items[i], &items[j])? {
            Some(v) if !(0.0..=1.0).contains(&v) => {
                log::warn!("score {v} outside [0, 1] for ({i}, {j}); pair skipped");
                Ok(None)
            }
            other => Ok(other),
        }
    };
    let limit = scorer.concurrency();
    if limit <= 1 {
        return pairs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit)
        .build()
        .map_err(|e| Error::Scorer(e.to_string()))?;
    pool.install(|| pairs.par_iter().map(one).collect())
}
