//! The sequential recommender: code embeddings fused with projected text
//! embeddings, a learnable token-transition tensor and a causal transformer
//! whose attention logits are biased by token transition scores.

mod checkpoint;
mod prior;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::opq::CodeAssignment;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use prior::init_transition_prior;

pub const INIT_STD: f64 = 0.02;

/// Item representation variant; `Full` is the complete model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Projected text embedding only, no code tables.
    NoSemCodes,
    /// Mean-pooled code embeddings added to the projected text embedding.
    NoAlignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_items: usize,
    pub d_text: usize,
    pub subspaces: usize,
    pub codebook_size: usize,
    pub d: usize,
    /// Hidden width of the alignment MLP.
    pub d_align: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub tau: f64,
    #[serde(default)]
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("num_items", self.num_items),
            ("d_text", self.d_text),
            ("subspaces", self.subspaces),
            ("codebook_size", self.codebook_size),
            ("d", self.d),
            ("d_align", self.d_align),
            ("heads", self.heads),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.d.is_multiple_of(self.heads) {
            errs.push(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.tau > 0.0) {
            errs.push(format!("tau must be positive, got {}", self.tau));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            errs.push(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errs.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    f1: usize,
    fb1: usize,
    f2: usize,
    fb2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    code_tables: usize,
    w_proj: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    pos: usize,
    transition: usize,
    omega: usize,
    layers: Vec<LayerLayout>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let data = match init {
            Init::Normal => (0..rows * cols).map(|_| self.normal.sample(&mut self.rng)).collect(),
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
        };
        self.names.push(name);
        self.params.push(Tensor::matrix(rows, cols, data).expect("shape matches data"));
        self.params.len() - 1
    }
}

/// Rows of a stacked batch belonging to each window.
fn spans(windows: &[Vec<usize>]) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(windows.len());
    let mut start = 0;
    for w in windows {
        out.push(start..start + w.len());
        start += w.len();
    }
    out
}

/// Output of one transformer block.
pub struct BlockOutput {
    pub out: Var,
    /// Attention weights per window, then per head, each `n × n`.
    pub weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct CastModel {
    pub cfg: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    layout: Layout,
    codes: Vec<usize>,
    text: Tensor,
}

impl CastModel {
    /// Builds a model with seeded normal initialization. `prior` replaces the
    /// transition tensor (`D × C²`); without it the tensor starts at zero.
    pub fn new(cfg: ModelConfig, codes: &CodeAssignment, text: Tensor, prior: Option<Tensor>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (v, dd, c, d) = (cfg.num_items, cfg.subspaces, cfg.codebook_size, cfg.d);
        if codes.rows != v || codes.subspaces != dd || codes.codebook_size != c {
            return Err(Error::Invalid(format!(
                "codes are {}x{} over {} centroids, model expects {}x{} over {}",
                codes.rows, codes.subspaces, codes.codebook_size, v, dd, c
            )));
        }
        if let Some(&bad) = codes.codes.iter().find(|&&x| x >= c) {
            return Err(Error::Invalid(format!("code {bad} out of range for codebook size {c}")));
        }
        if text.shape() != [v, cfg.d_text] {
            return Err(Error::Invalid(format!(
                "text embeddings have shape {:?}, expected [{v}, {}]",
                text.shape(),
                cfg.d_text
            )));
        }
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let code_tables = b.add("code_tables".into(), dd * c, d, Init::Normal);
        let w_proj = b.add("w_proj".into(), cfg.d_text, d, Init::Normal);
        let w1 = b.add("align.w1".into(), (dd + 1) * d, cfg.d_align, Init::Normal);
        let b1 = b.add("align.b1".into(), 1, cfg.d_align, Init::Zeros);
        let w2 = b.add("align.w2".into(), cfg.d_align, d, Init::Normal);
        let b2 = b.add("align.b2".into(), 1, d, Init::Zeros);
        let pos = b.add("pos".into(), cfg.max_len, d, Init::Normal);
        let transition = b.add("transition".into(), dd, c * c, Init::Zeros);
        let omega = b.add("omega_logits".into(), 1, dd, Init::Zeros);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerLayout {
                wq: b.add(p("wq"), d, d, Init::Normal),
                bq: b.add(p("bq"), 1, d, Init::Zeros),
                wk: b.add(p("wk"), d, d, Init::Normal),
                bk: b.add(p("bk"), 1, d, Init::Zeros),
                wv: b.add(p("wv"), d, d, Init::Normal),
                bv: b.add(p("bv"), 1, d, Init::Zeros),
                wo: b.add(p("wo"), d, d, Init::Normal),
                bo: b.add(p("bo"), 1, d, Init::Zeros),
                ln1_g: b.add(p("ln1.gamma"), 1, d, Init::Ones),
                ln1_b: b.add(p("ln1.beta"), 1, d, Init::Zeros),
                f1: b.add(p("ffn.w1"), d, cfg.d_ffn, Init::Normal),
                fb1: b.add(p("ffn.b1"), 1, cfg.d_ffn, Init::Zeros),
                f2: b.add(p("ffn.w2"), cfg.d_ffn, d, Init::Normal),
                fb2: b.add(p("ffn.b2"), 1, d, Init::Zeros),
                ln2_g: b.add(p("ln2.gamma"), 1, d, Init::Ones),
                ln2_b: b.add(p("ln2.beta"), 1, d, Init::Zeros),
            });
        }
        let mut model = CastModel {
            cfg,
            params: b.params,
            names: b.names,
            layout: Layout {
                code_tables,
                w_proj,
                w1,
                b1,
                w2,
                b2,
                pos,
                transition,
                omega,
                layers,
            },
            codes: codes.codes.clone(),
            text,
        };
        if let Some(t) = prior {
            model.set_transition(t)?;
        }
        Ok(model)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn item_codes(&self, i: usize) -> &[usize] {
        let dd = self.cfg.subspaces;
        &self.codes[i * dd..(i + 1) * dd]
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn transition(&self) -> &Tensor {
        &self.params[self.layout.transition]
    }

    pub fn set_transition(&mut self, t: Tensor) -> Result<()> {
        let want = [self.cfg.subspaces, self.cfg.codebook_size * self.cfg.codebook_size];
        if t.shape() != want {
            return Err(Error::Invalid(format!("transition tensor shape {:?}, expected {:?}", t.shape(), want)));
        }
        self.params[self.layout.transition] = t;
        Ok(())
    }

    pub fn omega_logits_index(&self) -> usize {
        self.layout.omega
    }

    pub fn transition_index(&self) -> usize {
        self.layout.transition
    }

    /// Registers every parameter on the tape, in declaration order.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Representations of `items` as rows of a `len × d` matrix.
    pub fn item_representations(
        &self,
        g: &mut Graph,
        pv: &[Var],
        items: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (dd, c, d) = (self.cfg.subspaces, self.cfg.codebook_size, self.cfg.d);
        let l = &self.layout;
        if let Some(&bad) = items.iter().find(|&&i| i >= self.cfg.num_items) {
            return Err(Error::Invalid(format!("item {bad} out of range")));
        }
        let text = if items.len() == self.cfg.num_items && items.iter().enumerate().all(|(k, &i)| k == i) {
            self.text.clone()
        } else {
            let mut data = Vec::with_capacity(items.len() * self.cfg.d_text);
            for &i in items {
                data.extend_from_slice(self.text.row(i));
            }
            Tensor::matrix(items.len(), self.cfg.d_text, data)?
        };
        let text = g.constant(text)?;
        let z = g.matmul(text, pv[l.w_proj])?;
        if self.cfg.variant == Variant::NoSemCodes {
            return Ok(z);
        }
        let idx: Vec<usize> = items
            .iter()
            .flat_map(|&i| (0..dd).map(move |k| (k, i)))
            .map(|(k, i)| k * c + self.codes[i * dd + k])
            .collect();
        let e = g.gather_rows(pv[l.code_tables], idx)?;
        let flat = g.reshape(e, vec![items.len(), dd * d])?;
        match self.cfg.variant {
            Variant::NoAlignment => {
                let mut pool = vec![0.0; dd * d * d];
                for k in 0..dd {
                    for j in 0..d {
                        pool[(k * d + j) * d + j] = 1.0 / dd as f64;
                    }
                }
                let pool = g.constant(Tensor::matrix(dd * d, d, pool)?)?;
                let pooled = g.matmul(flat, pool)?;
                g.add(pooled, z)
            }
            _ => {
                let x = g.concat_cols(&[flat, z])?;
                let h = g.matmul(x, pv[l.w1])?;
                let h = g.add(h, pv[l.b1])?;
                let h = g.gelu(h)?;
                let h = g.dropout(h, self.cfg.dropout, train, rng)?;
                let h = g.matmul(h, pv[l.w2])?;
                g.add(h, pv[l.b2])
            }
        }
    }

    /// Representations of every item, `|V| × d`.
    pub fn all_item_representations(&self, g: &mut Graph, pv: &[Var], train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let items: Vec<usize> = (0..self.cfg.num_items).collect();
        self.item_representations(g, pv, &items, train, rng)
    }

    /// Standardized transition tables `P` (`D × C²`) and subspace weights as a
    /// `D × 1` column.
    pub fn transition_view(&self, g: &mut Graph, pv: &[Var]) -> Result<(Var, Var)> {
        let p = g.zscore_rows(pv[self.layout.transition])?;
        let w = g.softmax(pv[self.layout.omega], None)?;
        let w = g.transpose(w)?;
        Ok((p, w))
    }

    /// `T(a, b)` for each pair, as an `n × 1` column.
    pub fn transition_scores(&self, g: &mut Graph, p: Var, w: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (dd, c) = (self.cfg.subspaces, self.cfg.codebook_size);
        if pairs.is_empty() {
            return Err(Error::Invalid("no pairs to score".into()));
        }
        let mut idx = Vec::with_capacity(pairs.len() * dd);
        for &(a, b) in pairs {
            let (ca, cb) = (self.item_codes(a), self.item_codes(b));
            for k in 0..dd {
                idx.push(k * c * c + ca[k] * c + cb[k]);
            }
        }
        let gathered = g.gather(p, idx, vec![pairs.len(), dd])?;
        g.matmul(gathered, w)
    }

    /// Attention biases `lambda · T(v_j → v_i)` at `[i, j]` for each window.
    pub fn transition_bias(&self, g: &mut Graph, p: Var, w: Var, windows: &[Vec<usize>], lambda: f64) -> Result<Vec<Option<Var>>> {
        let mut pairs = Vec::new();
        for win in windows {
            for &cur in win {
                for &hist in win {
                    pairs.push((hist, cur));
                }
            }
        }
        if pairs.is_empty() {
            return Ok(vec![None; windows.len()]);
        }
        let scores = self.transition_scores(g, p, w, &pairs)?;
        let scores = g.scale(scores, lambda)?;
        let mut out = Vec::with_capacity(windows.len());
        let mut start = 0;
        for win in windows {
            let n = win.len();
            let s = g.slice(scores, start..start + n * n, 0..1)?;
            out.push(Some(g.reshape(s, vec![n, n])?));
            start += n * n;
        }
        Ok(out)
    }

    /// One post-norm transformer block over stacked windows `x` (`Σn × d`).
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        g: &mut Graph,
        pv: &[Var],
        layer: usize,
        x: Var,
        windows: &[Range<usize>],
        biases: &[Option<Var>],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BlockOutput> {
        let p = self.layout.layers.get(layer).ok_or_else(|| Error::Invalid(format!("no layer {layer}")))?;
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let proj = |g: &mut Graph, w: usize, b: usize| -> Result<Var> {
            let y = g.matmul(x, pv[w])?;
            g.add(y, pv[b])
        };
        let q = proj(g, p.wq, p.bq)?;
        let k = proj(g, p.wk, p.bk)?;
        let v = proj(g, p.wv, p.bv)?;

        let mut per_window = Vec::with_capacity(windows.len());
        let mut weights = Vec::with_capacity(windows.len());
        for (wi, rows) in windows.iter().enumerate() {
            let n = rows.len();
            let keep: Vec<bool> = (0..n * n).map(|e| e % n <= e / n).collect();
            let mut heads_out = Vec::with_capacity(heads);
            let mut head_weights = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = g.slice(q, rows.clone(), cols.clone())?;
                let kh = g.slice(k, rows.clone(), cols.clone())?;
                let vh = g.slice(v, rows.clone(), cols)?;
                let kt = g.transpose(kh)?;
                let logits = g.matmul(qh, kt)?;
                let mut logits = g.scale(logits, scale)?;
                if let Some(bias) = biases.get(wi).copied().flatten() {
                    logits = g.add(logits, bias)?;
                }
                let alpha = g.softmax(logits, Some(&keep))?;
                heads_out.push(g.matmul(alpha, vh)?);
                head_weights.push(alpha);
            }
            per_window.push(if heads == 1 { heads_out[0] } else { g.concat_cols(&heads_out)? });
            weights.push(head_weights);
        }
        let attn = if per_window.len() == 1 {
            per_window[0]
        } else {
            g.concat_rows(&per_window)?
        };
        let a = g.matmul(attn, pv[p.wo])?;
        let a = g.add(a, pv[p.bo])?;
        let a = g.dropout(a, self.cfg.dropout, train, rng)?;
        let r = g.add(x, a)?;
        let x1 = g.layer_norm(r, pv[p.ln1_g], pv[p.ln1_b])?;

        let f = g.matmul(x1, pv[p.f1])?;
        let f = g.add(f, pv[p.fb1])?;
        let f = g.gelu(f)?;
        let f = g.dropout(f, self.cfg.dropout, train, rng)?;
        let f = g.matmul(f, pv[p.f2])?;
        let f = g.add(f, pv[p.fb2])?;
        let r = g.add(x1, f)?;
        let out = g.layer_norm(r, pv[p.ln2_g], pv[p.ln2_b])?;
        Ok(BlockOutput { out, weights })
    }

    /// Encodes item windows and returns the hidden states at `outputs`
    /// (`(window, position)` pairs) as rows of an `n_out × d` matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph,
        pv: &[Var],
        hall: Var,
        windows: &[Vec<usize>],
        outputs: &[(usize, usize)],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if windows.is_empty() || outputs.is_empty() {
            return Err(Error::Invalid("nothing to encode".into()));
        }
        for w in windows {
            if w.is_empty() {
                return Err(Error::Invalid("empty prefix".into()));
            }
            if w.len() > self.cfg.max_len {
                return Err(Error::Invalid(format!("window of {} exceeds max_len {}", w.len(), self.cfg.max_len)));
            }
        }
        let spans = spans(windows);
        let flat: Vec<usize> = windows.iter().flatten().copied().collect();
        let positions: Vec<usize> = windows.iter().flat_map(|w| 0..w.len()).collect();
        let h = g.gather_rows(hall, flat)?;
        let pe = g.gather_rows(pv[self.layout.pos], positions)?;
        let mut x = g.add(h, pe)?;

        let biases = if self.cfg.lambda != 0.0 && self.cfg.layers > 0 {
            let (p, w) = self.transition_view(g, pv)?;
            self.transition_bias(g, p, w, windows, self.cfg.lambda)?
        } else {
            vec![None; windows.len()]
        };
        for l in 0..self.cfg.layers {
            x = self.block(g, pv, l, x, &spans, &biases, train, rng)?.out;
        }
        let mut rows = Vec::with_capacity(outputs.len());
        for &(w, p) in outputs {
            let span = spans
                .get(w)
                .filter(|s| p < s.len())
                .ok_or_else(|| Error::Invalid(format!("output ({w}, {p}) outside the batch")))?;
            rows.push(span.start + p);
        }
        g.gather_rows(x, rows)
    }

    /// `s · hᵀ / τ` for every candidate.
    pub fn score_candidates(&self, g: &mut Graph, s: Var, hall: Var) -> Result<Var> {
        let ht = g.transpose(hall)?;
        let logits = g.matmul(s, ht)?;
        g.scale(logits, 1.0 / self.cfg.tau)
    }

    /// Full-catalogue logits for each prefix (most recent `max_len` items
    /// are used), `n × |V|`.
    pub fn predict(&self, prefixes: &[Vec<usize>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pv = self.bind(&mut g)?;
        let hall = self.all_item_representations(&mut g, &pv, false, &mut rng)?;
        let windows: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| p[p.len().saturating_sub(self.cfg.max_len)..].to_vec())
            .collect();
        let outputs: Vec<(usize, usize)> = windows.iter().enumerate().map(|(w, win)| (w, win.len().saturating_sub(1))).collect();
        let s = self.encode(&mut g, &pv, hall, &windows, &outputs, false, &mut rng)?;
        let logits = self.score_candidates(&mut g, s, hall)?;
        Ok(g.value(logits).clone())
    }

    /// Standardized tables and softmaxed subspace weights as plain values.
    pub fn transition_tables(&self) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let t = g.constant(self.transition().clone())?;
        let o = g.constant(self.params[self.layout.omega].clone())?;
        let p = g.zscore_rows(t)?;
        let w = g.softmax(o, None)?;
        Ok((g.value(p).clone(), g.value(w).data().to_vec()))
    }

    /// `T(a, b)` for many pairs without building a tape.
    pub fn transition_score_values(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let (p, w) = self.transition_tables()?;
        let c = self.cfg.codebook_size;
        Ok(pairs
            .iter()
            .map(|&(a, b)| transition_score(self.item_codes(a), self.item_codes(b), &p, &w, c))
            .collect())
    }
}

/// `Σ_k w_k · P_k[a_k, b_k]` with `P` stored as `D × C²`.
pub fn transition_score(a: &[usize], b: &[usize], p: &Tensor, w: &[f64], c: usize) -> f64 {
    (0..w.len()).map(|k| w[k] * p.data()[k * c * c + a[k] * c + b[k]]).sum()
}
