//! Joint next-item / transition-consistency training with Adam and early
//! stopping on validation NDCG@10.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetSplits;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::CastModel;
use crate::numcore::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Windows per batch.
    pub batch_size: usize,
    pub gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 1024,
            gamma: 1.0,
            max_epochs: 200,
            patience: 10,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            errs.push(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.max_epochs == 0 {
            errs.push("max_epochs must be positive".to_string());
        }
        if self.patience == 0 {
            errs.push("patience must be at least 1".to_string());
        }
        if !(self.clip_norm > 0.0) {
            errs.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errs.join("; ")))
        }
    }
}

/// A causal window over a training sequence with supervised positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub items: Vec<usize>,
    /// `(position, next item)` pairs.
    pub outputs: Vec<(usize, usize)>,
}

/// Covers every prefix of every sequence exactly once. Prefixes that fit in
/// `max_len` share one window; longer ones get their own trailing window.
pub fn build_windows(sequences: &[Vec<usize>], max_len: usize) -> Vec<TrainWindow> {
    let mut out = Vec::new();
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        let head = (seq.len() - 1).min(max_len);
        out.push(TrainWindow {
            items: seq[..head].to_vec(),
            outputs: (0..head).map(|p| (p, seq[p + 1])).collect(),
        });
        for t in max_len + 1..seq.len() {
            out.push(TrainWindow {
                items: seq[t - max_len..t].to_vec(),
                outputs: vec![(max_len - 1, seq[t])],
            });
        }
    }
    out
}

/// One mini-batch with its sampled negatives fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub windows: Vec<Vec<usize>>,
    /// `(window, position)` for every supervised output.
    pub outputs: Vec<(usize, usize)>,
    pub targets: Vec<usize>,
    /// One in-batch negative per output, `None` if the batch has no item
    /// other than the target.
    pub negatives: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(windows: &[&TrainWindow], rng: &mut ChaCha8Rng) -> Self {
        let mut items = BTreeSet::new();
        let mut ws = Vec::with_capacity(windows.len());
        let mut outputs = Vec::new();
        let mut targets = Vec::new();
        for (wi, w) in windows.iter().enumerate() {
            items.extend(w.items.iter().copied());
            for &(p, t) in &w.outputs {
                items.insert(t);
                outputs.push((wi, p));
                targets.push(t);
            }
            ws.push(w.items.clone());
        }
        let pool: Vec<usize> = items.into_iter().collect();
        let negatives = targets
            .iter()
            .map(|&t| {
                if pool.len() < 2 {
                    return None;
                }
                // uniform over pool \ {t}
                let k = rng.random_range(0..pool.len() - 1);
                let pos_t = pool.binary_search(&t).ok();
                Some(match pos_t {
                    Some(pt) if k >= pt => pool[k + 1],
                    _ => pool[k],
                })
            })
            .collect();
        Batch {
            windows: ws,
            outputs,
            targets,
            negatives,
        }
    }
}

/// Cross-entropy of `s · hᵀ / τ` against `targets`, normalized over all items.
pub fn ce_loss(g: &mut Graph, s: Var, hall: Var, targets: &[usize], tau: f64) -> Result<Var> {
    let ht = g.transpose(hall)?;
    let logits = g.matmul(s, ht)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    g.cross_entropy(logits, targets)
}

/// Mean of `−log σ(pos − neg)` over aligned score columns.
pub fn trans_consistency_loss(g: &mut Graph, pos: Var, neg: Var) -> Result<Var> {
    let diff = g.sub(pos, neg)?;
    let ls = g.log_sigmoid(diff)?;
    let m = g.mean(ls)?;
    g.scale(m, -1.0)
}

pub fn total_loss(g: &mut Graph, ce: Var, trans: Option<Var>, gamma: f64) -> Result<Var> {
    match trans {
        Some(t) if gamma != 0.0 => {
            let wt = g.scale(t, gamma)?;
            g.add(ce, wt)
        }
        _ => Ok(ce),
    }
}

pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub trans: Option<Var>,
}

/// Builds the full objective for `batch` on the tape.
pub fn objective(
    model: &CastModel,
    g: &mut Graph,
    pv: &[Var],
    batch: &Batch,
    gamma: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let hall = model.all_item_representations(g, pv, train, rng)?;
    let s = model.encode(g, pv, hall, &batch.windows, &batch.outputs, train, rng)?;
    let ce = ce_loss(g, s, hall, &batch.targets, model.cfg.tau)?;
    let mut trans = None;
    if gamma != 0.0 {
        let mut pos_pairs = Vec::new();
        let mut neg_pairs = Vec::new();
        for ((&(w, p), &t), neg) in batch.outputs.iter().zip(&batch.targets).zip(&batch.negatives) {
            if let Some(n) = *neg {
                let prev = batch.windows[w][p];
                pos_pairs.push((prev, t));
                neg_pairs.push((prev, n));
            }
        }
        if pos_pairs.is_empty() {
            log::warn!("batch has no in-batch negatives; transition loss skipped");
        } else {
            let (pt, w) = model.transition_view(g, pv)?;
            let ps = model.transition_scores(g, pt, w, &pos_pairs)?;
            let ns = model.transition_scores(g, pt, w, &neg_pairs)?;
            trans = Some(trans_consistency_loss(g, ps, ns)?);
        }
    }
    let total = total_loss(g, ce, trans, gamma)?;
    Ok(LossParts { total, ce, trans })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// Applies one update. Non-finite gradients abort before any parameter
    /// changes, naming the offending parameter.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], names: &[String], lr: f64) -> Result<()> {
        for (k, g) in grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad(names.get(k).cloned().unwrap_or_else(|| format!("#{k}"))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a metric to maximize.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_trans: f64,
    pub valid_ndcg10: f64,
    pub seconds: f64,
}

pub struct FitResult {
    pub best: CastModel,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
    pub log: Vec<EpochLog>,
}

/// One pass over shuffled windows; returns mean CE and transition loss per
/// supervised output.
pub fn train_epoch(
    model: &mut CastModel,
    opt: &mut Adam,
    windows: &[TrainWindow],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let (mut ce_sum, mut tr_sum, mut count) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let ws: Vec<&TrainWindow> = chunk.iter().map(|&i| &windows[i]).collect();
        let batch = Batch::new(&ws, rng);
        let mut g = Graph::new();
        let pv = model.bind(&mut g)?;
        let parts = objective(model, &mut g, &pv, &batch, cfg.gamma, true, rng)?;
        let n = batch.outputs.len();
        ce_sum += g.scalar_value(parts.ce) * n as f64;
        if let Some(t) = parts.trans {
            tr_sum += g.scalar_value(t) * n as f64;
        }
        count += n;
        g.backward(parts.total)?;
        let mut grads: Vec<Vec<f64>> = pv
            .iter()
            .zip(model.params())
            .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        clip_global_norm(&mut grads, cfg.clip_norm);
        let names = model.param_names().to_vec();
        opt.update(model.params_mut(), &grads, &names, cfg.lr)?;
    }
    let denom = count.max(1) as f64;
    Ok((ce_sum / denom, tr_sum / denom))
}

/// Trains until validation NDCG@10 stops improving for `patience` epochs
/// and returns the best model seen.
pub fn fit(mut model: CastModel, splits: &DatasetSplits, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<FitResult> {
    cfg.validate()?;
    let windows = build_windows(&splits.train, model.cfg.max_len);
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no training windows".into()));
    }
    if splits.valid.is_empty() {
        return Err(Error::EmptyDataset("no validation cases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut writer = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let (ce, tr) = train_epoch(&mut model, &mut opt, &windows, cfg, &mut rng)?;
        let report = eval::evaluate(&model, "valid", &splits.valid, &[10], false)?;
        let ndcg = report.ndcg(10).unwrap_or(f64::NAN);
        if ndcg.is_nan() {
            return Err(Error::NonFinite { op: "validation ndcg" });
        }
        let entry = EpochLog {
            epoch,
            loss_ce: ce,
            loss_trans: tr,
            valid_ndcg10: ndcg,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: ce {ce:.4} trans {tr:.4} valid ndcg@10 {ndcg:.4} ({:.1}s)",
            entry.seconds
        );
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(entry);
        match stopper.observe(epoch, ndcg) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log::info!("early stop after epoch {epoch}; best epoch {}", stopper.best_epoch);
                break;
            }
        }
    }
    Ok(FitResult {
        best,
        best_epoch: stopper.best_epoch,
        best_valid_ndcg10: stopper.best,
        log,
    })
}
