//! Optimized product quantization of item text embeddings into per-item
//! semantic code sequences.
//!
//! Training alternates two steps on the row-vector convention `y = x·R`:
//!
//! 1. with the rotation fixed, run k-means independently in each of the `D`
//!    subspaces of the rotated vectors;
//! 2. with codes and centroids fixed, replace `R` by the orthogonal
//!    Procrustes solution `U·Wᵀ` where `Xᵀ·Ŷ = U·Σ·Wᵀ`.
//!
//! Both steps only accept changes that do not increase the total squared
//! quantization error, so the per-iteration error sequence is monotone.

mod io;
mod mock;
mod pca;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::{gemm, Tensor};

pub use io::{read_codebook, read_codes, read_embeddings, write_codebook, write_codes, write_embeddings};
pub use mock::{mock_embedding, MockEmbedder, MOCK_GROUP_WEIGHT};
pub use pca::{pca_reduce, PcaModel};

pub const DEFAULT_D_TEXT: usize = 128;
pub const DEFAULT_SUBSPACES: usize = 32;
pub const DEFAULT_CODEBOOK_SIZE: usize = 256;

/// Row-major `|V| × d_text` matrix; row order is the internal item index.
pub type EmbeddingMatrix = Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OpqConfig {
    pub subspaces: usize,
    pub codebook_size: usize,
    pub outer_iters: usize,
    pub kmeans_iters: usize,
    /// Stop when the relative error improvement of an outer iteration falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Keep the rotation at identity (plain product quantization).
    pub freeze_rotation: bool,
}

impl Default for OpqConfig {
    fn default() -> Self {
        OpqConfig {
            subspaces: DEFAULT_SUBSPACES,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            outer_iters: 20,
            kmeans_iters: 25,
            tol: 1e-5,
            seed: 0,
            freeze_rotation: false,
        }
    }
}

/// Learned rotation plus one codebook per subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCodebook {
    pub d_text: usize,
    pub subspaces: usize,
    pub codebook_size: usize,
    /// `d_text × d_text`, row-major.
    pub rotation: Vec<f64>,
    /// `subspaces × codebook_size × sub_dim`, row-major.
    pub centroids: Vec<f64>,
}

/// Per-item code sequences, `rows × subspaces`, every entry `< codebook_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeAssignment {
    pub rows: usize,
    pub subspaces: usize,
    pub codebook_size: usize,
    pub codes: Vec<usize>,
}

impl CodeAssignment {
    pub fn item(&self, i: usize) -> &[usize] {
        &self.codes[i * self.subspaces..(i + 1) * self.subspaces]
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Total squared quantization error after each outer iteration.
    pub errors: Vec<f64>,
    /// `max |RᵀR − I|` after each outer iteration.
    pub orthogonality: Vec<f64>,
    pub stopped_early: bool,
}

impl SemanticCodebook {
    pub fn sub_dim(&self) -> usize {
        self.d_text / self.subspaces
    }

    fn centroid(&self, k: usize, c: usize) -> &[f64] {
        let m = self.sub_dim();
        let off = (k * self.codebook_size + c) * m;
        &self.centroids[off..off + m]
    }

    pub fn rotate(&self, x: &EmbeddingMatrix) -> Result<Tensor> {
        if x.cols() != self.d_text {
            return Err(Error::Invalid(format!(
                "embedding dim {} does not match codebook dim {}",
                x.cols(),
                self.d_text
            )));
        }
        Ok(rotate(x, &self.rotation))
    }

    /// Nearest centroid per subspace on the rotated vector; ties go to the
    /// lowest centroid index.
    pub fn encode(&self, x: &EmbeddingMatrix) -> Result<CodeAssignment> {
        let y = self.rotate(x)?;
        let (d, m, c) = (self.subspaces, self.sub_dim(), self.codebook_size);
        let codes: Vec<usize> = (0..y.rows())
            .into_par_iter()
            .flat_map_iter(|i| {
                let row = y.row(i);
                (0..d)
                    .map(|k| nearest(&row[k * m..(k + 1) * m], &self.centroids[k * c * m..(k + 1) * c * m], m).0)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(CodeAssignment {
            rows: y.rows(),
            subspaces: d,
            codebook_size: c,
            codes,
        })
    }

    /// Reconstruction of each coded item in the rotated space.
    pub fn reconstruct_rotated(&self, codes: &CodeAssignment) -> Tensor {
        let mut data = Vec::with_capacity(codes.rows * self.d_text);
        for i in 0..codes.rows {
            for (k, &c) in codes.item(i).iter().enumerate() {
                data.extend_from_slice(self.centroid(k, c));
            }
        }
        Tensor::matrix(codes.rows, self.d_text, data).expect("reconstruction shape")
    }

    /// Reconstruction mapped back to the original (unrotated) space: `ŷ·Rᵀ`.
    pub fn reconstruct(&self, codes: &CodeAssignment) -> Tensor {
        let y = self.reconstruct_rotated(codes);
        let d = self.d_text;
        let mut out = vec![0.0; y.rows() * d];
        gemm(y.rows(), d, d, y.data(), false, &self.rotation, true, &mut out, false);
        Tensor::matrix(y.rows(), d, out).expect("reconstruction shape")
    }

    /// Squared error between the rotated embeddings and their reconstruction,
    /// computed on full vectors.
    pub fn reconstruction_error(&self, x: &EmbeddingMatrix, codes: &CodeAssignment) -> Result<f64> {
        let y = self.rotate(x)?;
        let r = self.reconstruct_rotated(codes);
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Sum over subspaces of the k-means objective for the given codes.
    pub fn kmeans_objective(&self, x: &EmbeddingMatrix, codes: &CodeAssignment) -> Result<f64> {
        let y = self.rotate(x)?;
        let m = self.sub_dim();
        let mut total = 0.0;
        for k in 0..self.subspaces {
            for i in 0..y.rows() {
                let sub = &y.row(i)[k * m..(k + 1) * m];
                total += sq_dist(sub, self.centroid(k, codes.item(i)[k]));
            }
        }
        Ok(total)
    }
}

fn rotate(x: &Tensor, rotation: &[f64]) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * d];
    gemm(n, d, d, x.data(), false, rotation, false, &mut out, false);
    Tensor::matrix(n, d, out).expect("rotation shape")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; lowest index wins ties.
fn nearest(x: &[f64], centroids: &[f64], m: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(m).enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Column block `k` of a row-major `n × d` matrix, as a contiguous `n × m` buffer.
fn subspace(y: &Tensor, k: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.rows() * m);
    for i in 0..y.rows() {
        out.extend_from_slice(&y.row(i)[k * m..(k + 1) * m]);
    }
    out
}

/// k-means state for one subspace.
#[derive(Debug, Clone)]
struct KMeansState {
    centroids: Vec<f64>,
    codes: Vec<usize>,
}

fn kmeans_error(data: &[f64], m: usize, state: &KMeansState) -> f64 {
    data.chunks_exact(m)
        .zip(&state.codes)
        .map(|(x, &c)| sq_dist(x, &state.centroids[c * m..(c + 1) * m]))
        .sum()
}

fn kmeans_pp_init<R: Rng>(data: &[f64], m: usize, c: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / m;
    let mut centroids = Vec::with_capacity(c * m);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * m..(first + 1) * m]);
    let mut d2: Vec<f64> = data.chunks_exact(m).map(|x| sq_dist(x, &centroids[..m])).collect();
    for _ in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let start = centroids.len();
        centroids.extend_from_slice(&data[pick * m..(pick + 1) * m]);
        let new = centroids[start..].to_vec();
        for (i, x) in data.chunks_exact(m).enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &new));
        }
    }
    centroids
}

fn assign(data: &[f64], m: usize, centroids: &[f64]) -> Vec<(usize, f64)> {
    data.par_chunks(m).map(|x| nearest(x, centroids, m)).collect()
}

/// One Lloyd step: assignment (with empty-cluster reseeding) then centroid
/// means.
fn lloyd_step(data: &[f64], m: usize, c: usize, state: &KMeansState) -> KMeansState {
    let n = data.len() / m;
    let assigned = assign(data, m, &state.centroids);
    let mut codes: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    let mut errs: Vec<f64> = assigned.iter().map(|a| a.1).collect();
    let mut counts = vec![0usize; c];
    for &k in &codes {
        counts[k] += 1;
    }
    let mut centroids = state.centroids.clone();
    for empty in 0..c {
        if counts[empty] > 0 {
            continue;
        }
        // move the worst-quantized point from a cluster that can spare it
        let worst = (0..n)
            .filter(|&i| counts[codes[i]] > 1)
            .max_by(|&a, &b| errs[a].total_cmp(&errs[b]).then(b.cmp(&a)));
        let Some(i) = worst else { break };
        counts[codes[i]] -= 1;
        codes[i] = empty;
        counts[empty] = 1;
        errs[i] = 0.0;
        centroids[empty * m..(empty + 1) * m].copy_from_slice(&data[i * m..(i + 1) * m]);
    }
    let mut sums = vec![0.0; c * m];
    for (x, &k) in data.chunks_exact(m).zip(&codes) {
        for (s, v) in sums[k * m..(k + 1) * m].iter_mut().zip(x) {
            *s += v;
        }
    }
    for k in 0..c {
        if counts[k] > 0 {
            for j in 0..m {
                centroids[k * m + j] = sums[k * m + j] / counts[k] as f64;
            }
        }
    }
    KMeansState { centroids, codes }
}

/// Runs Lloyd iterations from `state`, keeping a step only if it lowers the
/// objective. Returns the final state and its objective.
fn lloyd(data: &[f64], m: usize, c: usize, mut state: KMeansState, iters: usize) -> (KMeansState, f64) {
    let mut err = kmeans_error(data, m, &state);
    for _ in 0..iters {
        let next = lloyd_step(data, m, c, &state);
        let next_err = kmeans_error(data, m, &next);
        if next_err < err {
            let same_codes = next.codes == state.codes;
            state = next;
            err = next_err;
            if same_codes {
                break;
            }
        } else {
            break;
        }
    }
    (state, err)
}

fn total_error(y: &Tensor, m: usize, states: &[KMeansState]) -> f64 {
    states
        .iter()
        .enumerate()
        .map(|(k, s)| kmeans_error(&subspace(y, k, m), m, s))
        .sum()
}

fn orthogonality_error(r: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let dot: f64 = (0..d).map(|i| r[i * d + a] * r[i * d + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Orthogonal Procrustes: the rotation `R` minimizing `‖X·R − Ŷ‖_F`.
/// `None` when the SVD does not converge.
fn procrustes(x: &Tensor, target: &Tensor) -> Option<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut cross = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let (xr, tr) = (x.row(i), target.row(i));
        for a in 0..d {
            if xr[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                cross[(a, b)] += xr[a] * tr[b];
            }
        }
    }
    let svd = cross.try_svd(true, true, 1e-12, 10_000)?;
    let r = svd.u? * svd.v_t?;
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            out[a * d + b] = r[(a, b)];
        }
    }
    Some(out)
}

/// Trains the rotation and per-subspace codebooks.
pub fn train_opq(x: &EmbeddingMatrix, cfg: &OpqConfig) -> Result<(SemanticCodebook, TrainReport)> {
    let (n, d) = (x.rows(), x.cols());
    let (dd, c) = (cfg.subspaces, cfg.codebook_size);
    if dd == 0 || d % dd != 0 {
        return Err(Error::Invalid(format!("d_text {} is not divisible by D = {}", d, dd)));
    }
    if c == 0 || c > u16::MAX as usize + 1 {
        return Err(Error::Invalid(format!("codebook size {} out of range", c)));
    }
    if n < c {
        return Err(Error::Invalid(format!("need at least C = {} vectors, got {}", c, n)));
    }
    if cfg.outer_iters == 0 {
        return Err(Error::Invalid("OPQ needs at least one outer iteration".into()));
    }
    if !x.is_finite() {
        return Err(Error::Invalid("embeddings contain non-finite values".into()));
    }
    let m = d / dd;
    let mut rotation = vec![0.0; d * d];
    for i in 0..d {
        rotation[i * d + i] = 1.0;
    }
    let mut y = rotate(x, &rotation);
    let mut states: Vec<KMeansState> = (0..dd)
        .map(|k| {
            let data = subspace(&y, k, m);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let centroids = kmeans_pp_init(&data, m, c, &mut rng);
            let codes = assign(&data, m, &centroids).into_iter().map(|a| a.0).collect();
            KMeansState { centroids, codes }
        })
        .collect();

    let mut report = TrainReport {
        errors: Vec::new(),
        orthogonality: Vec::new(),
        stopped_early: false,
    };
    for outer in 0..cfg.outer_iters {
        let results: Vec<(KMeansState, f64)> = (0..dd)
            .into_par_iter()
            .map(|k| lloyd(&subspace(&y, k, m), m, c, states[k].clone(), cfg.kmeans_iters))
            .collect();
        states = results.into_iter().map(|r| r.0).collect();
        let err = total_error(&y, m, &states);
        if let Some(&prev) = report.errors.last() {
            if prev > 0.0 && (prev - err) / prev < cfg.tol {
                report.errors.push(err);
                report.orthogonality.push(orthogonality_error(&rotation, d));
                report.stopped_early = outer + 1 < cfg.outer_iters;
                break;
            }
        }
        report.errors.push(err);
        report.orthogonality.push(orthogonality_error(&rotation, d));
        if cfg.freeze_rotation || outer + 1 == cfg.outer_iters || err == 0.0 {
            continue;
        }
        let recon = {
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                for s in &states {
                    let code = s.codes[i];
                    data.extend_from_slice(&s.centroids[code * m..(code + 1) * m]);
                }
            }
            Tensor::matrix(n, d, data)?
        };
        let Some(candidate) = procrustes(x, &recon) else {
            log::warn!("Procrustes SVD did not converge; keeping previous rotation");
            report.stopped_early = true;
            break;
        };
        let y_new = rotate(x, &candidate);
        if total_error(&y_new, m, &states) <= err {
            rotation = candidate;
            y = y_new;
        } else {
            report.stopped_early = true;
            break;
        }
    }

    let mut centroids = Vec::with_capacity(dd * c * m);
    for s in &states {
        centroids.extend_from_slice(&s.centroids);
    }
    Ok((
        SemanticCodebook {
            d_text: d,
            subspaces: dd,
            codebook_size: c,
            rotation,
            centroids,
        },
        report,
    ))
}
