//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse and accumulates exact gradients into every node that depends on a
//! differentiable leaf.

use std::ops::Range;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

pub const GELU_COEF: f64 = 0.044_715;
/// sqrt(2 / pi)
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const ZSCORE_MIN_STD: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Slice(Var, Range<usize>, Range<usize>),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    ZScoreRows {
        x: Var,
        inv_std: Vec<Option<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        check_finite("param", &t)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::matrix(m, n, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            let data: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let t = Tensor::new(sa.to_vec(), data)?;
            return self.push("add", t, Op::Add(a, b), &[a, b]);
        }
        let (rows, cols) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        if br == 1 && bc == cols {
            let bias = self.value(b).data().to_vec();
            let mut data = self.value(a).data().to_vec();
            for r in 0..rows {
                add_into(&mut data[r * cols..(r + 1) * cols], &bias);
            }
            let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
            return self.push("add", t, Op::AddRow(a, b), &[a, b]);
        }
        Err(shape_err("add", format!("{:?} + {:?}", sa, sb)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("sub", format!("{:?} - {:?}", sa, sb)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("mul", format!("{:?} * {:?}", sa, sb)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * s).collect())?;
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let rows = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != rows {
                return Err(shape_err("concat", format!("row counts {} vs {}", rows, r)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        self.push("concat", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let cols = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != cols {
                return Err(shape_err("concat_rows", format!("col counts {} vs {}", cols, c)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Elementwise gather from the flattened input: `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err("gather", format!("index {} out of {}", bad, src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        self.push("gather", t, Op::Gather(x, idx), &[x])
    }

    /// Row lookup (embedding lookup): `out[r] = table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.dims2(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            if i >= rows {
                return Err(shape_err("embedding_lookup", format!("row {} out of {}", i, rows)));
            }
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::matrix(idx.len(), cols, data)?;
        self.push("embedding_lookup", t, Op::GatherRows(table, idx), &[table])
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(shape_err(
                "slice",
                format!("[{r},{c}] by {:?},{:?}", rows, cols),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&src.row(i)[cols.clone()]);
        }
        let t = Tensor::matrix(rows.len(), cols.len(), data)?;
        self.push("slice", t, Op::Slice(x, rows, cols), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis. `keep[i] == false` gives position `i`
    /// exactly zero weight; a fully masked row is all zeros.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if let Some(k) = keep {
            if k.len() != rows * cols {
                return Err(shape_err("softmax", format!("mask {} vs {}", k.len(), rows * cols)));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let live = |j: usize| keep.is_none_or(|k| k[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..cols {
                if live(j) {
                    let e = (row[j] - max).exp();
                    out[r * cols + j] = e;
                    z += e;
                }
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= z;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| {
                let u = GELU_SCALE * (v + GELU_COEF * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Inverted dropout. Identity (same node) when `rate == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {} not in [0,1)", rate)));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout(x, mask), &[x])
    }

    /// Layer norm over the last axis with learnable `gamma`/`beta` of shape `[1, cols]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if self.dims2(gamma) != (1, cols) || self.dims2(beta) != (1, cols) {
            return Err(shape_err("layer_norm", format!("x [{rows},{cols}] with scale/shift of wrong width")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits);
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), rows)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err("cross_entropy", format!("target {} out of {}", t, cols)));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                probs[r * cols + j] = e;
                z += e;
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p /= z;
            }
            loss += max + z.ln() - row[targets[r]];
        }
        let t = Tensor::scalar(loss / rows.max(1) as f64);
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("log", t, Op::Log(x), &[x])
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| log_sigmoid(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("log_sigmoid", t, Op::LogSigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = src.data().iter().sum::<f64>() / src.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Z-score each row with population statistics. Rows whose standard
    /// deviation falls below [`ZSCORE_MIN_STD`] map to zero.
    pub fn zscore_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let (mean, std) = mean_std(row);
            if std < ZSCORE_MIN_STD {
                inv_std.push(None);
                continue;
            }
            let is = 1.0 / std;
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * is;
            }
            inv_std.push(Some(is));
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("standardize", t, Op::ZScoreRows { x, inv_std }, &[x])
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss does not depend on any parameter".into()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward loss with respect to `v`, if `v`
    /// received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, gy, false, bv, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, gy, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, gy);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, gy);
                }
                let cols = self.dims2(*b).1;
                if let Some(gb) = self.acc(grads, *b) {
                    for row in gy.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (d, s) in gb.iter_mut().zip(gy) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, g), x) in ga.iter_mut().zip(gy).zip(bv) {
                        *d += g * x;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, g), x) in gb.iter_mut().zip(gy).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, g) in ga.iter_mut().zip(gy) {
                        *d += g * s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &gy[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &gy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&j, g) in idx.iter().zip(gy) {
                        gx[j] += g;
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                let cols = self.dims2(*table).1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &j) in idx.iter().enumerate() {
                        add_into(&mut gt[j * cols..(j + 1) * cols], &gy[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Slice(x, rows, cols) => {
                let c = self.dims2(*x).1;
                let w = cols.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, r) in rows.clone().enumerate() {
                        add_into(
                            &mut gx[r * c + cols.start..r * c + cols.end],
                            &gy[k * w..(k + 1) * w],
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += gy[b * r + a];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, gy);
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), dr) in y.chunks(cols).zip(gy.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, g), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *d += g * gelu_grad(v);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, g), m) in gx.iter_mut().zip(gy).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gv = self.value(*gamma).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &gy[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            gx[r * cols + j] += is * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in gy.chunks(cols) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.dims2(*logits).1;
                let scale = gy[0] / targets.len().max(1) as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            gl[r * cols + j] += scale * probs[r * cols + j];
                        }
                        gl[r * cols + t] -= scale;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, g), s) in gx.iter_mut().zip(gy).zip(y) {
                        *d += g * s * (1.0 - s);
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                        *d += g / v;
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, g), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *d += g * sigmoid(-v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += gy[0] / n);
                }
            }
            Op::ZScoreRows { x, inv_std } => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let Some(is) = is else { continue };
                        let gr = &gy[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gx[r * cols + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
