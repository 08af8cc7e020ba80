//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] is an append-only arena of nodes; each op records its inputs by
//! [`Var`] id. Row-wise ops (softmax, layer norm, L2-normalize, cosine, row
//! sum) act over the last axis with leading axes flattened; structural ops
//! (matmul, transpose, gather, concat) require rank 2. Every forward output
//! and every backward accumulation is checked finite.

use super::{check_finite_slice, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    // the additive bias is constant: softmax backward only needs the output
    SoftmaxBias { x: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    L2Normalize { x: Var },
    CosineSim { a: Var, b: Var },
    RowSum { x: Var },
    MeanRows { x: Var, indices: Vec<usize> },
    GatherRows { x: Var, indices: Vec<usize> },
    GatherCols { x: Var, indices: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    RepeatRows { x: Var, count: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
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

    /// Gradient of the last `backward` target w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Insert a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// Insert a differentiable input (a parameter or a checked argument).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Insert a leaf honoring `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push_unchecked(t, Op::Leaf, rg)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = mm_nn(&ta.data, &tb.data, m, k, n);
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b }, needs, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(Error::Shape(format!("transpose of rank {}", t.rank())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data[i * n + j];
            }
        }
        let out = Tensor::from_vec(&[n, m], data)?;
        let needs = self.needs(x);
        self.push(out, Op::Transpose { x }, needs, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs, "add")
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("mul {:?} * {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, needs, "mul")
    }

    /// Broadcast bias add: `[..., n] + [n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.numel() != n {
            return Err(Error::Shape(format!(
                "bias length {} vs last dim {}",
                tb.numel(),
                n
            )));
        }
        let mut data = tx.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data[i % n];
        }
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias { x, bias }, needs, "add_bias")
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|v| scale * v + shift).collect();
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(out, Op::Affine { x, scale }, needs, "affine")
    }

    /// Per-row layer normalization over the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.last_dim();
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm scale/shift length {}/{} vs last dim {}",
                tg.numel(),
                tb.numel(),
                n
            )));
        }
        let rows = tx.leading();
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xs = &tx.data[r * n..(r + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..n {
                data[r * n + c] = tg.data[c] * (xs[c] - mean) * inv + tb.data[c];
            }
        }
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta }, needs, "layer_norm")
    }

    /// Softmax over the last axis of `x + bias`; `bias` is a non-differentiated
    /// additive term of the same shape (pre-softmax attention bias).
    pub fn softmax_bias(&mut self, x: Var, bias: Option<&Tensor>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(b) = bias {
            if b.shape != tx.shape {
                return Err(Error::Shape(format!(
                    "softmax bias {:?} vs logits {:?}",
                    b.shape, tx.shape
                )));
            }
        }
        let n = tx.last_dim();
        if n == 0 {
            return Err(Error::EmptyInput("softmax over empty axis"));
        }
        let rows = tx.leading();
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let base = r * n;
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                let z = tx.data[base + c] + bias.map_or(0.0, |b| b.data[base + c]);
                data[base + c] = z;
                if z > max {
                    max = z;
                }
            }
            let mut sum = 0.0;
            for c in 0..n {
                let e = (data[base + c] - max).exp();
                data[base + c] = e;
                sum += e;
            }
            for c in 0..n {
                data[base + c] /= sum;
            }
        }
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxBias { x }, needs, "softmax")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_bias(x, None)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x }, needs, "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|v| v.tanh()).collect();
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(out, Op::Tanh { x }, needs, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs, "sigmoid")
    }

    /// Rows scaled to unit L2 norm; a zero-norm row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let rows = tx.leading();
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xs = &tx.data[r * n..(r + 1) * n];
            let norm = l2(xs);
            if norm == 0.0 {
                return Err(Error::Numerical(format!("l2_normalize: zero-norm row {r}")));
            }
            for c in 0..n {
                data[r * n + c] = xs[c] / norm;
            }
        }
        let out = Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(out, Op::L2Normalize { x }, needs, "l2_normalize")
    }

    /// Row-wise cosine similarity of two `[m,n]` tensors, yielding `[m,1]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "cosine_sim {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let n = ta.last_dim();
        let rows = ta.leading();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let xs = &ta.data[r * n..(r + 1) * n];
            let ys = &tb.data[r * n..(r + 1) * n];
            let (na, nb) = (l2(xs), l2(ys));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Numerical(format!("cosine_sim: zero-norm row {r}")));
            }
            let dot: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
            data[r] = dot / (na * nb);
        }
        let out = Tensor::from_vec(&[rows, 1], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::CosineSim { a, b }, needs, "cosine_sim")
    }

    /// Sum over the last axis: `[m,n] -> [m,1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let rows = tx.leading();
        let data = (0..rows)
            .map(|r| tx.data[r * n..(r + 1) * n].iter().sum())
            .collect();
        let out = Tensor::from_vec(&[rows, 1], data)?;
        let needs = self.needs(x);
        self.push(out, Op::RowSum { x }, needs, "row_sum")
    }

    /// Mean over an index set of rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::Shape("mean_rows on non-matrix".into()));
        }
        if indices.is_empty() {
            return Err(Error::EmptyInput("mean_rows over empty index set"));
        }
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Range(format!("mean_rows index {bad} >= {m}")));
        }
        let mut data = vec![0.0; n];
        for &i in indices {
            for c in 0..n {
                data[c] += tx.data[i * n + c];
            }
        }
        let k = indices.len() as f64;
        for v in &mut data {
            *v /= k;
        }
        let out = Tensor::from_vec(&[1, n], data)?;
        let needs = self.needs(x);
        self.push(out, Op::MeanRows { x, indices: indices.to_vec() }, needs, "mean_rows")
    }

    /// Gather rows by index list: `[m,n] -> [k,n]`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::Shape("gather_rows on non-matrix".into()));
        }
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Range(format!("gather_rows index {bad} >= {m}")));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&tx.data[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec(&[indices.len(), n], data)?;
        let needs = self.needs(x);
        self.push(out, Op::GatherRows { x, indices: indices.to_vec() }, needs, "gather_rows")
    }

    /// Gather columns by index list: `[m,n] -> [m,k]`.
    pub fn gather_cols(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::Shape("gather_cols on non-matrix".into()));
        }
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::Range(format!("gather_cols index {bad} >= {n}")));
        }
        let k = indices.len();
        let mut data = Vec::with_capacity(m * k);
        for r in 0..m {
            for &j in indices {
                data.push(tx.data[r * n + j]);
            }
        }
        let out = Tensor::from_vec(&[m, k], data)?;
        let needs = self.needs(x);
        self.push(out, Op::GatherCols { x, indices: indices.to_vec() }, needs, "gather_cols")
    }

    /// Contiguous column slice, a gather over `start..start+len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of nothing"));
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != n {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let out = Tensor::from_vec(&[rows, n], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows { parts: parts.to_vec() }, needs, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols of nothing"));
        }
        let m = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != m {
                return Err(Error::Shape("concat_cols row mismatch".into()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(m * cols);
        for r in 0..m {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::from_vec(&[m, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, needs, "concat_cols")
    }

    /// Tile a `[1,n]` row (or rank-1 vector) into `[count,n]`.
    pub fn repeat_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.numel();
        if tx.leading() != 1 {
            return Err(Error::Shape(format!("repeat_rows of shape {:?}", tx.shape)));
        }
        if count == 0 {
            return Err(Error::EmptyInput("repeat_rows count 0"));
        }
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            data.extend_from_slice(&tx.data);
        }
        let out = Tensor::from_vec(&[count, n], data)?;
        let needs = self.needs(x);
        self.push(out, Op::RepeatRows { x, count }, needs, "repeat_rows")
    }

    /// Weighted-mean softmax cross-entropy over rows:
    /// `(1/m) * sum_r w_r * (logsumexp(z_r) - z_r[label_r])`, a `[1,1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if !tl.is_matrix() {
            return Err(Error::Shape("cross_entropy on non-matrix".into()));
        }
        let (m, n) = (tl.rows(), tl.cols());
        if labels.len() != m || weights.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy: {} rows, {} labels, {} weights",
                m,
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Range(format!("cross_entropy label {bad} >= {n}")));
        }
        let mut total = 0.0;
        for r in 0..m {
            let zs = &tl.data[r * n..(r + 1) * n];
            let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zs.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - zs[labels[r]]);
        }
        let out = Tensor::scalar(total / m as f64);
        let needs = self.needs(logits);
        self.push(
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec() },
            needs,
            "cross_entropy",
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagate from a scalar `loss` node, accumulating gradients for
    /// every node on its differentiable closure. Gradients are reset first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got {:?}",
                self.value(loss).shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.accumulate(i, &op, &gout)?;
            self.grads[i] = Some(gout);
        }

        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite_slice(g, &format!("gradient of node {i}"))?;
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        let numel = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn accumulate(&mut self, node: usize, op: &Op, gout: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let da = mm_nt(gout, &tb.data, m, n, k); // dC @ B^T
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db = mm_tn(&self.nodes[a.0].value.data, gout, m, k, n); // A^T @ dC
                    self.add_grad(*b, &db);
                }
            }

            Op::Transpose { x } => {
                let (n, m) = {
                    let t = &self.nodes[node].value;
                    (t.rows(), t.cols())
                };
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = gout[i * m + j];
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.add_grad(*a, gout);
                }
                if self.needs(*b) {
                    self.add_grad(*b, gout);
                }
            }

            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let db: Vec<f64> =
                        gout.iter().zip(&self.nodes[b.0].value.data).map(|(g, y)| g * y).collect();
                    self.add_grad(*a, &db);
                }
                if self.needs(*b) {
                    let da: Vec<f64> =
                        gout.iter().zip(&self.nodes[a.0].value.data).map(|(g, x)| g * x).collect();
                    self.add_grad(*b, &da);
                }
            }

            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    self.add_grad(*x, gout);
                }
                if self.needs(*bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; n];
                    for (i, g) in gout.iter().enumerate() {
                        db[i % n] += g;
                    }
                    self.add_grad(*bias, &db);
                }
            }

            Op::Affine { x, scale } => {
                let dx: Vec<f64> = gout.iter().map(|g| g * scale).collect();
                self.add_grad(*x, &dx);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let n = tx.last_dim();
                let rows = tx.leading();
                let mut dx = vec![0.0; tx.numel()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let xs = &tx.data[r * n..(r + 1) * n];
                    let go = &gout[r * n..(r + 1) * n];
                    let mean = xs.iter().sum::<f64>() / n as f64;
                    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let wy: Vec<f64> = go.iter().zip(tg.data.iter()).map(|(g, gm)| g * gm).collect();
                    let mean_wy = wy.iter().sum::<f64>() / n as f64;
                    let mean_wy_xhat =
                        wy.iter().zip(&xhat).map(|(w, xh)| w * xh).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = (wy[c] - mean_wy - xhat[c] * mean_wy_xhat) * inv;
                        dg[c] += go[c] * xhat[c];
                        db[c] += go[c];
                    }
                }
                if self.needs(*x) {
                    self.add_grad(*x, &dx);
                }
                if self.needs(*gamma) {
                    self.add_grad(*gamma, &dg);
                }
                if self.needs(*beta) {
                    self.add_grad(*beta, &db);
                }
            }

            Op::SoftmaxBias { x } => {
                let ty = &self.nodes[node].value;
                let n = ty.last_dim();
                let rows = ty.leading();
                let mut dx = vec![0.0; ty.numel()];
                for r in 0..rows {
                    let ys = &ty.data[r * n..(r + 1) * n];
                    let go = &gout[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(go).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        dx[r * n + c] = ys[c] * (go[c] - dot);
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::Gelu { x } => {
                let tx = &self.nodes[x.0].value;
                let dx: Vec<f64> =
                    gout.iter().zip(&tx.data).map(|(g, &v)| g * gelu_bwd(v)).collect();
                self.add_grad(*x, &dx);
            }

            Op::Tanh { x } => {
                let ty = &self.nodes[node].value;
                let dx: Vec<f64> =
                    gout.iter().zip(&ty.data).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.add_grad(*x, &dx);
            }

            Op::Sigmoid { x } => {
                let ty = &self.nodes[node].value;
                let dx: Vec<f64> =
                    gout.iter().zip(&ty.data).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.add_grad(*x, &dx);
            }

            Op::L2Normalize { x } => {
                let tx = &self.nodes[x.0].value;
                let ty = &self.nodes[node].value;
                let n = tx.last_dim();
                let rows = tx.leading();
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..rows {
                    let xs = &tx.data[r * n..(r + 1) * n];
                    let ys = &ty.data[r * n..(r + 1) * n];
                    let go = &gout[r * n..(r + 1) * n];
                    let norm = l2(xs);
                    let dot: f64 = ys.iter().zip(go).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        dx[r * n + c] = (go[c] - ys[c] * dot) / norm;
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::CosineSim { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let ty = &self.nodes[node].value;
                let n = ta.last_dim();
                let rows = ta.leading();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for r in 0..rows {
                    let xs = &ta.data[r * n..(r + 1) * n];
                    let ys = &tb.data[r * n..(r + 1) * n];
                    let cos = ty.data[r];
                    let g = gout[r];
                    let (na, nb) = (l2(xs), l2(ys));
                    for c in 0..n {
                        let ah = xs[c] / na;
                        let bh = ys[c] / nb;
                        da[r * n + c] = g * (bh - cos * ah) / na;
                        db[r * n + c] = g * (ah - cos * bh) / nb;
                    }
                }
                if self.needs(*a) {
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    self.add_grad(*b, &db);
                }
            }

            Op::RowSum { x } => {
                let tx = &self.nodes[x.0].value;
                let n = tx.last_dim();
                let rows = tx.leading();
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..rows {
                    for c in 0..n {
                        dx[r * n + c] = gout[r];
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::MeanRows { x, indices } => {
                let tx = &self.nodes[x.0].value;
                let n = tx.cols();
                let k = indices.len() as f64;
                let mut dx = vec![0.0; tx.numel()];
                for &i in indices {
                    for c in 0..n {
                        dx[i * n + c] += gout[c] / k;
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::GatherRows { x, indices } => {
                let tx = &self.nodes[x.0].value;
                let n = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..n {
                        dx[i * n + c] += gout[j * n + c];
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::GatherCols { x, indices } => {
                let tx = &self.nodes[x.0].value;
                let (m, n) = (tx.rows(), tx.cols());
                let k = indices.len();
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..m {
                    for (j, &c) in indices.iter().enumerate() {
                        dx[r * n + c] += gout[r * k + j];
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.nodes[p.0].value.numel();
                    if self.needs(p) {
                        let slice = gout[offset..offset + numel].to_vec();
                        self.add_grad(p, &slice);
                    }
                    offset += numel;
                }
            }

            Op::ConcatCols { parts } => {
                let m = self.nodes[node].value.rows();
                let total = self.nodes[node].value.cols();
                let mut col_off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0; m * c];
                        for r in 0..m {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &gout[r * total + col_off..r * total + col_off + c],
                            );
                        }
                        self.add_grad(p, &dp);
                    }
                    col_off += c;
                }
            }

            Op::RepeatRows { x, count } => {
                let n = self.nodes[x.0].value.numel();
                let mut dx = vec![0.0; n];
                for r in 0..*count {
                    for c in 0..n {
                        dx[c] += gout[r * n + c];
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::CrossEntropy { logits, labels, weights } => {
                let tl = &self.nodes[logits.0].value;
                let (m, n) = (tl.rows(), tl.cols());
                let g = gout[0];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let zs = &tl.data[r * n..(r + 1) * n];
                    let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = zs.iter().map(|z| (z - max).exp()).sum();
                    let scale = g * weights[r] / m as f64;
                    for c in 0..n {
                        let p = (zs[c] - max).exp() / sum;
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        dx[r * n + c] = scale * (p - onehot);
                    }
                }
                self.add_grad(*logits, &dx);
            }
        }
        Ok(())
    }
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x.powi(3));
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

/// C = A @ B with A [m,k], B [k,n], all row-major.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C = A @ B^T with A [m,k], B [n,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = A^T @ B with A [m,k], B [m,n], result [k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}
