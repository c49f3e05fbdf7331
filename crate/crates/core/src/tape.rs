//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value, so operands
//! always precede their consumers and a single reverse sweep visits each
//! node once. Leaves created with [`Tape::leaf`] receive gradients;
//! constants do not.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node recorded on a [`Tape`].
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
    Constant,
    MatMul(Var, Var),
    /// `[m x n] + [n]`, bias broadcast over rows.
    AddRowBias(Var, Var),
    /// `[d]` repeated into `[m x d]`.
    BroadcastRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Var, Var),
    Sum(Var),
    /// Sum over rows of each row's Euclidean norm.
    SumRowNorms(Var),
    /// Mean softmax cross-entropy; caches the softmax probabilities.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Leaves that the loss does
    /// not depend on get an all-zero tensor.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a leaf's gradient.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.leaves.get(v.0).copied().unwrap_or(false)
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(
            op,
            format!("expected a matrix, got shape {s:?}"),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "add_row_bias")?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias length {} for {n} columns", b.len()),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let src = self.value(v);
        let d = src.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.push(out, Op::BroadcastRows(v)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = matrix_dims(self.value(a), "concat_cols")?;
        let (m2, q) = matrix_dims(self.value(b), "concat_cols")?;
        if m != m2 {
            return Err(Error::dim(
                "concat_cols",
                format!("row counts {m} and {m2} differ"),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&av[i * p..(i + 1) * p]);
            data.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let out = Tensor::matrix(m, p + q, data)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `sum_i ||row_i||_2` of a matrix (a vector counts as one row).
    pub fn sum_row_norms(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.as_matrix_dims()?;
        let total = (0..m)
            .map(|i| {
                t.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::SumRowNorms(a)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilised by
    /// subtracting each row's maximum before exponentiating.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = matrix_dims(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if b == 0 {
            return Err(Error::Contract(
                "softmax_cross_entropy on an empty batch".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!("label {bad} outside [0, {k})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let top = Tensor::argmax(row);
            let max = row[top];
            let rest: f64 = (0..k)
                .filter(|&j| j != top)
                .map(|j| (row[j] - max).exp())
                .sum();
            let denom = 1.0 + rest;
            let log_denom = rest.ln_1p();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            total += log_denom - (row[label] - max);
        }
        let out = Tensor::scalar(total / b as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = matrix_dims(av, "matmul")?;
                    let n = bv.shape()[1];
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    let bt = bv.transpose()?;
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    let at = av.transpose()?;
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?)?;
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?)?;
                }
                Op::AddRowBias(x, bias) => {
                    let (m, n) = matrix_dims(&g, "add_row_bias")?;
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for (d, gv) in db.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *d += gv;
                        }
                    }
                    let db = Tensor::new(self.value(*bias).shape().to_vec(), db)?;
                    accumulate(&mut grads, *bias, db)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::BroadcastRows(v) => {
                    let (m, d) = matrix_dims(&g, "broadcast_rows")?;
                    let mut dv = vec![0.0; d];
                    for i in 0..m {
                        for (acc, gv) in dv.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                            *acc += gv;
                        }
                    }
                    let dv = Tensor::new(self.value(*v).shape().to_vec(), dv)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k))?,
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let da = g.zip_map(
                        self.value(*a),
                        "relu",
                        |gv, x| if x > 0.0 { gv } else { 0.0 },
                    )?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = matrix_dims(self.value(*a), "concat_cols")?;
                    let q = self.value(*b).shape()[1];
                    let mut da = Vec::with_capacity(m * p);
                    let mut db = Vec::with_capacity(m * q);
                    for i in 0..m {
                        let row = &g.data()[i * (p + q)..(i + 1) * (p + q)];
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, p, da)?)?;
                    accumulate(&mut grads, *b, Tensor::matrix(m, q, db)?)?;
                }
                Op::Sum(a) => {
                    let da = Tensor::filled(self.value(*a).shape(), g.item());
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SumRowNorms(a) => {
                    let x = self.value(*a);
                    let (m, n) = x.as_matrix_dims()?;
                    let gs = g.item();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &x.data()[i * n..(i + 1) * n];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        // the norm has no gradient at the origin; use 0
                        if norm > 0.0 {
                            for (d, v) in da[i * n..(i + 1) * n].iter_mut().zip(row) {
                                *d = gs * v / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), da)?)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let (b, k) = matrix_dims(self.value(*logits), "softmax_cross_entropy")?;
                    let scale = g.item() / b as f64;
                    let mut dz = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        dz[i * k + label] -= 1.0;
                    }
                    for v in &mut dz {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::matrix(b, k, dz)?)?;
                }
            }
        }

        let leaves: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if leaves[i] && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads, leaves })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
