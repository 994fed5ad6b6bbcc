//! Eager reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive executes immediately, stores its output and whatever
//! forward context the adjoint needs, and appends one node to the tape.
//! Nodes are only ever appended, so inputs always precede their consumers
//! and a single reverse sweep visits them in a valid order.

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SelectRow(Var, usize),
    Outer(Var, Var),
    FrobeniusNorm(Var),
    RowNorms(Var),
    Sum(Var),
    BceWithLogits {
        logit: Var,
        label: f64,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Record of executed primitives. Confined to one thread; build a fresh
/// tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!("{op} of {:?} and {:?}", a.shape(), b.shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        let ng = self.needs(a);
        self.push(Op::Scale(a, k), out, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), out, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), out, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = tensor::softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    /// Normalizes every row of `x` independently, then applies the shared
    /// `gamma`/`beta` (each holding one value per column).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::Dimension(format!(
                "layer norm over {} columns with gamma {:?}, beta {:?}",
                c,
                g.shape(),
                b.shape()
            )));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), out, ng))
    }

    /// Stacks row blocks with a common column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).dims2().1)
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2();
            if c != cols {
                return Err(Error::Dimension(format!(
                    "concat rows: {:?} does not have {cols} columns",
                    v.shape()
                )));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, ng))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, _) = v.dims2();
        if i >= r {
            return Err(Error::Dimension(format!(
                "row {i} of {:?}",
                v.shape()
            )));
        }
        let out = Tensor::row(v.row_slice(i).to_vec());
        let ng = self.needs(a);
        Ok(self.push(Op::SelectRow(a, i), out, ng))
    }

    /// `u ⊗ v` for two vectors (any shape; all entries are used).
    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let out = tensor::outer(self.value(u).data(), self.value(v).data());
        let ng = self.needs(u) || self.needs(v);
        self.push(Op::Outer(u, v), out, ng)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(tensor::frobenius_norm(self.value(a)));
        let ng = self.needs(a);
        self.push(Op::FrobeniusNorm(a), out, ng)
    }

    /// Euclidean norm of every row, as an `r × 1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, _) = v.dims2();
        let data = (0..r)
            .map(|i| v.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::matrix(r, 1, data).expect("r×1");
        let ng = self.needs(a);
        self.push(Op::RowNorms(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), out, ng)
    }

    /// Weighted binary cross-entropy on a scalar logit:
    /// `weight·y·softplus(−z) + (1−y)·softplus(z)`.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64, weight: f64) -> Result<Var> {
        let v = self.value(logit);
        if v.len() != 1 {
            return Err(Error::Dimension(format!(
                "loss expects a scalar logit, got {:?}",
                v.shape()
            )));
        }
        let z = v.item();
        let loss = weight * label * tensor::softplus(-z) + (1.0 - label) * tensor::softplus(z);
        let ng = self.needs(logit);
        Ok(self.push(
            Op::BceWithLogits {
                logit,
                label,
                weight,
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = dy.matmul(&bv.transpose())?;
                    self.accumulate(grads, *a, da.into_data());
                }
                if self.needs(*b) {
                    let db = av.transpose().matmul(dy)?;
                    self.accumulate(grads, *b, db.into_data());
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, dy.transpose().into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.data().to_vec());
                self.accumulate(grads, *b, dy.data().to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(bv.data()).map(|(g, q)| g * q).collect();
                let db = dy.data().iter().zip(av.data()).map(|(g, p)| g * p).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, dy.data().iter().map(|g| g * k).collect());
            }
            Op::Tanh(a) => {
                let g = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = y.dims2();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let dr = dy.row_slice(i);
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        g[i * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = y.dims2();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let dr = dy.row_slice(i);
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let dh = dr[j] * gv[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                        dg[j] += dr[j] * hr[j];
                        db[j] += dr[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        let dh = dr[j] * gv[j];
                        dx[i * c + j] = inv_std[i] * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, dy.data().to_vec());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, dy.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectRow(a, i) => {
                let av = self.value(*a);
                let (_, c) = av.dims2();
                let mut g = vec![0.0; av.len()];
                g[i * c..(i + 1) * c].copy_from_slice(dy.data());
                self.accumulate(grads, *a, g);
            }
            Op::Outer(u, v) => {
                let (uv, vv) = (self.value(*u).data(), self.value(*v).data());
                let (a, b) = (uv.len(), vv.len());
                let d = dy.data();
                if self.needs(*u) {
                    let du = (0..a)
                        .map(|i| (0..b).map(|j| d[i * b + j] * vv[j]).sum())
                        .collect();
                    self.accumulate(grads, *u, du);
                }
                if self.needs(*v) {
                    let dv = (0..b)
                        .map(|j| (0..a).map(|i| d[i * b + j] * uv[i]).sum())
                        .collect();
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::FrobeniusNorm(a) => {
                let norm = y.item();
                let g = dy.item();
                let da = if norm == 0.0 {
                    vec![0.0; self.value(*a).len()]
                } else {
                    self.value(*a).data().iter().map(|x| g * x / norm).collect()
                };
                self.accumulate(grads, *a, da);
            }
            Op::RowNorms(a) => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let n = y.data()[i];
                    if n == 0.0 {
                        continue;
                    }
                    let g = dy.data()[i];
                    for j in 0..c {
                        da[i * c + j] = g * av.data()[i * c + j] / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let g = dy.item();
                self.accumulate(grads, *a, vec![g; self.value(*a).len()]);
            }
            Op::BceWithLogits {
                logit,
                label,
                weight,
            } => {
                let s = tensor::sigmoid(self.value(*logit).item());
                let d = weight * label * (s - 1.0) + (1.0 - label) * s;
                self.accumulate(grads, *logit, vec![dy.item() * d]);
            }
        }
        Ok(())
    }
}
