//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and records its inputs on the tape. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! one gradient per node; [`Graph::accumulate_into`] then adds the gradients
//! of parameter leaves into a [`ParamStore`].

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{log_sum_exp, matmul, matmul_nt, matmul_tn, softmax_slice, Tensor};

/// Probability floor applied before taking logs in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x[m×n] + b[n]` broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    /// Softmax over a rank-1 input.
    Softmax(Var),
    /// `Σ x ⊙ y` for equally shaped inputs.
    Dot(Var, Var),
    /// Mean softmax cross-entropy; caches row probabilities.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Mean squared distance of each row of `x` to `centers[label]`.
    CenterLoss {
        x: Var,
        centers: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf; its gradient is computed but never stored.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&(_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(v);
        }
        let v = self.push(store.get(name)?.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (rows, cols) = xv.dims2()?;
        if bv.shape() != [cols] {
            return Err(dim_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..rows {
            for (o, bj) in out.data_mut()[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(bv.data())
            {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::Argument(format!(
                "softmax expects a vector, got shape {:?}",
                xv.shape()
            )));
        }
        let out = Tensor::vector(softmax_slice(xv.data())?)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Tensor::scalar(prod.sum()), Op::Dot(a, b)))
    }

    /// Mean over the batch of `−log max(p(label), PROB_FLOOR)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, k) = lv.dims2()?;
        if labels.len() != rows {
            return Err(dim_err("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let floor = PROB_FLOOR.ln();
        let mut probs = Vec::with_capacity(rows * k);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Argument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let row = lv.row(i);
            let log_p = row[y] - log_sum_exp(row);
            // `f64::max` would swallow a NaN here.
            total -= if log_p < floor { floor } else { log_p };
            probs.extend(softmax_slice(row)?);
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over the batch of `‖x_b − centers[label_b]‖²`.
    pub fn center_loss(&mut self, x: Var, centers: Var, labels: &[usize]) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(centers));
        let (rows, d) = xv.dims2()?;
        let (k, dc) = cv.dims2()?;
        if d != dc || labels.len() != rows {
            return Err(dim_err("center_loss", xv.shape(), cv.shape()));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Argument(format!(
                    "label {y} has no center among {k} classes"
                )));
            }
            total += xv
                .row(i)
                .iter()
                .zip(cv.row(y))
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>();
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CenterLoss {
                x,
                centers,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar root. Entry `i` is the gradient of the root
    /// with respect to node `i`, or `None` when the node does not feed it.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(root).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &g)?;
                    add_grad(&mut grads, *a, da)?;
                    add_grad(&mut grads, *b, db)?;
                }
                Op::AddBias(x, b) => {
                    let (rows, cols) = g.dims2()?;
                    let mut db = vec![0.0; cols];
                    for i in 0..rows {
                        for (d, v) in db.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    add_grad(&mut grads, *b, Tensor::vector(db)?)?;
                    add_grad(&mut grads, *x, g.clone())?;
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.clone())?;
                    add_grad(&mut grads, *b, g.clone())?;
                }
                Op::Scale(x, c) => add_grad(&mut grads, *x, g.scale(*c))?,
                Op::Relu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    add_grad(&mut grads, *x, dx)?;
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    add_grad(&mut grads, *x, dx)?;
                }
                Op::Reshape(x) => {
                    let dx = g.reshape(self.value(*x).shape())?;
                    add_grad(&mut grads, *x, dx)?;
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let inner: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| yv * (gv - inner))
                        .collect();
                    add_grad(&mut grads, *x, Tensor::vector(dx)?)?;
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    add_grad(&mut grads, *a, self.value(*b).scale(s))?;
                    add_grad(&mut grads, *b, self.value(*a).scale(s))?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let (rows, k) = lv.dims2()?;
                    let s = g.item() / rows as f64;
                    let mut dx = vec![0.0; rows * k];
                    for (i, &y) in labels.iter().enumerate() {
                        // Clamped rows are constant in the logits.
                        if probs[i * k + y] < PROB_FLOOR {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dx[i * k + j] = s * (probs[i * k + j] - onehot);
                        }
                    }
                    add_grad(&mut grads, *logits, Tensor::matrix(rows, k, dx)?)?;
                }
                Op::CenterLoss { x, centers, labels } => {
                    let (xv, cv) = (self.value(*x), self.value(*centers));
                    let (rows, d) = xv.dims2()?;
                    let s = 2.0 * g.item() / rows as f64;
                    let mut dx = vec![0.0; rows * d];
                    let mut dc = vec![0.0; cv.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..d {
                            let diff = s * (xv.row(i)[j] - cv.row(y)[j]);
                            dx[i * d + j] = diff;
                            dc[y * d + j] -= diff;
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::matrix(rows, d, dx)?)?;
                    add_grad(&mut grads, *centers, Tensor::new(cv.shape().to_vec(), dc)?)?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Adds gradients of parameter leaves into `store`.
    pub fn accumulate_into(&self, grads: &[Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
