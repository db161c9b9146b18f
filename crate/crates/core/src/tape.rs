//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so node inputs
//! always precede the node itself and a single reverse sweep suffices.
//! Parameters enter the tape through [`Tape::bind`], which records the
//! parameter name so that [`Gradients`] can be looked up by name after
//! [`Tape::backward`]. Frozen parameters and data enter as constants and
//! never receive gradients.
//!
//! A tape supports exactly one backward pass; a second call is an error.
//! Build a fresh tape per forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; training policies select trainable roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Pretrained backbone weights (frozen unless fully fine-tuning).
    Base,
    /// Low-rank adapter factors.
    Adapter,
    /// Instruction encoder that produces gates.
    Encoder,
    /// Instruction embedding table used by the baselines' instruction pathway.
    InstructionEmbedding,
}

/// A named tensor owned by a module.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, role: Role, value: Tensor) -> Self {
        Self {
            name: name.into(),
            role,
            value,
        }
    }
}

/// Set of roles that receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainPolicy {
    pub base: bool,
    pub adapter: bool,
    pub encoder: bool,
    pub instruction_embedding: bool,
}

impl TrainPolicy {
    pub const FROZEN: TrainPolicy = TrainPolicy {
        base: false,
        adapter: false,
        encoder: false,
        instruction_embedding: false,
    };

    pub fn trains(&self, role: Role) -> bool {
        match role {
            Role::Base => self.base,
            Role::Adapter => self.adapter,
            Role::Encoder => self.encoder,
            Role::InstructionEmbedding => self.instruction_embedding,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Column(Var, usize),
    ConcatCols(Vec<Var>),
    Sigmoid(Var),
    Gelu(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    EmbedMean(Var, Vec<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations with saved forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var, Vec<usize>)>,
    spent: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf, reported in [`Gradients`] under `name`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v, shape));
        v
    }

    /// Binds a module parameter: trainable roles become leaves, the rest constants.
    pub fn bind(&mut self, param: &Param, policy: TrainPolicy) -> Var {
        if policy.trains(param.role) {
            self.leaf(param.name.clone(), param.value.clone())
        } else {
            self.constant(param.value.clone())
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_t", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv.data()[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds `bias[n]` to every row of `x[.., n]`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        let n = bv.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != xv.rows() {
            return Err(shape_err("scale_rows", xv, sv));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= sv.data()[i / n];
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    /// Column `j` of `x[m×n]` as a vector of length `m`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        if j >= xv.cols() {
            return Err(Error::Contract(format!("column {j} out of range for {:?}", xv.shape())));
        }
        let data = (0..xv.rows()).map(|i| xv.at(i, j)).collect();
        let out = Tensor::vector(data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Column(x, j), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != m || v.shape().len() != 2 {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let out = Tensor::new(vec![m, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = ops::log_softmax(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Picks `x[i, idx[i]]` for each row.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::Contract(format!(
                "gather: {} indices for {} rows",
                idx.len(),
                xv.rows()
            )));
        }
        let k = xv.cols();
        if let Some(&bad) = idx.iter().find(|&&t| t >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let out = Tensor::vector(idx.iter().enumerate().map(|(i, &t)| xv.at(i, t)).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, idx.to_vec()), rg))
    }

    /// Per-row cross-entropy `-log_softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits);
        let picked = self.gather(lp, targets)?;
        Ok(self.scale(picked, -1.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Row `i` is the mean of `table` rows listed in `ids[i]`.
    pub fn embed_mean(&mut self, table: Var, ids: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = vec![0.0; ids.len() * d];
        for (i, seq) in ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Contract(format!("empty token sequence at row {i}")));
            }
            let w = 1.0 / seq.len() as f64;
            for &t in seq {
                if t >= vocab {
                    return Err(Error::Contract(format!("token id {t} outside vocabulary of {vocab}")));
                }
                for (o, &e) in out[i * d..(i + 1) * d].iter_mut().zip(tv.row(t)) {
                    *o += w * e;
                }
            }
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::EmbedMean(table, ids.to_vec()), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Gradients are returned, not accumulated anywhere; calling this twice
    /// on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: std::mem::take(&mut self.params),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G · Bᵀ
                    accumulate(grads, *a, g.matmul(&bv.transpose()?)?);
                }
                if wants(*b) {
                    accumulate(grads, *b, av.transpose()?.matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(grads, *a, g.matmul(bv)?);
                }
                if wants(*b) {
                    let (m, n, k) = (g.rows(), g.cols(), av.cols());
                    let gt = g.transpose()?;
                    let mut out = vec![0.0; n * k];
                    matmul_into(gt.data(), av.data(), &mut out, n, m, k);
                    accumulate(grads, *b, Tensor::new(vec![n, k], out)?);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.hadamard(val(*b))?);
                }
                if wants(*b) {
                    accumulate(grads, *b, g.hadamard(val(*a))?);
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    accumulate(grads, *a, g.scaled(*c));
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(*b) {
                    let bv = val(*b);
                    let n = bv.len();
                    let mut out = vec![0.0; n];
                    for (j, &gv) in g.data().iter().enumerate() {
                        out[j % n] += gv;
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), out)?);
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let n = xv.cols();
                if wants(*x) {
                    let mut out = g.clone();
                    for (j, o) in out.data_mut().iter_mut().enumerate() {
                        *o *= sv.data()[j / n];
                    }
                    accumulate(grads, *x, out);
                }
                if wants(*s) {
                    let mut out = vec![0.0; sv.len()];
                    for (j, (&gv, &xvj)) in g.data().iter().zip(xv.data()).enumerate() {
                        out[j / n] += gv * xvj;
                    }
                    accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), out)?);
                }
            }
            Op::Column(x, j) => {
                if wants(*x) {
                    let xv = val(*x);
                    let mut out = Tensor::zeros(xv.shape());
                    let n = xv.cols();
                    for (r, &gv) in g.data().iter().enumerate() {
                        out.data_mut()[r * n + j] = gv;
                    }
                    accumulate(grads, *x, out);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let m = g.rows();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    if wants(*p) {
                        let mut out = vec![0.0; m * w];
                        for r in 0..m {
                            out[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), out)?);
                    }
                    offset += w;
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let d = y.map(|s| s * (1.0 - s));
                    accumulate(grads, *x, g.hadamard(&d)?);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let d = val(*x).map(ops::gelu_grad_scalar);
                    accumulate(grads, *x, g.hadamard(&d)?);
                }
            }
            Op::LogSoftmax(x) => {
                if wants(*x) {
                    // dx = g - softmax * rowsum(g)
                    let y = &node.value;
                    let k = y.cols();
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for c in 0..k {
                            out.data_mut()[r * k + c] -= y.at(r, c).exp() * gs;
                        }
                    }
                    accumulate(grads, *x, out);
                }
            }
            Op::Gather(x, idx) => {
                if wants(*x) {
                    let xv = val(*x);
                    let k = xv.cols();
                    let mut out = Tensor::zeros(xv.shape());
                    for (r, (&t, &gv)) in idx.iter().zip(g.data()).enumerate() {
                        out.data_mut()[r * k + t] += gv;
                    }
                    accumulate(grads, *x, out);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gv = g.data()[0];
                    accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let gv = g.data()[0] / xv.len() as f64;
                    accumulate(grads, *x, Tensor::full(xv.shape(), gv));
                }
            }
            Op::EmbedMean(table, ids) => {
                if wants(*table) {
                    let tv = val(*table);
                    let d = tv.cols();
                    let mut out = Tensor::zeros(tv.shape());
                    for (r, seq) in ids.iter().enumerate() {
                        let w = 1.0 / seq.len() as f64;
                        let grow = g.row(r);
                        for &t in seq {
                            for (o, &gv) in out.data_mut()[t * d..(t + 1) * d].iter_mut().zip(grow) {
                                *o += w * gv;
                            }
                        }
                    }
                    accumulate(grads, *table, out);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var, Vec<usize>)>,
}

impl Gradients {
    /// Gradient of any node; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter, zero-filled when unreachable.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let (_, v, shape) = self.params.iter().find(|(n, _, _)| n == name)?;
        Some(self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }


    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _, _)| n.as_str())
    }

    /// Name → gradient for every bound parameter that the loss reaches.
    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        let mut grads = self.grads;
        self.params
            .into_iter()
            .filter_map(|(n, v, _)| grads[v.0].take().map(|g| (n, g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, CheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_node_loss() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::scalar(3.0));
        let g = t.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::scalar(1.0));
        t.backward(x).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut t = Tape::new();
        let x = t.leaf("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = t.leaf("x", Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(c, x).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.param("x").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(&[vec![0.0; 4]]).unwrap());
        let ce = t.cross_entropy(z, &[2]).unwrap();
        assert!((t.value(ce).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(t.cross_entropy(z, &[4]).is_err());
    }

    /// Each primitive against central differences, on a scalar reduction
    /// with a random cotangent so that every output entry matters.
    fn fd_primitive(seed: u64, build: impl Fn(&mut Tape, Var) -> Var, shape: &[usize]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let y = build(&mut t, x);
            t.value(y).shape().to_vec()
        };
        let w = Tensor::randn(&probe, 1.0, &mut rng);
        let eval = |xs: &[f64], want_grad: bool| {
            let mut t = Tape::new();
            let x = t.leaf("x", Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
            let y = build(&mut t, x);
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv).unwrap();
            let l = t.sum(p);
            let f = t.value(l).data()[0];
            let g = if want_grad {
                t.backward(l).unwrap().param("x").unwrap().into_data()
            } else {
                vec![]
            };
            (f, g)
        };
        let (_, analytic) = eval(x0.data(), true);
        check_gradient(|xs| eval(xs, false).0, x0.data(), &analytic, &CheckOptions::default())
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..20u64 {
            let cases: Vec<(&str, f64)> = vec![
                ("sigmoid", fd_primitive(seed, |t, x| t.sigmoid(x), &[3, 4])),
                ("gelu", fd_primitive(seed, |t, x| t.gelu(x), &[3, 4])),
                ("log_softmax", fd_primitive(seed, |t, x| t.log_softmax(x), &[3, 4])),
                (
                    "matmul",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let b = t.constant(Tensor::randn(&[4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
                            t.matmul(x, b).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "matmul_rhs",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let a = t.constant(Tensor::randn(&[2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(98)));
                            t.matmul(a, x).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "matmul_t",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let b = t.constant(Tensor::randn(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(97)));
                            t.matmul_t(x, b).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "matmul_t_rhs",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let a = t.constant(Tensor::randn(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(96)));
                            t.matmul_t(a, x).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "scale_rows",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let c = t.column(x, 1).unwrap();
                            t.scale_rows(x, c).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "add_bias",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let b = t.column(x, 0).unwrap();
                            let xt = t.matmul_t(x, x).unwrap();
                            t.add_bias(xt, b).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "concat",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let s = t.sigmoid(x);
                            t.concat_cols(&[x, s, x]).unwrap()
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "cross_entropy",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let ce = t.cross_entropy(x, &[0, 3, 1]).unwrap();
                            t.mean(ce)
                        },
                        &[3, 4],
                    ),
                ),
                (
                    "embed_mean",
                    fd_primitive(
                        seed,
                        |t, x| t.embed_mean(x, &[vec![0, 1, 1], vec![2], vec![0, 2, 1, 2]]).unwrap(),
                        &[3, 4],
                    ),
                ),
                (
                    "sub_scale",
                    fd_primitive(
                        seed,
                        |t, x| {
                            let s = t.sigmoid(x);
                            let d = t.sub(x, s).unwrap();
                            t.scale(d, 0.3)
                        },
                        &[3, 4],
                    ),
                ),
            ];
            for (name, err) in cases {
                assert!(err < 1e-4, "{name} seed {seed}: max rel error {err}");
            }
        }
    }
}
