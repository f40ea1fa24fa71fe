//! Eager tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op evaluates immediately and records itself on the tape. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and backward is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, group: usize, heads: usize, probs: Vec<f64> },
    RepeatRows(Var, usize),
    TileRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    Reshape(Var),
    GroupSoftmax(Var, usize),
    GroupWeightedSum { w: Var, z: Var, group: usize },
    GroupMean(Var, usize),
    MulRow(Var, Var),
    SqErrSum(Var, Tensor),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    variables: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.variables.get(&v.0)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.params.iter()
    }

    /// Global L2 norm across all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::State(format!("`{op}` received a handle that was never recorded on this graph")));
        }
        Ok(())
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.rows() != k {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let m = tb.cols();
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `x[n,m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x, "add_bias")?;
        self.check(b, "add_bias")?;
        let (tx, tb) = (self.value(x), self.value(b));
        let m = tx.cols();
        if tb.len() != m {
            return Err(Error::shape("add_bias", format!("{:?} + bias {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a, name)?;
        self.check(b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        self.check(a, "mul_const")?;
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", ta.shape(), c.shape())));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a, "scale")?;
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a, "tanh")?;
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Tanh(a), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a, "gelu")?;
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh()));
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gelu(a), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x, "layer_norm")?;
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::shape("layer_norm", format!("input width {m}, affine {:?}", self.value(gamma).shape())));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Multi-head self-attention without masking, where each run of `group`
    /// consecutive rows attends only within itself.
    pub fn grouped_attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Result<Var> {
        self.check(q, "grouped_attention")?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("grouped_attention", tq, tk)?;
        same_shape("grouped_attention", tq, tv)?;
        let (n, dm) = (tq.rows(), tq.cols());
        if group == 0 || n % group != 0 || heads == 0 || dm % heads != 0 {
            return Err(Error::shape(
                "grouped_attention",
                format!("{n} rows, width {dm}: group {group} / heads {heads} do not divide evenly"),
            ));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_groups = n / group;
        let mut probs = vec![0.0; n_groups * heads * group * group];
        let mut out = vec![0.0; n * dm];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; group];
        for gi in 0..n_groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..group {
                    let qi = &qd[(gi * group + i) * dm + off..(gi * group + i) * dm + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..group {
                        let kj = &kd[(gi * group + j) * dm + off..(gi * group + j) * dm + off + dh];
                        let s = crate::numerics::tensor::dot(qi, kj) * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let pbase = ((gi * heads + h) * group + i) * group;
                    let orow = (gi * group + i) * dm + off;
                    for j in 0..group {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let vj = &vd[(gi * group + j) * dm + off..(gi * group + j) * dm + off + dh];
                        for (o, &vv) in out[orow..orow + dh].iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, dm], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, group, heads, probs }, ng))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        self.check(a, "repeat_rows")?;
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(n * m * times);
        for i in 0..n {
            for _ in 0..times {
                out.extend_from_slice(ta.row(i));
            }
        }
        let out = Tensor::new(&[n * times, m], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::RepeatRows(a, times), ng))
    }

    /// The whole matrix stacked `times` times.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        self.check(a, "tile_rows")?;
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(n * m * times);
        for _ in 0..times {
            out.extend_from_slice(ta.data());
        }
        let out = Tensor::new(&[n * times, m], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::TileRows(a), ng))
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.check(a, "gather_rows")?;
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in &index {
            out.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(&[index.len(), m], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, index), ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "concat_rows")?;
        self.check(b, "concat_rows")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("concat_rows", format!("{:?} over {:?}", ta.shape(), tb.shape())));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(&[ta.rows() + tb.rows(), ta.cols()], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatRows(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a, "reshape")?;
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Softmax over consecutive runs of `group` entries of a flat vector.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Result<Var> {
        self.check(a, "group_softmax")?;
        let ta = self.value(a);
        if group == 0 || ta.len() % group != 0 {
            return Err(Error::shape("group_softmax", format!("{} entries in groups of {}", ta.len(), group)));
        }
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(group) {
            softmax_in_place(chunk);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::GroupSoftmax(a, group), ng))
    }

    /// `out[g] = Σ_{i in group g} w[i] · z[i, :]`.
    pub fn group_weighted_sum(&mut self, w: Var, z: Var, group: usize) -> Result<Var> {
        self.check(w, "group_weighted_sum")?;
        self.check(z, "group_weighted_sum")?;
        let (tw, tz) = (self.value(w), self.value(z));
        let (n, m) = (tz.rows(), tz.cols());
        if tw.len() != n || group == 0 || n % group != 0 {
            return Err(Error::shape(
                "group_weighted_sum",
                format!("weights {:?}, values {:?}, group {}", tw.shape(), tz.shape(), group),
            ));
        }
        let mut out = vec![0.0; (n / group) * m];
        for i in 0..n {
            let wi = tw.data()[i];
            let orow = &mut out[(i / group) * m..(i / group + 1) * m];
            for (o, &zv) in orow.iter_mut().zip(tz.row(i)) {
                *o += wi * zv;
            }
        }
        let out = Tensor::new(&[n / group, m], out)?;
        let ng = self.ng(w) || self.ng(z);
        Ok(self.push(out, Op::GroupWeightedSum { w, z, group }, ng))
    }

    pub fn group_mean(&mut self, z: Var, group: usize) -> Result<Var> {
        self.check(z, "group_mean")?;
        let tz = self.value(z);
        let (n, m) = (tz.rows(), tz.cols());
        if group == 0 || n % group != 0 {
            return Err(Error::shape("group_mean", format!("{n} rows in groups of {group}")));
        }
        let mut out = vec![0.0; (n / group) * m];
        for i in 0..n {
            let orow = &mut out[(i / group) * m..(i / group + 1) * m];
            for (o, &zv) in orow.iter_mut().zip(tz.row(i)) {
                *o += zv / group as f64;
            }
        }
        let out = Tensor::new(&[n / group, m], out)?;
        let ng = self.ng(z);
        Ok(self.push(out, Op::GroupMean(z, group), ng))
    }

    /// `x[n,m] ⊙ r[m]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check(x, "mul_row")?;
        self.check(r, "mul_row")?;
        let (tx, tr) = (self.value(x), self.value(r));
        let m = tx.cols();
        if tr.len() != m {
            return Err(Error::shape("mul_row", format!("{:?} * row {:?}", tx.shape(), tr.shape())));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, rv) in row.iter_mut().zip(tr.data()) {
                *o *= rv;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, Op::MulRow(x, r), ng))
    }

    /// `Σ (a − target)²` as a scalar.
    pub fn sq_err_sum(&mut self, a: Var, target: Tensor) -> Result<Var> {
        self.check(a, "sq_err_sum")?;
        let ta = self.value(a);
        if ta.len() != target.len() {
            return Err(Error::shape("sq_err_sum", format!("{:?} vs target {:?}", ta.shape(), target.shape())));
        }
        let s: f64 = ta.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::SqErrSum(a, target), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum")?;
        let s = self.value(a).sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check(out, "backward")?;
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output {:?} is not a scalar; use backward_with", self.value(out).shape()),
            ));
        }
        self.backward_with(out, &Tensor::scalar(1.0))
    }

    /// Backpropagates `seed` (the gradient of some loss w.r.t. `out`).
    pub fn backward_with(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        self.check(out, "backward")?;
        if seed.len() != self.value(out).len() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.value(out).shape(), seed.data().to_vec())?);
        let mut result = Gradients::default();

        for idx in (0..=out.0).rev() {
            let Some(d) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &d, &mut grads);
            match node.op {
                Op::Param(id) => match result.params.get_mut(&id) {
                    Some(acc) => acc.add_assign(&d),
                    None => {
                        result.params.insert(id, d);
                    }
                },
                Op::Variable => {
                    result.variables.insert(idx, d);
                }
                _ => {}
            }
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, d: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if ng(a) {
                    let g = slot(grads, a, ta);
                    matmul_nt_acc(d.data(), tb.data(), g.data_mut(), n, m, k);
                }
                if ng(b) {
                    let g = slot(grads, b, tb);
                    matmul_tn_acc(ta.data(), d.data(), g.data_mut(), n, k, m);
                }
            }
            &Op::AddBias(x, b) => {
                if ng(x) {
                    slot(grads, x, val(x)).add_assign(d);
                }
                if ng(b) {
                    let m = val(x).cols();
                    let g = slot(grads, b, val(b));
                    for row in d.data().chunks(m) {
                        for (gv, dv) in g.data_mut().iter_mut().zip(row) {
                            *gv += dv;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if ng(a) {
                    slot(grads, a, val(a)).add_assign(d);
                }
                if ng(b) {
                    slot(grads, b, val(b)).add_assign(d);
                }
            }
            &Op::Sub(a, b) => {
                if ng(a) {
                    slot(grads, a, val(a)).add_assign(d);
                }
                if ng(b) {
                    let g = slot(grads, b, val(b));
                    for (gv, dv) in g.data_mut().iter_mut().zip(d.data()) {
                        *gv -= dv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if ng(a) {
                    let tb = val(b);
                    let g = slot(grads, a, val(a));
                    for ((gv, dv), bv) in g.data_mut().iter_mut().zip(d.data()).zip(tb.data()) {
                        *gv += dv * bv;
                    }
                }
                if ng(b) {
                    let ta = val(a);
                    let g = slot(grads, b, val(b));
                    for ((gv, dv), av) in g.data_mut().iter_mut().zip(d.data()).zip(ta.data()) {
                        *gv += dv * av;
                    }
                }
            }
            Op::MulConst(a, c) => {
                let g = slot(grads, *a, val(*a));
                for ((gv, dv), cv) in g.data_mut().iter_mut().zip(d.data()).zip(c.data()) {
                    *gv += dv * cv;
                }
            }
            &Op::Scale(a, s) => {
                let g = slot(grads, a, val(a));
                for (gv, dv) in g.data_mut().iter_mut().zip(d.data()) {
                    *gv += s * dv;
                }
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                let g = slot(grads, a, val(a));
                for ((gv, dv), yv) in g.data_mut().iter_mut().zip(d.data()).zip(y.data()) {
                    *gv += dv * (1.0 - yv * yv);
                }
            }
            &Op::Gelu(a) => {
                let x = val(a);
                let g = slot(grads, a, x);
                for ((gv, dv), &xv) in g.data_mut().iter_mut().zip(d.data()).zip(x.data()) {
                    let t = (GELU_A * (xv + GELU_B * xv * xv * xv)).tanh();
                    let dt = (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * xv * xv);
                    *gv += dv * (0.5 * (1.0 + t) + 0.5 * xv * dt);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let tx = val(x);
                let (n, m) = (tx.rows(), tx.cols());
                if ng(gamma) {
                    let g = slot(grads, gamma, val(gamma));
                    for i in 0..n {
                        for j in 0..m {
                            g.data_mut()[j] += d.data()[i * m + j] * xhat[i * m + j];
                        }
                    }
                }
                if ng(beta) {
                    let g = slot(grads, beta, val(beta));
                    for row in d.data().chunks(m) {
                        for (gv, dv) in g.data_mut().iter_mut().zip(row) {
                            *gv += dv;
                        }
                    }
                }
                if ng(x) {
                    let gam = val(gamma).data().to_vec();
                    let g = slot(grads, x, tx);
                    let mut dxh = vec![0.0; m];
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..m {
                            dxh[j] = d.data()[i * m + j] * gam[j];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * xhat[i * m + j];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for j in 0..m {
                            g.data_mut()[i * m + j] += inv_std[i] * (dxh[j] - mean_d - xhat[i * m + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, group, heads, probs } => {
                self.attention_backward(*q, *k, *v, *group, *heads, probs, d, grads);
            }
            &Op::RepeatRows(a, times) => {
                let ta = val(a);
                let m = ta.cols();
                let g = slot(grads, a, ta);
                for (r, drow) in d.data().chunks(m).enumerate() {
                    let i = r / times;
                    for (gv, dv) in g.data_mut()[i * m..(i + 1) * m].iter_mut().zip(drow) {
                        *gv += dv;
                    }
                }
            }
            &Op::TileRows(a) => {
                let ta = val(a);
                let len = ta.len();
                let g = slot(grads, a, ta);
                for chunk in d.data().chunks(len) {
                    for (gv, dv) in g.data_mut().iter_mut().zip(chunk) {
                        *gv += dv;
                    }
                }
            }
            Op::GatherRows(a, index) => {
                let ta = val(*a);
                let m = ta.cols();
                let g = slot(grads, *a, ta);
                for (r, &i) in index.iter().enumerate() {
                    for (gv, dv) in g.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&d.data()[r * m..(r + 1) * m]) {
                        *gv += dv;
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = val(a).len();
                if ng(a) {
                    let g = slot(grads, a, val(a));
                    for (gv, dv) in g.data_mut().iter_mut().zip(&d.data()[..split]) {
                        *gv += dv;
                    }
                }
                if ng(b) {
                    let g = slot(grads, b, val(b));
                    for (gv, dv) in g.data_mut().iter_mut().zip(&d.data()[split..]) {
                        *gv += dv;
                    }
                }
            }
            &Op::Reshape(a) => {
                let g = slot(grads, a, val(a));
                for (gv, dv) in g.data_mut().iter_mut().zip(d.data()) {
                    *gv += dv;
                }
            }
            &Op::GroupSoftmax(a, group) => {
                let y = node.value.data();
                let g = slot(grads, a, val(a));
                for ((gch, dch), ych) in g.data_mut().chunks_mut(group).zip(d.data().chunks(group)).zip(y.chunks(group)) {
                    let dot: f64 = dch.iter().zip(ych).map(|(a, b)| a * b).sum();
                    for ((gv, dv), yv) in gch.iter_mut().zip(dch).zip(ych) {
                        *gv += yv * (dv - dot);
                    }
                }
            }
            &Op::GroupWeightedSum { w, z, group } => {
                let (tw, tz) = (val(w), val(z));
                let (n, m) = (tz.rows(), tz.cols());
                if ng(w) {
                    let g = slot(grads, w, tw);
                    for i in 0..n {
                        let drow = &d.data()[(i / group) * m..(i / group + 1) * m];
                        g.data_mut()[i] += crate::numerics::tensor::dot(drow, tz.row(i));
                    }
                }
                if ng(z) {
                    let wd = tw.data().to_vec();
                    let g = slot(grads, z, tz);
                    for i in 0..n {
                        let drow = &d.data()[(i / group) * m..(i / group + 1) * m];
                        for (gv, dv) in g.data_mut()[i * m..(i + 1) * m].iter_mut().zip(drow) {
                            *gv += wd[i] * dv;
                        }
                    }
                }
            }
            &Op::GroupMean(z, group) => {
                let tz = val(z);
                let (n, m) = (tz.rows(), tz.cols());
                let g = slot(grads, z, tz);
                for i in 0..n {
                    let drow = &d.data()[(i / group) * m..(i / group + 1) * m];
                    for (gv, dv) in g.data_mut()[i * m..(i + 1) * m].iter_mut().zip(drow) {
                        *gv += dv / group as f64;
                    }
                }
            }
            &Op::MulRow(x, r) => {
                let (tx, tr) = (val(x), val(r));
                let m = tx.cols();
                if ng(x) {
                    let g = slot(grads, x, tx);
                    for (grow, drow) in g.data_mut().chunks_mut(m).zip(d.data().chunks(m)) {
                        for ((gv, dv), rv) in grow.iter_mut().zip(drow).zip(tr.data()) {
                            *gv += dv * rv;
                        }
                    }
                }
                if ng(r) {
                    let g = slot(grads, r, tr);
                    for (drow, xrow) in d.data().chunks(m).zip(tx.data().chunks(m)) {
                        for ((gv, dv), xv) in g.data_mut().iter_mut().zip(drow).zip(xrow) {
                            *gv += dv * xv;
                        }
                    }
                }
            }
            Op::SqErrSum(a, target) => {
                let ta = val(*a);
                let s = d.data()[0];
                let g = slot(grads, *a, ta);
                for ((gv, av), tv) in g.data_mut().iter_mut().zip(ta.data()).zip(target.data()) {
                    *gv += 2.0 * (av - tv) * s;
                }
            }
            &Op::Sum(a) => {
                let s = d.data()[0];
                let g = slot(grads, a, val(a));
                g.data_mut().iter_mut().for_each(|v| *v += s);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: &[f64],
        d: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = (tq.rows(), tq.cols());
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_groups = n / group;
        let mut dq = vec![0.0; n * dm];
        let mut dk = vec![0.0; n * dm];
        let mut dv = vec![0.0; n * dm];
        let (qd, kd, vd, dd) = (tq.data(), tk.data(), tv.data(), d.data());
        let mut dp = vec![0.0; group];
        for gi in 0..n_groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..group {
                    let ri = (gi * group + i) * dm + off;
                    let pbase = ((gi * heads + h) * group + i) * group;
                    let douti = &dd[ri..ri + dh];
                    let mut rowdot = 0.0;
                    for j in 0..group {
                        let rj = (gi * group + j) * dm + off;
                        let p = probs[pbase + j];
                        dp[j] = crate::numerics::tensor::dot(douti, &vd[rj..rj + dh]);
                        rowdot += p * dp[j];
                        for (dvv, &o) in dv[rj..rj + dh].iter_mut().zip(douti) {
                            *dvv += p * o;
                        }
                    }
                    for j in 0..group {
                        let rj = (gi * group + j) * dm + off;
                        let ds = probs[pbase + j] * (dp[j] - rowdot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[ri + c] += ds * kd[rj + c];
                            dk[rj + c] += ds * qd[ri + c];
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                let s = slot(grads, var, self.value(var));
                for (sv, gv) in s.data_mut().iter_mut().zip(&g) {
                    *sv += gv;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - mx).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_passes_input_through() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 5.0, 9.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.0]));
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn uniform_logits_give_uniform_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.group_softmax(x, 3).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn backward_on_foreign_handle_is_a_state_error() {
        let mut other = Graph::new();
        let _ = other.constant(Tensor::scalar(1.0));
        let v = other.variable(Tensor::scalar(2.0));
        let empty = Graph::new();
        assert!(matches!(empty.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![2.0]));
        let x = g.variable(Tensor::vector(vec![4.0]));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
        assert!(grads.wrt(c).is_none());
    }
}
