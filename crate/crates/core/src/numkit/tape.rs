//! Eager reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! the backward sweep simply walks it in reverse, touching each node once.
//! Leaf gradients persist on the tape and accumulate across `backward`
//! calls until [`Tape::zero_grad`]; interior adjoints are scratch values
//! local to a single sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::array::{check_finite, finish, matmul_nt_raw, matmul_raw, matmul_tn_raw, DenseArray};
use super::ops;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    MeanRows(Var),
    PoolRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    XLogX(Var, f64),
    CrossEntropy(Var, Arc<[usize]>),
    LayerMix(Var, Arc<[Arc<DenseArray>]>),
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a backward sweep, keyed by leaf handle.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<Var, DenseArray>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.map.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &DenseArray)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: BTreeMap<usize, DenseArray>,
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

    /// Trainable input.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any sweep has reached it.
    pub fn grad(&self, v: Var) -> Option<&DenseArray> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: DenseArray, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: DenseArray, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).scale(factor)?;
        Ok(self.unary(x, value, Op::Scale(x, factor)))
    }

    /// `x[r, c] + bias[c]` for a matrix `x` and vector `bias`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.len() {
            return Err(Error::dim("add_row_bias", xv.shape(), bv.shape()));
        }
        let cols = bv.len();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % cols])
            .collect();
        let value = finish("add_row_bias", xv.shape().to_vec(), out)?;
        Ok(self.binary(x, bias, value, Op::AddRowBias(x, bias)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map("gelu", ops::gelu)?;
        Ok(self.unary(x, value, Op::Gelu(x)))
    }

    /// Row-wise softmax; a vector is treated as one row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_rows(self.value(x))?;
        Ok(self.unary(x, value, Op::SoftmaxRows(x)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::dim("concat_cols", av.shape(), bv.shape()));
        }
        let (rows, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = DenseArray::from_parts(vec![rows, ca + cb], out);
        Ok(self.binary(a, b, value, Op::ConcatCols(a, b)))
    }

    /// Mean over rows of a matrix, producing a vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] == 0 {
            return Err(Error::dim("mean_rows", xv.shape(), &[]));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let value = finish("mean_rows", vec![cols], out)?;
        Ok(self.unary(x, value, Op::MeanRows(x)))
    }

    /// Averages consecutive blocks of `group` rows: `[(n·group)×c] → [n×c]`.
    pub fn pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || group == 0 || !xv.shape()[0].is_multiple_of(group) {
            return Err(Error::dim("pool_rows", xv.shape(), &[group]));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let n = rows / group;
        let mut out = vec![0.0; n * cols];
        for r in 0..rows {
            let orow = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= group as f64);
        let value = finish("pool_rows", vec![n, cols], out)?;
        Ok(self.unary(x, value, Op::PoolRows(x, group)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = DenseArray::scalar(self.value(x).sum())?;
        Ok(self.unary(x, value, Op::Sum(x)))
    }

    /// Elementwise `x · ln(x + eps)`.
    pub fn xlogx(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v + eps <= 0.0) {
            return Err(Error::NonFinite { op: "xlogx" });
        }
        let value = xv.map("xlogx", |v| v * (v + eps).ln())?;
        Ok(self.unary(x, value, Op::XLogX(x, eps)))
    }

    /// Summed softmax cross-entropy of each logit row against its target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || lv.shape()[1] == 0 {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let k = lv.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target {t} out of range for {k} classes")));
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| ops::cross_entropy_row(lv.row(r), t))
            .sum();
        let value = DenseArray::scalar(total)?;
        Ok(self.unary(logits, value, Op::CrossEntropy(logits, targets.into())))
    }

    /// Per-row convex mixture of constant layer stacks.
    ///
    /// `weights` is `[B×L]`; `stacks[b]` is any array whose leading extent is
    /// `L`, viewed as `[L×N]`. Output row `b` is `Σ_l weights[b,l] · stacks[b][l,:]`.
    /// The stacks are frozen inputs and receive no gradient.
    pub fn layer_mix(&mut self, weights: Var, stacks: Arc<[Arc<DenseArray>]>) -> Result<Var> {
        let wv = self.value(weights);
        if wv.rank() != 2 || wv.shape()[0] != stacks.len() || stacks.is_empty() {
            return Err(Error::dim("layer_mix", wv.shape(), &[stacks.len()]));
        }
        let (b, l) = (wv.shape()[0], wv.shape()[1]);
        let n = stacks[0].cols();
        for s in stacks.iter() {
            if s.rows() != l || s.cols() != n {
                return Err(Error::dim("layer_mix", wv.shape(), s.shape()));
            }
        }
        let mut out = Vec::with_capacity(b * n);
        for (r, s) in stacks.iter().enumerate() {
            out.extend(matmul_raw(wv.row(r), s.data(), 1, l, n));
        }
        let value = finish("layer_mix", vec![b, n], out)?;
        Ok(self.unary(weights, value, Op::LayerMix(weights, stacks)))
    }

    /// Gradients of a scalar `root` with respect to every trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let seed = DenseArray::from_parts(rv.shape().to_vec(), vec![1.0]);
        self.backward_seeded(&[(root, seed)])
    }

    /// Backward sweep from arbitrary upstream adjoints, e.g. to join a
    /// gradient computed on another tape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, DenseArray)]) -> Result<Gradients> {
        let mut adj: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::dim("backward_seeded", g.shape(), self.value(*v).shape()));
            }
            check_finite("backward_seeded", g.data())?;
            accumulate(&mut adj[v.0], g.clone());
            top = top.max(v.0 + 1);
        }

        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                adj[i] = Some(g);
                continue;
            }
            for (input, grad) in self.local_grads(i, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut adj[input.0], grad);
                }
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = adj[i]
                .take()
                .unwrap_or_else(|| DenseArray::zeros(node.value.shape()));
            check_finite("backward", g.data())?;
            match self.leaf_grads.get_mut(&i) {
                Some(acc) => acc.add_assign_unchecked(&g),
                None => {
                    self.leaf_grads.insert(i, g.clone());
                }
            }
            out.map.insert(Var(i), self.leaf_grads[&i].clone());
        }
        Ok(out)
    }

    fn local_grads(&self, i: usize, g: &DenseArray) -> Result<Vec<(Var, DenseArray)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt_raw(g.data(), bv.data(), m, n, k);
                    out.push((*a, DenseArray::from_parts(vec![m, k], da)));
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn_raw(av.data(), g.data(), m, k, n);
                    out.push((*b, DenseArray::from_parts(vec![k, n], db)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0)?)],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(x, f) => vec![(*x, g.scale(*f)?)],
            Op::AddRowBias(x, bias) => {
                let cols = val(*bias).len();
                let mut db = vec![0.0; cols];
                for (j, v) in g.data().iter().enumerate() {
                    db[j % cols] += v;
                }
                vec![(*x, g.clone()), (*bias, DenseArray::from_parts(vec![cols], db))]
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, gi)| gi * ops::gelu_grad(xi))
                    .collect();
                vec![(*x, DenseArray::from_parts(xv.shape().to_vec(), d))]
            }
            Op::SoftmaxRows(x) => {
                let w = &node.value;
                let cols = w.cols();
                let mut d = vec![0.0; w.len()];
                for r in 0..w.rows() {
                    let wr = w.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = wr[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, DenseArray::from_parts(w.shape().to_vec(), d))]
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).shape()[1], val(*b).shape()[1]);
                let rows = val(*a).shape()[0];
                let (mut da, mut db) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                for r in 0..rows {
                    let gr = g.row(r);
                    da.extend_from_slice(&gr[..ca]);
                    db.extend_from_slice(&gr[ca..]);
                }
                vec![
                    (*a, DenseArray::from_parts(vec![rows, ca], da)),
                    (*b, DenseArray::from_parts(vec![rows, cb], db)),
                ]
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let rows = xv.shape()[0];
                let d = (0..rows)
                    .flat_map(|_| g.data().iter().map(|v| v / rows as f64))
                    .collect();
                vec![(*x, DenseArray::from_parts(xv.shape().to_vec(), d))]
            }
            Op::PoolRows(x, group) => {
                let xv = val(*x);
                let rows = xv.shape()[0];
                let d = (0..rows)
                    .flat_map(|r| g.row(r / group).iter().map(|v| v / *group as f64))
                    .collect();
                vec![(*x, DenseArray::from_parts(xv.shape().to_vec(), d))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Sum(x) => {
                let gv = g.item()?;
                vec![(*x, DenseArray::from_parts(val(*x).shape().to_vec(), vec![gv; val(*x).len()]))]
            }
            Op::XLogX(x, eps) => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, gi)| gi * ((v + eps).ln() + v / (v + eps)))
                    .collect();
                vec![(*x, DenseArray::from_parts(xv.shape().to_vec(), d))]
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = val(*logits);
                let gv = g.item()?;
                let k = lv.shape()[1];
                let mut d = Vec::with_capacity(lv.len());
                for (r, &t) in targets.iter().enumerate() {
                    let p = ops::softmax_slice(lv.row(r));
                    d.extend(p.iter().enumerate().map(|(c, &pc)| {
                        gv * (pc - if c == t { 1.0 } else { 0.0 })
                    }));
                }
                vec![(*logits, DenseArray::from_parts(vec![targets.len(), k], d))]
            }
            Op::LayerMix(w, stacks) => {
                let wv = val(*w);
                let (b, l) = (wv.shape()[0], wv.shape()[1]);
                let n = stacks[0].cols();
                let mut d = Vec::with_capacity(b * l);
                for (r, s) in stacks.iter().enumerate() {
                    d.extend(matmul_nt_raw(g.row(r), s.data(), 1, n, l));
                }
                vec![(*w, DenseArray::from_parts(vec![b, l], d))]
            }
        };
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<DenseArray>, g: DenseArray) {
    match slot {
        Some(acc) => acc.add_assign_unchecked(&g),
        None => *slot = Some(g),
    }
}
