//! Reverse-mode gradient tape.
//!
//! Every recorded operation appends a node holding its forward value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in exact reverse
//! order, accumulating into per-node buffers; gradients that reach a parameter
//! leaf are added straight into the caller's [`Grads`], so large embedding
//! tables only ever see sparse row updates.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{self, dot, window, Mode, Tensor};

/// Probability floor applied before taking a log.
pub const LOG_FLOOR: f64 = 1e-12;

/// `max(p, LOG_FLOOR)` that lets NaN through.
pub fn floor_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(LOG_FLOOR)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout(Var, Vec<f64>),
    Lookup(Var, Vec<usize>),
    Row(Var, usize),
    Conv(Var, Var, Var),
    WeightedSum(Var, Var),
    MeanRows(Var),
    Stack(Vec<Var>),
    Select(Var, usize),
    NegLog(Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    DotAll(Var, Var),
    BceLogits(Var, f64),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf borrowing a parameter; its gradient lands in `Grads[id]`.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let out = tensor::matvec(self.value(a), self.value(x))?;
        Ok(self.push(out, Op::MatVec(a, x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = tensor::tanh(self.value(x));
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return dim_err("softmax", xv.shape(), &[]);
        }
        if let Some(m) = mask {
            if m.len() != xv.len() || !m.iter().any(|&k| k) {
                return dim_err("softmax", xv.shape(), &[m.len()]);
            }
        }
        let out = tensor::masked_softmax(xv, mask);
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match tensor::dropout(self.value(x), rate, mode, rng)? {
            (_, None) => Ok(x),
            (out, Some(mask)) => Ok(self.push(out, Op::Dropout(x, mask))),
        }
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = tensor::embedding_lookup(self.value(table), ids)?;
        Ok(self.push(out, Op::Lookup(table, ids.to_vec())))
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return dim_err("row", t.shape(), &[]);
        }
        if index >= t.rows() {
            return Err(crate::Error::Index {
                what: "matrix row",
                index,
                size: t.rows(),
            });
        }
        let out = Tensor::vector(t.row(index).to_vec());
        Ok(self.push(out, Op::Row(table, index)))
    }

    pub fn conv1d_seq(&mut self, embeds: Var, filters: Var, bias: Var) -> Result<Var> {
        let out = tensor::conv1d_seq(self.value(embeds), self.value(filters), self.value(bias))?;
        Ok(self.push(out, Op::Conv(embeds, filters, bias)))
    }

    /// `Σ_i weights[i] · rows[i]` for `weights: [n]`, `rows: [n×d]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (w, r) = (self.value(weights), self.value(rows));
        if w.rank() != 1 || r.rank() != 2 || w.len() != r.rows() {
            return dim_err("weighted_sum", w.shape(), r.shape());
        }
        let mut out = vec![0.0; r.cols()];
        for (i, &wi) in w.data().iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(r.row(i)) {
                *o += wi * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedSum(weights, rows)))
    }

    pub fn mean_rows(&mut self, rows: Var) -> Result<Var> {
        let r = self.value(rows);
        if r.rank() != 2 {
            return dim_err("mean_rows", r.shape(), &[]);
        }
        let n = r.rows() as f64;
        let mut out = vec![0.0; r.cols()];
        for i in 0..r.rows() {
            for (o, x) in out.iter_mut().zip(r.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(rows)))
    }

    /// Stack equal-length vectors into a matrix.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = match items.first() {
            Some(&v) => self.value(v),
            None => return dim_err("stack", &[0], &[]),
        };
        let d = first.len();
        let mut data = Vec::with_capacity(items.len() * d);
        for &v in items {
            let t = self.value(v);
            if t.rank() != 1 || t.len() != d {
                return dim_err("stack", &[d], t.shape());
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![items.len(), d], data)?;
        Ok(self.push(out, Op::Stack(items.to_vec())))
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(crate::Error::Index {
                what: "vector element",
                index,
                size: t.len(),
            });
        }
        let out = Tensor::scalar(t.data()[index]);
        Ok(self.push(out, Op::Select(x, index)))
    }

    /// `-ln(max(x, LOG_FLOOR))` of a scalar.
    pub fn neg_log(&mut self, x: Var) -> Var {
        let v = floor_prob(self.value(x).item());
        let out = Tensor::scalar(-libm::log(v));
        self.push(out, Op::NegLog(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let mut acc = match items.first() {
            Some(&v) => self.value(v).clone(),
            None => return dim_err("sum", &[0], &[]),
        };
        for &v in &items[1..] {
            let t = self.value(v);
            if t.shape() != acc.shape() {
                return dim_err("sum", acc.shape(), t.shape());
            }
            acc.add_assign(t);
        }
        Ok(self.push(acc, Op::Sum(items.to_vec())))
    }

    /// Full contraction `Σ a ⊙ b` to a scalar.
    pub fn dot_all(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err("dot_all", ta.shape(), tb.shape());
        }
        let out = Tensor::scalar(dot(ta.data(), tb.data()));
        Ok(self.push(out, Op::DotAll(a, b)))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`, computed
    /// from the logit for stability.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Var {
        let z = self.value(logit).item();
        let loss = z.max(0.0) - z * label + libm::log1p(libm::exp(-z.abs()));
        self.push(Tensor::scalar(loss), Op::BceLogits(logit, label))
    }

    /// Accumulate `d output / d param` into `grads`, seeding with ones.
    pub fn backward(&self, output: Var, grads: &mut Grads) {
        let mut node_grads: Vec<Option<Tensor>> = Vec::new();
        node_grads.resize_with(output.0 + 1, || None);
        node_grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            let mut acc = Acc {
                nodes: &self.nodes,
                node_grads: &mut node_grads,
                grads,
            };
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if let Some(da) = acc.target(*a) {
                        let da = da.data_mut();
                        for i in 0..m {
                            for p in 0..k {
                                da[i * k + p] += dot(&g.data()[i * n..(i + 1) * n], bv.row(p));
                            }
                        }
                    }
                    if let Some(db) = acc.target(*b) {
                        let db = db.data_mut();
                        for i in 0..m {
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += a_ip * g.data()[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::MatVec(a, x) => {
                    let (av, xv) = (self.value(*a), self.value(*x));
                    let k = av.cols();
                    if let Some(da) = acc.target(*a) {
                        let da = da.data_mut();
                        for (i, gi) in g.data().iter().enumerate() {
                            for (d, xp) in da[i * k..(i + 1) * k].iter_mut().zip(xv.data()) {
                                *d += gi * xp;
                            }
                        }
                    }
                    if let Some(dx) = acc.target(*x) {
                        let dx = dx.data_mut();
                        for (i, gi) in g.data().iter().enumerate() {
                            for (d, a) in dx.iter_mut().zip(av.row(i)) {
                                *d += gi * a;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    if let Some(dx) = acc.target(*x) {
                        for ((d, gi), xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                            if *xi > 0.0 {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(dx) = acc.target(*x) {
                        for ((d, gi), y) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                            *d += gi * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(dx) = acc.target(*x) {
                        for ((d, gi), y) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                            *d += gi * y * (1.0 - y);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let inner = dot(out.data(), g.data());
                    if let Some(dx) = acc.target(*x) {
                        for ((d, gi), y) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                            *d += y * (gi - inner);
                        }
                    }
                }
                Op::Dropout(x, mask) => {
                    if let Some(dx) = acc.target(*x) {
                        for ((d, gi), m) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                            *d += gi * m;
                        }
                    }
                }
                Op::Lookup(table, ids) => {
                    if let Some(dt) = acc.target(*table) {
                        for (i, &id) in ids.iter().enumerate() {
                            for (d, gi) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Row(table, index) => {
                    if let Some(dt) = acc.target(*table) {
                        for (d, gi) in dt.row_mut(*index).iter_mut().zip(g.data()) {
                            *d += gi;
                        }
                    }
                }
                Op::Conv(e, f, b) => {
                    let (ev, fv) = (self.value(*e), self.value(*f));
                    let (len, dim) = (ev.rows(), ev.cols());
                    let width = fv.cols();
                    let half = (width / dim) / 2;
                    if let Some(de) = acc.target(*e) {
                        for i in 0..len {
                            let gi = g.row(i);
                            for (tap, pos) in window(i, half, len) {
                                let drow = de.row_mut(pos);
                                for (fi, gf) in gi.iter().enumerate() {
                                    if *gf == 0.0 {
                                        continue;
                                    }
                                    let w = &fv.data()[fi * width + tap * dim..fi * width + (tap + 1) * dim];
                                    for (d, wv) in drow.iter_mut().zip(w) {
                                        *d += gf * wv;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(df) = acc.target(*f) {
                        let df = df.data_mut();
                        for i in 0..len {
                            let gi = g.row(i);
                            for (tap, pos) in window(i, half, len) {
                                let erow = ev.row(pos);
                                for (fi, gf) in gi.iter().enumerate() {
                                    if *gf == 0.0 {
                                        continue;
                                    }
                                    let start = fi * width + tap * dim;
                                    for (d, x) in df[start..start + dim].iter_mut().zip(erow) {
                                        *d += gf * x;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(db) = acc.target(*b) {
                        let db = db.data_mut();
                        for i in 0..len {
                            for (d, gf) in db.iter_mut().zip(g.row(i)) {
                                *d += gf;
                            }
                        }
                    }
                }
                Op::WeightedSum(w, rows) => {
                    let (wv, rv) = (self.value(*w), self.value(*rows));
                    if let Some(dw) = acc.target(*w) {
                        for (i, d) in dw.data_mut().iter_mut().enumerate() {
                            *d += dot(g.data(), rv.row(i));
                        }
                    }
                    if let Some(dr) = acc.target(*rows) {
                        for (i, wi) in wv.data().iter().enumerate() {
                            for (d, gj) in dr.row_mut(i).iter_mut().zip(g.data()) {
                                *d += wi * gj;
                            }
                        }
                    }
                }
                Op::MeanRows(rows) => {
                    let n = self.value(*rows).rows();
                    if let Some(dr) = acc.target(*rows) {
                        let inv = 1.0 / n as f64;
                        for i in 0..n {
                            for (d, gj) in dr.row_mut(i).iter_mut().zip(g.data()) {
                                *d += gj * inv;
                            }
                        }
                    }
                }
                Op::Stack(items) => {
                    for (i, &v) in items.iter().enumerate() {
                        if let Some(dv) = acc.target(v) {
                            for (d, gj) in dv.data_mut().iter_mut().zip(g.row(i)) {
                                *d += gj;
                            }
                        }
                    }
                }
                Op::Select(x, index) => {
                    if let Some(dx) = acc.target(*x) {
                        dx.data_mut()[*index] += g.item();
                    }
                }
                Op::NegLog(x) => {
                    let xv = self.value(*x).item();
                    if xv >= LOG_FLOOR {
                        if let Some(dx) = acc.target(*x) {
                            dx.data_mut()[0] -= g.item() / xv;
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    if let Some(dx) = acc.target(*x) {
                        for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                            *d += factor * gi;
                        }
                    }
                }
                Op::Sum(items) => {
                    for &v in items {
                        acc.add(v, &g);
                    }
                }
                Op::DotAll(a, b) => {
                    let s = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(da) = acc.target(*a) {
                        for (d, x) in da.data_mut().iter_mut().zip(bv.data()) {
                            *d += s * x;
                        }
                    }
                    if let Some(db) = acc.target(*b) {
                        for (d, x) in db.data_mut().iter_mut().zip(av.data()) {
                            *d += s * x;
                        }
                    }
                }
                Op::BceLogits(z, label) => {
                    let p = tensor::sigmoid_scalar(self.value(*z).item());
                    if let Some(dz) = acc.target(*z) {
                        dz.data_mut()[0] += g.item() * (p - label);
                    }
                }
            }
        }
    }
}

/// Routes gradient contributions either to a node buffer or, for parameter
/// leaves, directly into the caller's [`Grads`].
struct Acc<'a, 'p> {
    nodes: &'a [Node<'p>],
    node_grads: &'a mut [Option<Tensor>],
    grads: &'a mut Grads,
}

impl Acc<'_, '_> {
    fn target(&mut self, v: Var) -> Option<&mut Tensor> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Constant => None,
            Op::Param(id) => Some(self.grads.get_mut(id)),
            _ => Some(
                self.node_grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())),
            ),
        }
    }

    fn add(&mut self, v: Var, g: &Tensor) {
        if let Some(t) = self.target(v) {
            t.add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_use_accumulates() {
        let mut store = ParamStore::new();
        let w = store.push("w", Tensor::vector(alloc::vec![3.0]));
        let mut tape = Tape::new(&store);
        let x = tape.param(w);
        let y = tape.sum(&[x, x, x]).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(y, &mut grads);
        assert_eq!(grads.get(w).data(), &[3.0]);
    }

    #[test]
    fn lookup_scatter_adds_repeated_ids() {
        let mut store = ParamStore::new();
        let t = store.push("t", Tensor::zeros(&[3, 2]));
        let mut tape = Tape::new(&store);
        let tv = tape.param(t);
        let rows = tape.embedding_lookup(tv, &[1, 1]).unwrap();
        let coeff = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[10.0, 20.0]]));
        let loss = tape.dot_all(rows, coeff).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads);
        assert_eq!(grads.get(t).row(1), &[11.0, 22.0]);
        assert_eq!(grads.get(t).row(0), &[0.0, 0.0]);
    }

    #[test]
    fn eval_dropout_records_nothing() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
        assert_eq!(tape.len(), 1);
    }
}
