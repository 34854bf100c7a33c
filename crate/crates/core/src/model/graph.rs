//! Tape-based reverse-mode differentiation over [`Tensor`]s.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Adds a constant; gradient passes straight through.
    Shift(Var),
    Relu(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Gather(Var, Vec<u32>),
    /// Entry `(i, j)` reads `table[buckets[i * klen + j], head]`.
    RelBias { table: Var, head: usize, buckets: Vec<usize> },
    /// Summed negative log-likelihood of `targets` under row-wise softmax;
    /// `None` targets are masked.
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Records a computation and differentiates it.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients for every parameter of a store, `None` when unused.
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Same value as `v`, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.value(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul_t(self.value(b));
        self.push(t, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        self.push(t, Op::Add(a, b))
    }

    /// Adds the `1 x cols` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "bias must be a row");
        let mut t = self.value(x).clone();
        for r in 0..t.rows {
            for (o, bv) in t.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(t, Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn shift(&mut self, x: Var, c: &Tensor) -> Var {
        let mut t = self.value(x).clone();
        t.add_assign(c);
        self.push(t, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(x))
    }

    /// Root-mean-square normalization over each row, scaled by `w` (`1 x cols`).
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / xv.cols as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            inv_rms.push(inv);
            for (o, wj) in out.row_mut(r).iter_mut().zip(&wv.data) {
                *o *= inv * wj;
            }
        }
        self.push(out, Op::RmsNorm { x, w, inv_rms })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for r in 0..t.rows {
            softmax_in_place(t.row_mut(r));
        }
        self.push(t, Op::SoftmaxRows(x))
    }

    /// Stacks along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows width");
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Joins along the column (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = xv.rows as f64;
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(x))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id as usize));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn rel_bias(&mut self, table: Var, head: usize, qlen: usize, klen: usize, buckets: Vec<usize>) -> Var {
        let tv = self.value(table);
        let data = buckets.iter().map(|&b| tv.at(b, head)).collect();
        self.push(Tensor::from_vec(qlen, klen, data), Op::RelBias { table, head, buckets })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logits row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            softmax_in_place(probs.row_mut(r));
            if let Some(t) = t {
                loss -= libm::log(probs.at(r, *t).max(f64::MIN_POSITIVE));
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the scalar `out` and returns parameter gradients.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        let seed = self.value(out).map(|_| 1.0);
        grads[out.0] = Some(seed);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => param_grads[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, b) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in db.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::Shift(x) => accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&xv.data) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::RmsNorm { x, w, inv_rms } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let n = xv.cols as f64;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    let mut dw = Tensor::zeros(1, xv.cols);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        let mut s = 0.0;
                        for j in 0..xv.cols {
                            dw.data[j] += gr[j] * xr[j] * inv;
                            s += gr[j] * wv.data[j] * xr[j];
                        }
                        let c = inv * inv * inv * s / n;
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv * gr[j] * wv.data[j] - c * xr[j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::SoftmaxRows(x) => {
                    let y: &Tensor = &node.value;
                    let mut dx = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let slice = g.data[off * cols..(off + rows) * cols].to_vec();
                        accumulate(&mut grads, *p, Tensor::from_vec(rows, cols, slice));
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(&mut grads, *p, d);
                        off += cols;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, v) in d.row_mut(r).iter_mut().zip(&g.data) {
                            *o = v / rows as f64;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::RelBias { table, head, buckets } => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for (&b, v) in buckets.iter().zip(&g.data) {
                        d.data[b * cols + head] += v;
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.data[0];
                    let mut d = Tensor::zeros(probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = p * scale;
                            }
                            d.data[r * probs.cols + t] -= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads: param_grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot => *slot = Some(d),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;

    /// Central differences on every entry of parameter `id`.
    fn check(store: &mut ParamStore, id: usize, f: &dyn Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(store);
            let out = f(&mut g);
            g.backward(out).grads[id].clone().unwrap()
        };
        let h = 1e-6;
        for k in 0..analytic.data.len() {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + h;
            let up = { let mut g = Graph::new(store); let o = f(&mut g); g.scalar(o) };
            store.value_mut(id).data[k] = orig - h;
            let down = { let mut g = Graph::new(store); let o = f(&mut g); g.scalar(o) };
            store.value_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-5, "param {id}[{k}]: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::default();
        let mut rng = crate::model::params::seeded(3);
        let a = store.add_normal("a", 3, 4, 1.0, &mut rng);
        let b = store.add_normal("b", 4, 4, 1.0, &mut rng);
        let w = store.add_normal("w", 1, 4, 1.0, &mut rng);
        let table = store.add_normal("table", 5, 4, 1.0, &mut rng);
        let bias = store.add_normal("bias", 1, 4, 1.0, &mut rng);
        let rel = store.add_normal("rel", 6, 2, 1.0, &mut rng);
        let f = |g: &mut Graph| {
            let (a, b, w, table, bias, rel) = (g.param(a), g.param(b), g.param(w), g.param(table), g.param(bias), g.param(rel));
            let x = g.gather(table, &[0, 2, 2]);
            let x = g.add(x, a);
            let y = g.matmul(x, b);
            let y = g.add_row(y, bias);
            let y = g.rms_norm(y, w, 1e-6);
            let s = g.matmul_t(y, x);
            let rb = g.rel_bias(rel, 1, 3, 3, alloc::vec![0, 1, 2, 3, 0, 1, 4, 5, 0]);
            let s = g.add(s, rb);
            let s = g.scale(s, 0.5);
            let p = g.softmax_rows(s);
            let z = g.matmul(p, y);
            let z = g.relu(z);
            let left = g.slice_cols(z, 0, 2);
            let right = g.slice_cols(y, 2, 2);
            let c = g.concat_cols(&[left, right]);
            let m = g.mean_rows(c);
            let stacked = g.concat_rows(&[c, m]);
            g.cross_entropy(stacked, &[Some(0), None, Some(3), Some(1)])
        };
        for id in [a, b, w, table, bias, rel] {
            check(&mut store, id, &f);
        }
    }
}
