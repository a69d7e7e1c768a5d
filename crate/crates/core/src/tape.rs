//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation pushes one
//! node whose inputs already exist, so append order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels;
pub use crate::kernels::AttnMask;
use crate::{Error, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Exp { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    LogSoftmax { x: Var, allowed: Option<Vec<bool>> },
    PickSum { x: Var, picks: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Recorded computation. Parameters may be borrowed for the tape's lifetime.
#[derive(Debug, Default)]
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients of a scalar root with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Grads<T> {
    /// Gradient for a leaf. Leaves the root does not depend on get zeros.
    pub fn get(&self, v: Var) -> &Tensor<T> {
        self.grads[v.0].as_ref().expect("gradient requested for a non-leaf node")
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().expect("gradient requested for a non-leaf node")
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a borrowed leaf without copying it.
    pub fn param(&mut self, value: &'p Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(format!("add of {:?} and {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a length-`c` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return shape_err(format!("row bias of length {} for {} columns", bv.len(), c));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(format!("mul of {:?} and {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if g.len() != d || b.len() != d {
            return shape_err(format!("layer norm over {d} columns with gain {} / bias {}", g.len(), b.len()));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = Vec::with_capacity(xv.rows());
        for (src, dst) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            stats.push(kernels::layer_norm_row(src, g.data(), b.data(), eps, dst));
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Multi-head attention of queries `q[m×d]` over keys `k[n×d]` and
    /// values `v[n×d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return shape_err(format!(
                "attention q {:?} k {:?} v {:?} with {heads} heads",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        let (m, n) = (qv.rows(), kv.rows());
        if mask.key_valid.as_ref().is_some_and(|kvld| kvld.len() != n) {
            return shape_err(format!("key mask length differs from {n} keys"));
        }
        let (out, probs) = kernels::attention(qv.data(), kv.data(), vv.data(), m, n, d, heads, mask);
        let out = Tensor::new(vec![m, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return shape_err("gather of zero rows".into());
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Index(format!("row {i} outside table of {r} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > xv.rows() {
            return shape_err(format!("rows {start}..{} of {}", start + len, xv.rows()));
        }
        let out = Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Row-wise log-softmax. With `allowed`, disallowed columns are removed
    /// from the normaliser, hold `T::min_value()` and receive no gradient.
    pub fn log_softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(a) = allowed {
            if a.len() != c {
                return shape_err(format!("support mask of {} for {c} columns", a.len()));
            }
            if !a.iter().any(|&b| b) {
                return Err(Error::Contract("empty support".into()));
            }
        }
        let mut out = Tensor::zeros(xv.shape());
        for (src, dst) in xv.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            kernels::log_softmax_row(src, allowed, dst);
        }
        Ok(self.push(out, Op::LogSoftmax { x, allowed: allowed.map(<[bool]>::to_vec) }))
    }

    /// `Σ x[row, col]` over the given picks.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut s = T::zero();
        for &(i, j) in picks {
            if i >= r || j >= c {
                return Err(Error::Index(format!("pick ({i}, {j}) outside {r}×{c}")));
            }
            s = s + xv.data()[i * c + j];
        }
        Ok(self.push(Tensor::scalar(s), Op::PickSum { x, picks: picks.to_vec() }))
    }

    /// `x · W + b` for a row-major weight `W[d_in×d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Cross-entropy of a single logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits).cols();
        if self.value(logits).rows() != 1 {
            return shape_err("cross_entropy expects a single row of logits".into());
        }
        if target >= v {
            return Err(Error::Index(format!("target {target} outside {v} classes")));
        }
        let lp = self.log_softmax(logits, None)?;
        let picked = self.pick_sum(lp, &[(0, target)])?;
        Ok(self.scale(picked, -T::one()))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut visited = 0;
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        leaves.resize_with(self.nodes.len(), || None);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(Grads { grads: leaves, visited })
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], leaves: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        fn acc<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
        }
        let shape_of = |v: Var| self.nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {
                leaves[i] = Some(g);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                kernels::acc_grad_a(acc(grads, *a, shape_of(*a)).data_mut(), g.data(), bv.data(), m, k, p);
                kernels::acc_grad_b(acc(grads, *b, shape_of(*b)).data_mut(), av.data(), g.data(), m, k, p);
            }
            Op::Add { a, b } => {
                acc(grads, *a, shape_of(*a)).add_assign(&g);
                acc(grads, *b, shape_of(*b)).add_assign(&g);
            }
            Op::AddRow { x, bias } => {
                acc(grads, *x, shape_of(*x)).add_assign(&g);
                let c = g.cols();
                let gb = acc(grads, *bias, shape_of(*bias));
                for row in g.data().chunks(c) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let ga = acc(grads, *a, shape_of(*a));
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o = *o + gv * y;
                }
                let gb = acc(grads, *b, shape_of(*b));
                for ((o, &gv), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o = *o + gv * x;
                }
            }
            Op::Scale { x, c } => {
                let gx = acc(grads, *x, shape_of(*x));
                for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gv * *c;
                }
            }
            Op::Sum { x } => {
                let s = g.item();
                let gx = acc(grads, *x, shape_of(*x));
                for o in gx.data_mut() {
                    *o = *o + s;
                }
            }
            Op::Exp { x } => {
                let gx = acc(grads, *x, shape_of(*x));
                for ((o, &gv), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                    *o = *o + gv * y;
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let gx = acc(grads, *x, shape_of(*x));
                for ((o, &gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *o = *o + gv * kernels::gelu_grad(xi);
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = val(*x);
                let gainv = val(*gain);
                let d = xv.cols();
                let dn = T::lit(d as f64);
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                {
                    let gx = acc(grads, *x, shape_of(*x));
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            xhat[j] = (xr[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gainv.data()[j];
                            dgain[j] = dgain[j] + gr[j] * xhat[j];
                            dbias[j] = dbias[j] + gr[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                for (o, v) in acc(grads, *gain, shape_of(*gain)).data_mut().iter_mut().zip(dgain) {
                    *o = *o + v;
                }
                for (o, v) in acc(grads, *bias, shape_of(*bias)).data_mut().iter_mut().zip(dbias) {
                    *o = *o + v;
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (m, n, d) = (qv.rows(), kv.rows(), qv.cols());
                let mut dq = vec![T::zero(); m * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    g.data(),
                    m,
                    n,
                    d,
                    *heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    for (o, d) in acc(grads, var, shape_of(var)).data_mut().iter_mut().zip(delta) {
                        *o = *o + d;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = g.cols();
                let gt = acc(grads, *table, shape_of(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = g.cols();
                let gx = acc(grads, *x, shape_of(*x));
                let dst = &mut gx.data_mut()[start * c..start * c + g.len()];
                for (o, &v) in dst.iter_mut().zip(g.data()) {
                    *o = *o + v;
                }
            }
            Op::LogSoftmax { x, allowed } => {
                let c = g.cols();
                let y = node.value.data();
                let gx = acc(grads, *x, shape_of(*x));
                for r in 0..g.rows() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let ok = |j: usize| allowed.as_ref().is_none_or(|a| a[j]);
                    let mut s = T::zero();
                    for j in 0..c {
                        if ok(j) {
                            s = s + gr[j];
                        }
                    }
                    let out = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        if ok(j) {
                            out[j] = out[j] + gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::PickSum { x, picks } => {
                let s = g.item();
                let gx = acc(grads, *x, shape_of(*x));
                let c = gx.cols();
                for &(r, j) in picks {
                    gx.data_mut()[r * c + j] = gx.data_mut()[r * c + j] + s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[3], 2.0));
        let w = t.leaf(Tensor::full(&[2, 2], 5.0));
        let y = t.exp(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(w).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.get(w).shape(), &[2, 2]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[3], 2.0));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn visits_each_reachable_node_once() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[2], 1.0));
        let _dead = t.leaf(Tensor::full(&[2], 1.0));
        let a = t.exp(x);
        let b = t.add(a, a).unwrap();
        let s = t.sum(b);
        let g = t.backward(s).unwrap();
        // s, b, a, x
        assert_eq!(g.visited(), 4);
        assert!(g.get(x).data().iter().all(|&v| (v - 2.0 * 1f64.exp()).abs() < 1e-14));
    }
}
