//! Wengert tape: records primitive applications during the forward pass and
//! replays them in reverse to produce gradients.
//!
//! One tape per forward pass; forward activations are saved eagerly (no
//! recomputation). Replay is deterministic: the same forward sequence yields
//! bit-identical gradients. Gradients of interior nodes are dropped as soon
//! as they have been propagated, so only leaves marked `requires_grad` are
//! retained in the result.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{CastError, Result};
use crate::tensor::{self, AttentionFn, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul,
    TransposeLast2,
    Softmax { axis: usize },
    Sigmoid,
    SoftplusPlusOne,
    Softplus,
    Laplace,
    Neg,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale { c: T },
    BroadcastLast { k: usize },
    Reshape,
    NarrowLast { start: usize, width: usize },
    ConcatLast { widths: Vec<usize> },
    SumAxis { axis: usize },
    SumAll,
    GatherRows { idx: Rc<Vec<usize>> },
    ScatterAddRows { idx: Rc<Vec<usize>> },
    GatherClusterScores { idx: Rc<Vec<usize>>, kappa: usize },
    PadRows,
    ClusterAttn { tau: f64, f: AttentionFn },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients for requires-grad leaves, keyed by their `Var`.
pub struct Grads<T: Scalar> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v.0)
    }

    pub fn expect(&self, v: Var) -> &Tensor<T> {
        self.map.get(&v.0).expect("no gradient recorded for var")
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    /// Debug hook: scales the matmul adjoint for the left operand, used as a
    /// negative control to prove the gradient checker is not vacuous.
    corrupt_matmul_adjoint: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), corrupt_matmul_adjoint: Cell::new(false) }
    }

    pub fn set_corrupt_matmul_adjoint(&self, on: bool) {
        self.corrupt_matmul_adjoint.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, parents: Vec<Var>, op: Op<T>) -> Var {
        let nodes = &mut self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node { value, parents, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Registers a leaf that participates in backward.
    pub fn input(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let nodes = &mut self.nodes.borrow_mut();
        nodes.push(Node { value, parents: vec![], op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Registers a non-differentiable leaf (masks, constants).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // -- recorded primitives -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(&self.value(a), &self.value(b))?;
        Ok(self.push(out, vec![a, b], Op::MatMul))
    }

    pub fn transpose_last2(&self, a: Var) -> Result<Var> {
        let out = tensor::transpose_last2(&self.value(a))?;
        Ok(self.push(out, vec![a], Op::TransposeLast2))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(&self.value(a), axis)?;
        Ok(self.push(out, vec![a], Op::Softmax { axis }))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = tensor::sigmoid(&self.value(a))?;
        Ok(self.push(out, vec![a], Op::Sigmoid))
    }

    pub fn softplus_plus_one(&self, a: Var) -> Result<Var> {
        let out = tensor::softplus_plus_one(&self.value(a))?;
        Ok(self.push(out, vec![a], Op::SoftplusPlusOne))
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        v.check_finite("softplus input")?;
        let out = v.map(tensor::softplus_scalar);
        drop(v);
        Ok(self.push(out, vec![a], Op::Softplus))
    }

    pub fn laplace(&self, a: Var) -> Result<Var> {
        let out = tensor::laplace_attn(&self.value(a))?;
        Ok(self.push(out, vec![a], Op::Laplace))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| -v);
        Ok(self.push(out, vec![a], Op::Neg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_map(&self.value(a), &self.value(b), |x, y| x + y)?;
        out.check_finite("add")?;
        Ok(self.push(out, vec![a, b], Op::Add))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_map(&self.value(a), &self.value(b), |x, y| x - y)?;
        out.check_finite("sub")?;
        Ok(self.push(out, vec![a, b], Op::Sub))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_map(&self.value(a), &self.value(b), |x, y| x * y)?;
        out.check_finite("mul")?;
        Ok(self.push(out, vec![a, b], Op::Mul))
    }

    /// Adds a single-element bias tensor, broadcast to every element of `a`.
    pub fn add_bias(&self, a: Var, b: Var) -> Result<Var> {
        let bv = self.value(b);
        if bv.len() != 1 {
            return Err(CastError::Shape(format!("bias must be scalar, got {:?}", bv.shape())));
        }
        let c = bv.data()[0];
        drop(bv);
        let out = self.value(a).map(|v| v + c);
        out.check_finite("add_bias")?;
        Ok(self.push(out, vec![a, b], Op::AddBias))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        out.check_finite("scale")?;
        Ok(self.push(out, vec![a], Op::Scale { c }))
    }

    /// Expands a trailing extent of 1 to `k` by repetition.
    pub fn broadcast_last(&self, a: Var, k: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if shape.last() != Some(&1) {
            return Err(CastError::Shape(format!("broadcast_last needs trailing 1, got {:?}", shape)));
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = k;
        let mut data = Vec::with_capacity(v.len() * k);
        for &x in v.data() {
            for _ in 0..k {
                data.push(x);
            }
        }
        drop(v);
        let out = Tensor::from_vec(out_shape, data);
        Ok(self.push(out, vec![a], Op::BroadcastLast { k }))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, vec![a], Op::Reshape))
    }

    /// Selects the contiguous column range `[start, start+len)` of the last axis.
    pub fn narrow_last(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let width = *shape.last().ok_or_else(|| CastError::Shape("narrow on rank-0".into()))?;
        if start + len > width {
            return Err(CastError::Shape(format!(
                "narrow [{}, {}) out of width {}",
                start,
                start + len,
                width
            )));
        }
        let rows = v.len() / width;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * width + start..r * width + start + len]);
        }
        drop(v);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(out_shape, data);
        Ok(self.push(out, vec![a], Op::NarrowLast { start, width }))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CastError::Shape("concat of zero tensors".into()));
        }
        let first_shape = self.shape_of(parts[0]);
        let lead = &first_shape[..first_shape.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape_of(p);
            if &s[..s.len() - 1] != lead {
                return Err(CastError::Shape(format!("concat leading dims differ: {:?} vs {:?}", first_shape, s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        let nodes = self.nodes.borrow();
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let d = nodes[p.0].value.data();
                data.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(nodes);
        let mut out_shape = lead.to_vec();
        out_shape.push(total);
        let out = Tensor::from_vec(out_shape, data);
        Ok(self.push(out, parts.to_vec(), Op::ConcatLast { widths }))
    }

    /// Sums along `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(CastError::Shape(format!("sum axis {} out of {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[(o * len + j) * inner + i];
                }
            }
        }
        drop(v);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_vec(out_shape, data);
        out.check_finite("sum_axis")?;
        Ok(self.push(out, vec![a], Op::SumAxis { axis }))
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut s = T::ZERO;
        for &x in v.data() {
            s += x;
        }
        drop(v);
        let out = Tensor::scalar(s);
        out.check_finite("sum_all")?;
        Ok(self.push(out, vec![a], Op::SumAll))
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let out = tensor::gather_rows(&self.value(a), &idx)?;
        Ok(self.push(out, vec![a], Op::GatherRows { idx }))
    }

    pub fn scatter_add_rows(&self, a: Var, idx: Rc<Vec<usize>>, target_len: usize) -> Result<Var> {
        let out = tensor::scatter_add_rows(&self.value(a), &idx, target_len)?;
        Ok(self.push(out, vec![a], Op::ScatterAddRows { idx }))
    }

    /// For scores `a` of shape [N, N_c] and flat cluster indices (N_c * kappa),
    /// produces `[N_c, kappa]` with entry (j, s) = a[idx[j, s], j]. This is the
    /// gather-then-identity-contraction used for per-member cluster weights.
    pub fn gather_cluster_scores(&self, a: Var, idx: Rc<Vec<usize>>, kappa: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if shape.len() != 2 {
            return Err(CastError::Shape(format!("cluster scores need [N, N_c], got {:?}", shape)));
        }
        let (n, n_c) = (shape[0], shape[1]);
        if idx.len() != n_c * kappa {
            return Err(CastError::Shape(format!(
                "assignment has {} slots, expected {}x{}",
                idx.len(),
                n_c,
                kappa
            )));
        }
        let mut data = Vec::with_capacity(n_c * kappa);
        for j in 0..n_c {
            for s in 0..kappa {
                let t = idx[j * kappa + s];
                if t >= n {
                    return Err(CastError::Index(format!("token {} out of {}", t, n)));
                }
                data.push(v.data()[t * n_c + j]);
            }
        }
        drop(v);
        let out = Tensor::from_vec(vec![n_c, kappa], data);
        Ok(self.push(out, vec![a], Op::GatherClusterScores { idx, kappa }))
    }

    /// Appends zero rows until axis 0 has `n_total` extents.
    pub fn pad_rows(&self, a: Var, n_total: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = shape[0];
        if n_total < n {
            return Err(CastError::Shape(format!("pad target {} below current {}", n_total, n)));
        }
        let row: usize = shape[1..].iter().product();
        let mut data = v.data().to_vec();
        data.resize(n_total * row, T::ZERO);
        drop(v);
        let mut out_shape = shape;
        out_shape[0] = n_total;
        let out = Tensor::from_vec(out_shape, data);
        Ok(self.push(out, vec![a], Op::PadRows))
    }

    /// Fused per-cluster attention weights f(Q_g K_g^T / tau) for blocked
    /// inputs [N_c, kappa, d]. Scores are computed one cluster at a time and
    /// discarded, so only the kappa x kappa weight blocks stay live.
    pub fn cluster_attn(&self, q_g: Var, k_g: Var, tau: f64, f: AttentionFn) -> Result<Var> {
        let q = self.value(q_g);
        let k = self.value(k_g);
        if q.rank() != 3 || q.shape() != k.shape() {
            return Err(CastError::Shape(format!(
                "cluster_attn needs matching [N_c, kappa, d], got {:?} and {:?}",
                q.shape(),
                k.shape()
            )));
        }
        let (n_c, kappa, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let mut data = Vec::with_capacity(n_c * kappa * kappa);
        for j in 0..n_c {
            let scores = cluster_scores(&q, &k, j, kappa, d, tau);
            let w = tensor::attn(&scores, 1, f)?;
            data.extend_from_slice(w.data());
        }
        drop(q);
        drop(k);
        let out = Tensor::from_vec(vec![n_c, kappa, kappa], data);
        Ok(self.push(out, vec![q_g, k_g], Op::ClusterAttn { tau, f }))
    }

    // -- backward ------------------------------------------------------------

    /// Propagates `out_grad` from `out` back to every requires-grad leaf.
    pub fn backward(&self, out: Var, out_grad: Tensor<T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(CastError::Shape("backward over empty tape".into()));
        }
        if out_grad.shape() != nodes[out.0].value.shape() {
            return Err(CastError::Shape(format!(
                "output grad shape {:?} vs value shape {:?}",
                out_grad.shape(),
                nodes[out.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(out_grad);
        let mut result = HashMap::new();
        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    result.insert(i, g);
                    continue;
                }
                _ => {}
            }
            let contribs = self.op_backward(&nodes, node, &g)?;
            for (p, dg) in node.parents.iter().zip(contribs.into_iter()) {
                if let Some(dg) = dg {
                    if nodes[p.0].requires_grad {
                        accumulate(&mut grads[p.0], dg)?;
                    }
                }
            }
        }
        Ok(Grads { map: result })
    }

    fn op_backward(
        &self,
        nodes: &[Node<T>],
        node: &Node<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let pv = |k: usize| -> &Tensor<T> { &nodes[node.parents[k].0].value };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let a = pv(0);
                let b = pv(1);
                let bt = tensor::transpose_last2(b)?;
                let mut da = tensor::matmul(g, &bt)?;
                if a.rank() == 2 && g.rank() > 2 {
                    da = sum_leading_to(&da, a.shape())?;
                }
                if self.corrupt_matmul_adjoint.get() {
                    da = da.map(|v| v * T::from_f64(1.5));
                }
                let db = if b.rank() == 2 && g.rank() > 2 {
                    // dB = sum_p A_p^T g_p, folded as one flat matmul.
                    let k = a.shape()[a.rank() - 1];
                    let n = g.shape()[g.rank() - 1];
                    let rows = a.len() / k;
                    let a_flat = a.reshaped(&[rows, k])?;
                    let g_flat = g.reshaped(&[rows, n])?;
                    tensor::matmul(&tensor::transpose_last2(&a_flat)?, &g_flat)?
                } else {
                    tensor::matmul(&tensor::transpose_last2(a)?, g)?
                };
                vec![Some(da), Some(db)]
            }
            Op::TransposeLast2 => vec![Some(tensor::transpose_last2(g)?)],
            Op::Softmax { axis } => {
                let y = &node.value;
                let (outer, len, inner) = {
                    let s = y.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    (outer, s[*axis], inner)
                };
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g.data()[p] * y.data()[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y.data()[p] * (g.data()[p] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(y.shape().to_vec(), dx))]
            }
            Op::Sigmoid => {
                let y = &node.value;
                vec![Some(tensor::zip_map(g, y, |gv, yv| gv * yv * (T::ONE - yv))?)]
            }
            Op::SoftplusPlusOne | Op::Softplus => {
                let x = pv(0);
                vec![Some(tensor::zip_map(g, x, |gv, xv| gv * tensor::sigmoid_scalar(xv))?)]
            }
            Op::Laplace => {
                let x = pv(0);
                vec![Some(tensor::zip_map(g, x, |gv, xv| gv * tensor::laplace_attn_grad(xv))?)]
            }
            Op::Neg => vec![Some(g.map(|v| -v))],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let a = pv(0);
                let b = pv(1);
                vec![
                    Some(tensor::zip_map(g, b, |gv, bv| gv * bv)?),
                    Some(tensor::zip_map(g, a, |gv, av| gv * av)?),
                ]
            }
            Op::AddBias => {
                let mut s = T::ZERO;
                for &v in g.data() {
                    s += v;
                }
                vec![Some(g.clone()), Some(Tensor::scalar(s))]
            }
            Op::Scale { c } => vec![Some(g.map(|v| v * *c))],
            Op::BroadcastLast { k } => {
                let rows = g.len() / k;
                let mut dx = Vec::with_capacity(rows);
                for r in 0..rows {
                    let mut s = T::ZERO;
                    for j in 0..*k {
                        s += g.data()[r * k + j];
                    }
                    dx.push(s);
                }
                vec![Some(Tensor::from_vec(pv(0).shape().to_vec(), dx))]
            }
            Op::Reshape => vec![Some(g.reshaped(pv(0).shape())?)],
            Op::NarrowLast { start, width } => {
                let len = *g.shape().last().unwrap();
                let rows = g.len() / len;
                let mut dx = vec![T::ZERO; rows * width];
                for r in 0..rows {
                    dx[r * width + start..r * width + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_vec(pv(0).shape().to_vec(), dx))]
            }
            Op::ConcatLast { widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for (k, &w) in widths.iter().enumerate() {
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    out.push(Some(Tensor::from_vec(pv(k).shape().to_vec(), dx)));
                    off += w;
                }
                out
            }
            Op::SumAxis { axis } => {
                let shape = pv(0).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![T::ZERO; pv(0).len()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape, dx))]
            }
            Op::SumAll => {
                let c = g.data()[0];
                vec![Some(pv(0).map(|_| c))]
            }
            Op::GatherRows { idx } => {
                vec![Some(tensor::scatter_add_rows(g, idx, pv(0).shape()[0])?)]
            }
            Op::ScatterAddRows { idx } => {
                vec![Some(tensor::gather_rows(g, idx)?)]
            }
            Op::GatherClusterScores { idx, kappa } => {
                let shape = pv(0).shape().to_vec();
                let n_c = shape[1];
                let mut dx = vec![T::ZERO; shape[0] * n_c];
                for j in 0..n_c {
                    for s in 0..*kappa {
                        let t = idx[j * kappa + s];
                        dx[t * n_c + j] += g.data()[j * kappa + s];
                    }
                }
                vec![Some(Tensor::from_vec(shape, dx))]
            }
            Op::ClusterAttn { tau, f } => {
                let q = pv(0);
                let k = pv(1);
                let y = &node.value;
                let (n_c, kappa, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
                let inv = T::from_f64(1.0 / *tau);
                let mut dq = vec![T::ZERO; q.len()];
                let mut dk = vec![T::ZERO; k.len()];
                for j in 0..n_c {
                    let gb = &g.data()[j * kappa * kappa..(j + 1) * kappa * kappa];
                    let yb = &y.data()[j * kappa * kappa..(j + 1) * kappa * kappa];
                    let mut ds = vec![T::ZERO; kappa * kappa];
                    match f {
                        AttentionFn::Softmax => {
                            for a in 0..kappa {
                                let mut dot = T::ZERO;
                                for b in 0..kappa {
                                    dot += gb[a * kappa + b] * yb[a * kappa + b];
                                }
                                for b in 0..kappa {
                                    ds[a * kappa + b] = yb[a * kappa + b] * (gb[a * kappa + b] - dot);
                                }
                            }
                        }
                        AttentionFn::Laplace => {
                            let scores = cluster_scores(q, k, j, kappa, d, *tau);
                            for (dsv, (&gv, &sv)) in
                                ds.iter_mut().zip(gb.iter().zip(scores.data().iter()))
                            {
                                *dsv = gv * tensor::laplace_attn_grad(sv);
                            }
                        }
                    }
                    let qd = &q.data()[j * kappa * d..(j + 1) * kappa * d];
                    let kd = &k.data()[j * kappa * d..(j + 1) * kappa * d];
                    for a in 0..kappa {
                        for b in 0..kappa {
                            let w = ds[a * kappa + b] * inv;
                            for c in 0..d {
                                dq[(j * kappa + a) * d + c] += w * kd[b * d + c];
                                dk[(j * kappa + b) * d + c] += w * qd[a * d + c];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(q.shape().to_vec(), dq)),
                    Some(Tensor::from_vec(k.shape().to_vec(), dk)),
                ]
            }
            Op::PadRows => {
                let shape = pv(0).shape().to_vec();
                let row: usize = shape[1..].iter().product();
                let dx = g.data()[..shape[0] * row].to_vec();
                vec![Some(Tensor::from_vec(shape, dx))]
            }
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, dg: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(dg),
        Some(acc) => *acc = tensor::zip_map(acc, &dg, |a, b| a + b)?,
    }
    Ok(())
}

/// Score block Q_j K_j^T / tau of cluster j for [N_c, kappa, d] inputs.
fn cluster_scores<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    j: usize,
    kappa: usize,
    d: usize,
    tau: f64,
) -> Tensor<T> {
    let inv = T::from_f64(1.0 / tau);
    let qd = &q.data()[j * kappa * d..(j + 1) * kappa * d];
    let kd = &k.data()[j * kappa * d..(j + 1) * kappa * d];
    let mut out = vec![T::ZERO; kappa * kappa];
    for a in 0..kappa {
        for b in 0..kappa {
            let mut s = T::ZERO;
            for c in 0..d {
                s += qd[a * d + c] * kd[b * d + c];
            }
            out[a * kappa + b] = s * inv;
        }
    }
    Tensor::from_vec(vec![kappa, kappa], out)
}

/// Reduces leading batch dims of `t` until it matches `target` (last two axes kept).
fn sum_leading_to<T: Scalar>(t: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    let tail: usize = target.iter().product();
    let batch = t.len() / tail;
    let mut out = vec![T::ZERO; tail];
    for p in 0..batch {
        for i in 0..tail {
            out[i] += t.data()[p * tail + i];
        }
    }
    Ok(Tensor::from_vec(target.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn identity_grad_passes_through() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.reshape(x, &[4]).unwrap();
        let g = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let grads = tape.backward(y, g.clone()).unwrap();
        assert_eq!(grads.expect(x).data(), g.data());
    }

    #[test]
    fn matmul_adjoint_matches_hand_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::<f64>::new();
        let xt = rand_t(&mut rng, &[3, 4]);
        let wt = rand_t(&mut rng, &[4, 2]);
        let x = tape.input(xt.clone(), true);
        let w = tape.input(wt.clone(), false);
        let y = tape.matmul(x, w).unwrap();
        let g = rand_t(&mut rng, &[3, 2]);
        let grads = tape.backward(y, g.clone()).unwrap();
        let expect = tensor::matmul(&g, &tensor::transpose_last2(&wt).unwrap()).unwrap();
        assert!(grads.expect(x).max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn composite_matches_finite_differences() {
        // sigmoid(matmul(x, w)) summed; central differences at 1e-5 in f64.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xt = rand_t(&mut rng, &[3, 3]);
        let wt = rand_t(&mut rng, &[3, 2]);
        let f = |xd: &Tensor<f64>| -> f64 {
            let tape = Tape::<f64>::new();
            let x = tape.input(xd.clone(), false);
            let w = tape.input(wt.clone(), false);
            let y = tape.sigmoid(tape.matmul(x, w).unwrap()).unwrap();
            let s = tape.sum_all(y).unwrap();
            let out = tape.value(s).data()[0];
            out
        };
        let tape = Tape::<f64>::new();
        let x = tape.input(xt.clone(), true);
        let w = tape.input(wt.clone(), false);
        let y = tape.sigmoid(tape.matmul(x, w).unwrap()).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        let gx = grads.expect(x);
        let h = 1e-5;
        for i in 0..xt.len() {
            let mut plus = xt.data().to_vec();
            plus[i] += h;
            let mut minus = xt.data().to_vec();
            minus[i] -= h;
            let fd = (f(&Tensor::from_vec(vec![3, 3], plus)) - f(&Tensor::from_vec(vec![3, 3], minus)))
                / (2.0 * h);
            let ad = gx.data()[i];
            assert!((ad - fd).abs() <= 1e-4 * ad.abs().max(fd.abs()).max(1e-4), "{} vs {}", ad, fd);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xt = rand_t(&mut rng, &[4, 4]);
        let run = || {
            let tape = Tape::<f64>::new();
            let x = tape.input(xt.clone(), true);
            let sm = tape.softmax(x, 1).unwrap();
            let s = tape.sum_all(tape.mul(sm, x).unwrap()).unwrap();
            let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();
            grads.expect(x).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn gather_scatter_backward_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(vec![3, 1], vec![1.0, 2.0, 3.0]), true);
        let g = tape.gather_rows(x, Rc::new(vec![2, 0, 0])).unwrap();
        let y = tape.sum_all(g).unwrap();
        let grads = tape.backward(y, Tensor::scalar(1.0)).unwrap();
        // row 0 gathered twice, row 1 never, row 2 once
        assert_eq!(grads.expect(x).data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_shape_mismatch_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::<f64>::zeros(&[2, 2]), true);
        let bad = Tensor::<f64>::zeros(&[3]);
        assert!(tape.backward(x, bad).is_err());
    }
}
