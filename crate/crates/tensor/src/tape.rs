//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. A tape is
//! single-use: a second `backward` call fails instead of accumulating.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which parameters become trainable leaves when placed on the tape.
#[derive(Clone, Debug)]
pub enum GradMode {
    /// Every parameter requires gradients.
    All,
    /// Nothing requires gradients (inference).
    None,
    /// Only parameters whose mask entry is set.
    Only(Vec<bool>),
}

impl GradMode {
    fn allows(&self, id: ParamId) -> bool {
        match self {
            GradMode::All => true,
            GradMode::None => false,
            GradMode::Only(mask) => mask.get(id.0).copied().unwrap_or(false),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp { input: Var, lo: T, hi: T },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Gather { input: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Dropout { input: Var, mask: Vec<T> },
}

/// Recorded computation over [`Tensor`] values.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    leaf_param: Vec<Option<ParamId>>,
    param_vars: HashMap<ParamId, Var>,
    store_uid: Option<u64>,
    mode: GradMode,
    train: bool,
    consumed: bool,
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Grads<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` when the node does not
    /// require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &Grads<T> {
        &self.params
    }

    pub fn into_params(self) -> Grads<T> {
        self.params
    }
}

/// Iterates `(outer, axis, inner)` extents of `shape` split at `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: GradMode) -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            leaf_param: Vec::new(),
            param_vars: HashMap::new(),
            store_uid: None,
            mode,
            train: false,
            consumed: false,
        }
    }

    /// Tape that tracks gradients for every parameter.
    pub fn with_grad() -> Self {
        Self::new(GradMode::All)
    }

    /// Tape that tracks nothing.
    pub fn no_grad() -> Self {
        Self::new(GradMode::None)
    }

    /// Enables train-mode behaviour (dropout masks).
    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.leaf_param.push(None);
        Var(self.values.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input not backed by a parameter store.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Places a stored parameter on the tape once; later calls reuse the node.
    ///
    /// # Panics
    ///
    /// A tape records parameters of one store only; passing a different
    /// store (or a clone) panics.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        match self.store_uid {
            None => self.store_uid = Some(store.uid()),
            Some(u) => assert_eq!(u, store.uid(), "tape already records parameters of another store"),
        }
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires = self.mode.allows(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, requires);
        self.leaf_param[v.0] = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let req = self.any_requires(&[a, b]);
        self.push(out, op, req)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.values[a.0].map(f);
        let req = self.requires[a.0];
        self.push(out, op, req)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, inner, cols) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); rows * cols];
        gemm_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, rows, inner, cols);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::MatMul(a, b), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `row` (length = last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.values[a.0].last_dim();
        if self.values[row.0].len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.values[row.0].data();
        let va = &self.values[a.0];
        let data = va
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &b)| x + b))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let req = self.any_requires(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), req))
    }

    /// Scales every row of `a` by the matching entry of `col` (one per row).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let va = &self.values[a.0];
        let n = va.last_dim();
        if self.values[col.0].len() != va.outer_len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: va.shape().to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let cv = self.values[col.0].data();
        let data = va
            .data()
            .chunks(n)
            .zip(cv)
            .flat_map(|(r, &c)| r.iter().map(move |&x| x * c))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let req = self.any_requires(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), req))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                shape: base,
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.values[p.0];
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let req = self.any_requires(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("slice axis {axis} [{start}, {}) out of range", start + len),
            });
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.values[a.0].data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let req = self.requires[a.0];
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { input: a, axis, start }, req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "transpose needs a matrix".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.values[a.0].data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), req))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.values[a.0].reshape(shape)?;
        let req = self.requires[a.0];
        Ok(self.push(out, Op::Reshape(a), req))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    /// Clips entries into `[lo, hi]`; the gradient is zero where clipping
    /// was active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp { input: a, lo, hi }, |x| x.max(lo).min(hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let n = va.last_dim();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - m).exp();
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= z;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let req = self.requires[a.0];
        self.push(out, Op::Softmax(a), req)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let n = va.last_dim();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let req = self.requires[a.0];
        self.push(out, Op::LogSoftmax(a), req)
    }

    /// Gathers rows `ids` of a `[rows, dim]` table into `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.values[table.0];
        if tv.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: tv.shape().to_vec(),
                reason: "embedding table must be a matrix".into(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("embedding lookup of zero ids".into()));
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(tv.row_slice(i));
        }
        let req = self.requires[table.0];
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), dim], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Picks `a[r, idx[r]]` for every row, giving `[rows, 1]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = &self.values[a.0];
        let n = va.last_dim();
        let rows = va.outer_len();
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: va.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    extent: n,
                });
            }
            data.push(va.data()[r * n + i]);
        }
        let req = self.requires[a.0];
        Ok(self.push(
            Tensor::from_parts(vec![rows, 1], data),
            Op::Gather {
                input: a,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        let req = self.requires[a.0];
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let req = self.requires[a.0];
        self.push(Tensor::scalar(m), Op::Mean(a), req)
    }

    /// Sums over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let n = v.last_dim();
        let data: Vec<T> = v.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let mut shape = v.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let req = self.requires[a.0];
        self.push(Tensor::from_parts(shape, data), Op::SumLast(a), req)
    }

    /// Inverted dropout: in train mode zeroes each entry with probability
    /// `rate` (drawn from `uniform`, which must return values in [0, 1)) and
    /// rescales survivors by `1 / (1 - rate)`. Identity in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64, mut uniform: impl FnMut() -> f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.values[a.0].len())
            .map(|_| if uniform() >= rate { keep } else { T::zero() })
            .collect();
        let va = &self.values[a.0];
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let req = self.requires[a.0];
        Ok(self.push(out, Op::Dropout { input: a, mask }, req))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Every parameter placed on the tape with gradients enabled receives an
    /// entry in the parameter map, zero when `loss` does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.requires[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.requires[i] {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Grads::new();
        for (i, p) in self.leaf_param.iter().enumerate() {
            if let Some(id) = p {
                if !self.requires[i] {
                    continue;
                }
                let shape = self.values[i].shape().to_vec();
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                params.insert(*id, g);
            }
        }
        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.values[i].shape().to_vec(), g)))
            .collect();
        Ok(Gradients { nodes, params })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.values[i].data();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (rows, inner, cols) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt_acc(g, self.values[b.0].data(), ga, rows, inner, cols);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(self.values[a.0].data(), g, gb, rows, inner, cols);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.values[b.0].data();
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.values[a.0].data();
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MulCol(a, col) => {
                let n = self.values[a.0].last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    let cv = self.values[col.0].data();
                    for ((gr, chunk), &c) in ga.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y * c);
                    }
                }
                if let Some(gc) = self.acc(grads, *col) {
                    let av = self.values[a.0].data();
                    for ((x, chunk), arow) in gc.iter_mut().zip(g.chunks(n)).zip(av.chunks(n)) {
                        *x += chunk.iter().zip(arow).map(|(&y, &a)| y * a).sum::<T>();
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *k);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(self.values[i].shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.values[p.0].shape()[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..ext * inner];
                            let dst = &mut gp[o * ext * inner..(o + 1) * ext * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, extent, inner) = split_at_axis(self.values[input.0].shape(), *axis);
                let len = self.values[i].shape()[*axis];
                if let Some(gi) = self.acc(grads, *input) {
                    for o in 0..outer {
                        let base = o * extent * inner + start * inner;
                        let dst = &mut gi[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += g[j * r + ii];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * y * (T::one() - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * y;
                    }
                }
            }
            Op::Log(a) => {
                let av = self.values[a.0].data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &xa) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy / xa;
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                let av = self.values[input.0].data();
                if let Some(ga) = self.acc(grads, *input) {
                    for ((x, &gy), &xa) in ga.iter_mut().zip(g).zip(av) {
                        if xa >= *lo && xa <= *hi {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = self.values[a.0].last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for ((x, &gyy), &yy) in gr.iter_mut().zip(gy).zip(y) {
                            *x += yy * (gyy - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = self.values[a.0].last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total: T = gy.iter().copied().sum();
                        for ((x, &gyy), &ly) in gr.iter_mut().zip(gy).zip(y) {
                            *x += gyy - ly.exp() * total;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.values[table.0].last_dim();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        dst.iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Gather { input, idx } => {
                let n = self.values[input.0].last_dim();
                if let Some(gi) = self.acc(grads, *input) {
                    for (r, &c) in idx.iter().enumerate() {
                        gi[r * n + c] += g[r];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let k = g[0] / T::lit(self.values[a.0].len() as f64);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += k);
                }
            }
            Op::SumLast(a) => {
                let n = self.values[a.0].last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (chunk, &gy) in ga.chunks_mut(n).zip(g) {
                        chunk.iter_mut().for_each(|x| *x += gy);
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(ga) = self.acc(grads, *input) {
                    for ((x, &gy), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += gy * m;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::no_grad();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tanh_half() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.scalar(0.5);
        let y = tape.tanh(x);
        // libm reference value of tanh(0.5)
        assert!((tape.value(y).item().unwrap() - 0.462_117_157_260_009_8).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::with_grad();
        let w = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0)).unwrap();
        let u = store.insert("u", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::<f64>::with_grad();
        let wv = tape.param(&store, w);
        let _uv = tape.param(&store, u);
        let y = tape.mul(wv, wv).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params().get(w).unwrap().item().unwrap(), 4.0);
        assert_eq!(g.params().get(u).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::<f64>::with_grad();
        let w = tape.input(Tensor::scalar(1.0));
        let y = tape.exp(w);
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::AlreadyBackpropagated);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::with_grad();
        let w = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0)).unwrap();
        let u = store.insert("u", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::<f64>::new(GradMode::Only(vec![true, false]));
        let wv = tape.param(&store, w);
        let uv = tape.param(&store, u);
        let y = tape.mul(wv, uv).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params().get(w).unwrap().item().unwrap(), 5.0);
        assert!(g.params().get(u).is_none());
    }

    #[test]
    #[should_panic(expected = "another store")]
    fn parameters_from_two_stores_are_refused() {
        let mut a = ParamStore::<f64>::new();
        let id = a.insert("w", Tensor::scalar(1.0)).unwrap();
        let b = a.clone();
        let mut tape = Tape::with_grad();
        tape.param(&a, id);
        tape.param(&b, id);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_masks_in_train() {
        let mut tape = Tape::<f64>::with_grad();
        let x = tape.input(Tensor::full(&[4], 1.0));
        let y = tape.dropout(x, 0.5, || 0.0).unwrap();
        assert_eq!(x, y);
        tape.set_train(true);
        let mut draws = [0.9, 0.1, 0.6, 0.2].into_iter();
        let y = tape.dropout(x, 0.5, || draws.next().unwrap()).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 2.0, 0.0]);
    }
}
