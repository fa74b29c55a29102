//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! enter through [`Graph::param`], which copies the current value out of a
//! [`ParamStore`]; after [`Graph::backward`] the store pulls the gradients
//! back with [`ParamStore::accumulate`].

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reductions available over segments and masked axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Population standard deviation, `sqrt(var + 1e-5)`.
    Std,
    Min,
    Max,
}

pub const STD_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool, dims: [usize; 4] },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Broadcast(Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Slice { a: Var, outer: usize, src_chunk: usize, offset: usize, chunk: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Gather { a: Var, idx: Vec<Option<usize>> },
    Segment { a: Var, seg: Vec<usize>, kind: Reduce, counts: Vec<usize>, arg: Vec<usize> },
    SegmentSoftmax { a: Var, seg: Vec<usize>, nseg: usize },
    MaskedSoftmax { a: Var, mask: Vec<bool> },
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Hardtanh(Var, T, T),
    Dropout { a: Var, mask: Vec<T> },
    L2Normalize(Var),
    Cosine(Var, Var),
    Bce { logits: Var, targets: Vec<T> },
    Mae { a: Var, target: Vec<T> },
    Mse { a: Var, target: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
    train: bool,
    rng: ChaCha8Rng,
    finished: bool,
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::op(op, format!("expected a matrix, got shape {:?}", t.shape()))),
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Scalar> Graph<T> {
    /// A graph in training mode (dropout active) or evaluation mode. The
    /// seed drives the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: IndexMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            finished: false,
        }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// The named parameter from `store`, recorded once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::op("param", format!("unknown parameter {name}")))?;
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, needs_grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, T::zero());
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || Error::shape("bmm", ta.shape(), tb.shape());
        let (&[ba, m, k], &[bb, x, y]) = (ta.shape(), tb.shape()) else {
            return Err(err());
        };
        let (k2, n) = if trans_b { (y, x) } else { (x, y) };
        if ba != bb || k != k2 {
            return Err(err());
        }
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            T::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let op = Op::Bmm { a, b, trans_b, dims: [ba, m, k, n] };
        self.push("bmm", Tensor::new(&[ba, m, n], out)?, op, &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let w = ta.width();
        if tr.len() != w {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + tr.data()[i % w]).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push("add_row", t, Op::AddRow(a, row), &[a, row])
    }

    /// Scales each row (last axis) of `a` by the matching entry of `s`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let w = ta.width();
        if ts.len() != ta.rows() {
            return Err(Error::shape("mul_rows", ta.shape(), ts.shape()));
        }
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * ts.data()[i / w]).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push("mul_rows", t, Op::MulRows(a, s), &[a, s])
    }

    /// Repeats a one-element tensor over `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::shape("broadcast", ts.shape(), shape));
        }
        let t = Tensor::full(shape, ts.item());
        self.push("broadcast", t, Op::Broadcast(s), &[s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(a).map(|x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(a).map(|x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::op("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::op("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        self.push("concat", t, Op::Concat { inputs: inputs.to_vec(), outer, chunks }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::op(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (src_chunk, offset, chunk) = (shape[axis] * inner, start * inner, len * inner);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            data.extend_from_slice(&src[o * src_chunk + offset..o * src_chunk + offset + chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        self.push("slice", t, Op::Slice { a, outer, src_chunk, offset, chunk }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", ta.shape(), perm));
        }
        let (data, shape) = permute_data(ta.data(), ta.shape(), perm);
        let t = Tensor::new(&shape, data)?;
        self.push("permute", t, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    /// Selects rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: &[Option<usize>]) -> Result<Var> {
        let ta = self.value(a);
        let (r, w) = matrix_dims("gather_rows", ta)?;
        let mut data = Vec::with_capacity(idx.len() * w);
        for i in idx {
            match *i {
                Some(i) if i < r => data.extend_from_slice(ta.row(i)),
                Some(i) => return Err(Error::op("gather_rows", format!("row {i} out of range for {r} rows"))),
                None => data.extend(std::iter::repeat(T::zero()).take(w)),
            }
        }
        let t = Tensor::new(&[idx.len(), w], data)?;
        self.push("gather_rows", t, Op::Gather { a, idx: idx.to_vec() }, &[a])
    }

    /// Reduces the rows of a matrix into `nseg` groups given by `seg`.
    /// Every group must be nonempty except under [`Reduce::Sum`].
    pub fn segment_reduce(&mut self, a: Var, seg: &[usize], nseg: usize, kind: Reduce) -> Result<Var> {
        let ta = self.value(a);
        let (r, w) = matrix_dims("segment_reduce", ta)?;
        if seg.len() != r {
            return Err(Error::shape("segment_reduce", ta.shape(), &[seg.len()]));
        }
        let mut counts = vec![0usize; nseg];
        for &s in seg {
            if s >= nseg {
                return Err(Error::op("segment_reduce", format!("segment {s} out of range for {nseg}")));
            }
            counts[s] += 1;
        }
        if kind != Reduce::Sum && counts.contains(&0) {
            return Err(Error::op("segment_reduce", "empty segment"));
        }
        let x = ta.data();
        let mut out = vec![T::zero(); nseg * w];
        let mut arg = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean | Reduce::Std => {
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..w {
                        out[s * w + j] = out[s * w + j] + x[i * w + j];
                    }
                }
                if kind != Reduce::Sum {
                    for s in 0..nseg {
                        let c = T::of(counts[s] as f64);
                        for j in 0..w {
                            out[s * w + j] = out[s * w + j] / c;
                        }
                    }
                }
                if kind == Reduce::Std {
                    let mean = out.clone();
                    out.iter_mut().for_each(|v| *v = T::zero());
                    for (i, &s) in seg.iter().enumerate() {
                        for j in 0..w {
                            let d = x[i * w + j] - mean[s * w + j];
                            out[s * w + j] = out[s * w + j] + d * d;
                        }
                    }
                    for s in 0..nseg {
                        let c = T::of(counts[s] as f64);
                        for j in 0..w {
                            out[s * w + j] = (out[s * w + j] / c + T::of(STD_EPS)).sqrt();
                        }
                    }
                }
            }
            Reduce::Min | Reduce::Max => {
                arg = vec![usize::MAX; nseg * w];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..w {
                        let slot = s * w + j;
                        let v = x[i * w + j];
                        let better = arg[slot] == usize::MAX
                            || if kind == Reduce::Min { v < out[slot] } else { v > out[slot] };
                        if better {
                            out[slot] = v;
                            arg[slot] = i;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[nseg, w], out)?;
        let op = Op::Segment { a, seg: seg.to_vec(), kind, counts, arg };
        self.push("segment_reduce", t, op, &[a])
    }

    /// Softmax of each column of a matrix within each segment of rows.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, w) = matrix_dims("segment_softmax", ta)?;
        if seg.len() != r || seg.iter().any(|&s| s >= nseg) {
            return Err(Error::shape("segment_softmax", ta.shape(), &[seg.len(), nseg]));
        }
        let x = ta.data();
        let mut mx = vec![T::neg_infinity(); nseg * w];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..w {
                mx[s * w + j] = mx[s * w + j].max(x[i * w + j]);
            }
        }
        let mut out: Vec<T> = vec![T::zero(); r * w];
        let mut sum = vec![T::zero(); nseg * w];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..w {
                let e = (x[i * w + j] - mx[s * w + j]).exp();
                out[i * w + j] = e;
                sum[s * w + j] = sum[s * w + j] + e;
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..w {
                out[i * w + j] = out[i * w + j] / sum[s * w + j];
            }
        }
        let t = Tensor::new(&[r, w], out)?;
        let op = Op::SegmentSoftmax { a, seg: seg.to_vec(), nseg };
        self.push("segment_softmax", t, op, &[a])
    }

    /// Softmax over the last axis restricted to entries where `mask` is set.
    /// Masked entries come out as zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(Error::shape("masked_softmax", ta.shape(), &[mask.len()]));
        }
        let w = ta.width();
        let mut out = vec![T::zero(); ta.len()];
        for r in 0..ta.rows() {
            let span = r * w..(r + 1) * w;
            let (x, m) = (&ta.data()[span.clone()], &mask[span.clone()]);
            let mx = x
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .fold(T::neg_infinity(), |acc, (&v, _)| acc.max(v));
            if mx == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in 0..w {
                if m[j] {
                    let e = (x[j] - mx).exp();
                    out[r * w + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[span] {
                *o = *o / total;
            }
        }
        let t = Tensor::new(ta.shape(), out)?;
        self.push("masked_softmax", t, Op::MaskedSoftmax { a, mask: mask.to_vec() }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let t = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push("leaky_relu", t, Op::LeakyRelu(a, s), &[a])
    }

    pub fn hardtanh(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push("hardtanh", t, Op::Hardtanh(a, lo, hi), &[a])
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::op("dropout", format!("rate {p} must be below 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push("dropout", t, Op::Dropout { a, mask }, &[a])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let w = ta.width();
        let mut data = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let n = row_norm(row);
            if n == T::zero() {
                return Err(Error::op("l2_normalize", format!("row {r} has zero norm")));
            }
            data.extend(row.iter().map(|&x| x / n));
        }
        debug_assert_eq!(data.len(), ta.rows() * w);
        let t = Tensor::new(ta.shape(), data)?;
        self.push("l2_normalize", t, Op::L2Normalize(a), &[a])
    }

    /// Row-wise cosine similarity of two equally shaped tensors, one value per row.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("cosine_similarity", ta, tb)?;
        let mut out = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let (x, y) = (ta.row(r), tb.row(r));
            let nx2: T = x.iter().map(|&v| v * v).sum();
            let ny2: T = y.iter().map(|&v| v * v).sum();
            if nx2 == T::zero() || ny2 == T::zero() {
                return Err(Error::op("cosine_similarity", format!("row {r} has zero norm")));
            }
            let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
            // identical rows give exactly 1 since sqrt(s*s) == s
            out.push(dot / (nx2 * ny2).sqrt());
        }
        let t = Tensor::new(&[out.len()], out)?;
        self.push("cosine_similarity", t, Op::Cosine(a, b), &[a, b])
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let tl = self.value(logits);
        same_shape("bce_with_logits", tl, targets)?;
        let n = T::of(tl.len().max(1) as f64);
        let loss = tl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let op = Op::Bce { logits, targets: targets.data().to_vec() };
        self.push("bce_with_logits", Tensor::scalar(loss), op, &[logits])
    }

    pub fn mae(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let ta = self.value(a);
        same_shape("mae", ta, target)?;
        let n = T::of(ta.len().max(1) as f64);
        let loss = ta.data().iter().zip(target.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        let op = Op::Mae { a, target: target.data().to_vec() };
        self.push("mae", Tensor::scalar(loss), op, &[a])
    }

    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let ta = self.value(a);
        same_shape("mse", ta, target)?;
        let n = T::of(ta.len().max(1) as f64);
        let loss = ta
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let op = Op::Mse { a, target: target.data().to_vec() };
        self.push("mse", Tensor::scalar(loss), op, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len().max(1) as f64);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Reverse pass from a one-element `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.finished {
            return Err(Error::Backward("gradients were already computed for this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        self.finished = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(x, d)| *x = *x + d),
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape(), delta).expect("gradient matches value shape"))
            }
        }
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = &self.nodes[i].value;
        let val = |v: Var| self.value(v).data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, val(b), true, &mut da, T::zero());
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(a), true, gd, false, &mut db, T::zero());
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Bmm { a, b, trans_b, dims: [bs, m, k, n] } => {
                let (av, bv) = (val(a), val(b));
                let mut da = vec![T::zero(); bs * m * k];
                let mut db = vec![T::zero(); bs * k * n];
                for s in 0..bs {
                    let gs = &gd[s * m * n..(s + 1) * m * n];
                    let a_s = &av[s * m * k..(s + 1) * m * k];
                    let b_s = &bv[s * k * n..(s + 1) * k * n];
                    let da_s = &mut da[s * m * k..(s + 1) * m * k];
                    let db_s = &mut db[s * k * n..(s + 1) * k * n];
                    if trans_b {
                        // out = a · bᵀ with b stored [n, k]
                        T::gemm(m, n, k, gs, false, b_s, false, da_s, T::zero());
                        T::gemm(n, m, k, gs, true, a_s, false, db_s, T::zero());
                    } else {
                        T::gemm(m, n, k, gs, false, b_s, true, da_s, T::zero());
                        T::gemm(k, m, n, a_s, true, gs, false, db_s, T::zero());
                    }
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gd.to_vec());
                self.accumulate(grads, b, gd.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, gd.to_vec());
                self.accumulate(grads, b, gd.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                self.accumulate(grads, a, gd.iter().zip(bv).map(|(&g, &x)| g * x).collect());
                self.accumulate(grads, b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, gd.to_vec());
                let w = self.value(row).len();
                let mut dr = vec![T::zero(); w];
                for (j, &x) in gd.iter().enumerate() {
                    dr[j % w] = dr[j % w] + x;
                }
                self.accumulate(grads, row, dr);
            }
            &Op::MulRows(a, s) => {
                let (av, sv) = (val(a), val(s));
                let w = y.width();
                self.accumulate(grads, a, gd.iter().enumerate().map(|(j, &x)| x * sv[j / w]).collect());
                let mut ds = vec![T::zero(); sv.len()];
                for (j, (&x, &p)) in gd.iter().zip(av).enumerate() {
                    ds[j / w] = ds[j / w] + x * p;
                }
                self.accumulate(grads, s, ds);
            }
            &Op::Broadcast(s) => {
                let total = gd.iter().copied().sum();
                self.accumulate(grads, s, vec![total]);
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, gd.iter().map(|&x| x * c).collect()),
            &Op::AddScalar(a) => self.accumulate(grads, a, gd.to_vec()),
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    let mut d = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        d.extend_from_slice(&gd[o * total + start..o * total + start + c]);
                    }
                    self.accumulate(grads, v, d);
                    start += c;
                }
            }
            &Op::Slice { a, outer, src_chunk, offset, chunk } => {
                let mut d = vec![T::zero(); outer * src_chunk];
                for o in 0..outer {
                    d[o * src_chunk + offset..o * src_chunk + offset + chunk]
                        .copy_from_slice(&gd[o * chunk..(o + 1) * chunk]);
                }
                self.accumulate(grads, a, d);
            }
            &Op::Reshape(a) => self.accumulate(grads, a, gd.to_vec()),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let (d, _) = permute_data(gd, y.shape(), &inv);
                self.accumulate(grads, *a, d);
            }
            Op::Gather { a, idx } => {
                let w = y.width();
                let mut d = vec![T::zero(); self.value(*a).len()];
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..w {
                            d[i * w + j] = d[i * w + j] + gd[r * w + j];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Segment { a, seg, kind, counts, arg } => {
                let x = val(*a);
                let w = y.width();
                let mut d = vec![T::zero(); x.len()];
                match kind {
                    Reduce::Sum => {
                        for (r, &s) in seg.iter().enumerate() {
                            d[r * w..(r + 1) * w].copy_from_slice(&gd[s * w..(s + 1) * w]);
                        }
                    }
                    Reduce::Mean => {
                        for (r, &s) in seg.iter().enumerate() {
                            let c = T::of(counts[s] as f64);
                            for j in 0..w {
                                d[r * w + j] = gd[s * w + j] / c;
                            }
                        }
                    }
                    Reduce::Std => {
                        let mut mean = vec![T::zero(); counts.len() * w];
                        for (r, &s) in seg.iter().enumerate() {
                            for j in 0..w {
                                mean[s * w + j] = mean[s * w + j] + x[r * w + j];
                            }
                        }
                        for (s, &c) in counts.iter().enumerate() {
                            for j in 0..w {
                                mean[s * w + j] = mean[s * w + j] / T::of(c as f64);
                            }
                        }
                        let yd = y.data();
                        for (r, &s) in seg.iter().enumerate() {
                            let c = T::of(counts[s] as f64);
                            for j in 0..w {
                                let k = s * w + j;
                                d[r * w + j] = gd[k] * (x[r * w + j] - mean[k]) / (c * yd[k]);
                            }
                        }
                    }
                    Reduce::Min | Reduce::Max => {
                        for (k, &r) in arg.iter().enumerate() {
                            let j = k % w;
                            d[r * w + j] = d[r * w + j] + gd[k];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SegmentSoftmax { a, seg, nseg } => {
                let yd = y.data();
                let w = y.width();
                let mut dot = vec![T::zero(); nseg * w];
                for (r, &s) in seg.iter().enumerate() {
                    for j in 0..w {
                        dot[s * w + j] = dot[s * w + j] + yd[r * w + j] * gd[r * w + j];
                    }
                }
                let d = seg
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &s)| (0..w).map(move |j| (r * w + j, s * w + j)))
                    .map(|(k, q)| yd[k] * (gd[k] - dot[q]))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::MaskedSoftmax { a, mask } => {
                let yd = y.data();
                let w = y.width();
                let mut d = vec![T::zero(); yd.len()];
                for r in 0..y.rows() {
                    let span = r * w..(r + 1) * w;
                    let dot: T = span.clone().map(|k| yd[k] * gd[k]).sum();
                    for k in span {
                        if mask[k] {
                            d[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            &Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, a, d);
            }
            &Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, d);
            }
            &Op::LeakyRelu(a, s) => {
                let d = gd
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * s })
                    .collect();
                self.accumulate(grads, a, d);
            }
            &Op::Hardtanh(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            &Op::L2Normalize(a) => {
                let x = self.value(a);
                let w = x.width();
                let yd = y.data();
                let mut d = Vec::with_capacity(yd.len());
                for r in 0..x.rows() {
                    let n = row_norm(x.row(r));
                    let span = r * w..(r + 1) * w;
                    let dot: T = span.clone().map(|k| yd[k] * gd[k]).sum();
                    d.extend(span.map(|k| (gd[k] - yd[k] * dot) / n));
                }
                self.accumulate(grads, a, d);
            }
            &Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let w = ta.width();
                let mut da = Vec::with_capacity(ta.len());
                let mut db = Vec::with_capacity(tb.len());
                for r in 0..ta.rows() {
                    let (x, z) = (ta.row(r), tb.row(r));
                    let (nx, nz) = (row_norm(x), row_norm(z));
                    let c = y.data()[r];
                    let g = gd[r];
                    for j in 0..w {
                        da.push(g * (z[j] / (nx * nz) - c * x[j] / (nx * nx)));
                        db.push(g * (x[j] / (nx * nz) - c * z[j] / (nz * nz)));
                    }
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::Bce { logits, targets } => {
                let n = T::of(targets.len().max(1) as f64);
                let d = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| gd[0] * (sigmoid(x) - t) / n)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
            Op::Mae { a, target } => {
                let n = T::of(target.len().max(1) as f64);
                let d = val(*a)
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| {
                        let s = if x > t {
                            T::one()
                        } else if x < t {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gd[0] * s / n
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Mse { a, target } => {
                let n = T::of(target.len().max(1) as f64);
                let two = T::of(2.0);
                let d = val(*a).iter().zip(target).map(|(&x, &t)| gd[0] * two * (x - t) / n).collect();
                self.accumulate(grads, *a, d);
            }
            &Op::SumAll(a) => self.accumulate(grads, a, vec![gd[0]; self.value(a).len()]),
            &Op::MeanAll(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![gd[0] / T::of(n.max(1) as f64); n]);
            }
        }
    }

    /// Masked reduction of `[B, M, d]` over the middle axis. Masked-out
    /// slots never influence the result.
    pub fn masked_reduce(&mut self, x: Var, mask: &[bool], kind: Reduce) -> Result<Var> {
        let &[b, m, d] = self.shape(x) else {
            return Err(Error::op("masked_reduce", format!("expected rank 3, got {:?}", self.shape(x))));
        };
        if mask.len() != b * m {
            return Err(Error::shape("masked_reduce", &[b, m, d], &[mask.len()]));
        }
        let flat = self.reshape(x, &[b * m, d])?;
        let (rows, seg) = mask_rows(mask, m);
        let picked = self.gather_rows(flat, &rows)?;
        self.segment_reduce(picked, &seg, b, kind)
    }
}

/// Row indices of set mask entries and the batch each belongs to.
pub(crate) fn mask_rows(mask: &[bool], per_batch: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut seg = Vec::new();
    for (i, &k) in mask.iter().enumerate() {
        if k {
            rows.push(Some(i));
            seg.push(i / per_batch);
        }
    }
    (rows, seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(Tensor::scalar(1.0));
        let y = g.sum_all(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));
    }

    #[test]
    fn segment_reductions_on_one_and_three() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[2, 1], &[1.0, 3.0]));
        let seg = [0, 0];
        let mean = g.segment_reduce(x, &seg, 1, Reduce::Mean).unwrap();
        let std = g.segment_reduce(x, &seg, 1, Reduce::Std).unwrap();
        let min = g.segment_reduce(x, &seg, 1, Reduce::Min).unwrap();
        let max = g.segment_reduce(x, &seg, 1, Reduce::Max).unwrap();
        assert_eq!(g.value(mean).item(), 2.0);
        assert!((g.value(std).item() - (1.0f64 + STD_EPS).sqrt()).abs() < 1e-15);
        assert!((g.value(std).item() - 1.0).abs() < 1e-5);
        assert_eq!(g.value(min).item(), 1.0);
        assert_eq!(g.value(max).item(), 3.0);
    }

    #[test]
    fn ties_route_gradient_to_first_index() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[3, 1], &[2.0, 2.0, 1.0]));
        let m = g.segment_reduce(x, &[0, 0, 0], 1, Reduce::Max).unwrap();
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn hardtanh_clamps() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[3], &[-0.2, 0.5, 1.7]));
        let y = g.hardtanh(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn cosine_of_self_is_one() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[1, 3], &[0.3, -2.0, 5.0]));
        let c = g.cosine_similarity(x, x).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_identical_rows_is_exactly_one() {
        let mut g = Graph::<f32>::eval();
        for seed in 0..50u32 {
            let row: Vec<f32> = (0..7).map(|i| ((seed * 7 + i) as f32 * 0.731).sin() * 3.0).collect();
            let x = g.input(Tensor::new(&[1, 7], row).unwrap());
            let c = g.cosine_similarity(x, x).unwrap();
            assert_eq!(g.value(c).item(), 1.0);
        }
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[1, 2], &[0.0, 0.0]));
        let y = g.input(t(&[1, 2], &[1.0, 0.0]));
        assert!(g.cosine_similarity(x, y).is_err());
    }

    #[test]
    fn masked_softmax_ignores_masked_logits() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[1, 3], &[0.5, 100.0, -0.5]));
        let mask = [true, false, true];
        let y = g.masked_softmax(x, &mask).unwrap();
        let w = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let z = g.mul(y, w).unwrap();
        let s = g.sum_all(z).unwrap();
        g.backward(s).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(g.grad(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::<f32>::eval();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).data()[1], 4.0);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(q), g.value(x));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::<f32>::eval();
        let x = g.input(Tensor::full(&[10], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::<f32>::new(true, 1);
        let x = g.input(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn masked_reduce_skips_padding() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[1, 3, 1], &[1.0, 3.0, 99.0]));
        let m = g.masked_reduce(x, &[true, true, false], Reduce::Max).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_are_caught() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
