use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{broadcast_offsets, broadcast_shapes, strides, BroadcastIndex};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_batches: Vec<usize>,
    b_batches: Vec<usize>,
    /// `b` is a plain matrix shared by every batch of `a`.
    shared_rhs: bool,
}

enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AbsDiff { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Narrow { x: Var, outer: usize, len: usize, inner: usize, start: usize },
    Concat { parts: Vec<Var>, outer: usize, inner: usize },
    Reduce { x: Var, outer: usize, len: usize, inner: usize, scale: f64 },
    SumAll { x: Var },
    Expand { x: Var },
    Reshape { x: Var },
    Permute { x: Var, offsets: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, gold: Vec<usize>, probs: Vec<f64> },
    FrobeniusSq { parts: Vec<Var> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | AbsDiff { a, b } => {
                vec![*a, *b]
            }
            Scale { x, .. }
            | AddScalar { x }
            | Tanh { x }
            | Sigmoid { x }
            | Gelu { x }
            | Softmax { x, .. }
            | Narrow { x, .. }
            | Reduce { x, .. }
            | SumAll { x }
            | Expand { x }
            | Reshape { x }
            | Permute { x, .. }
            | Dropout { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Embedding { table, .. } => vec![*table],
            Concat { parts, .. } | FrobeniusSq { parts } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Per-pass record of operations for reverse-mode differentiation.
///
/// Parameters are read in place from the borrowed [`ParamStore`]; their
/// gradients are collected with [`Tape::param_grads`] after
/// [`Tape::backward`]. A tape is meant to be dropped after one backward pass.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node on a tape without a store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_node(Value::Owned(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Value::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable parameter from the attached store. Repeated calls return the
    /// same node, so every use accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        let v = self.push_node(Value::Param(id), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[…, M, K] × […, K, N] → […, M, N]`; leading
    /// batch dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, k2, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch_a, batch_b) = (&sa[..ra - 2], &sb[..rb - 2]);
        let batch =
            broadcast_shapes(batch_a, batch_b).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let shared_rhs = batch_b.is_empty() && batch_a == batch.as_slice();
        let plan = MatmulPlan {
            m,
            k,
            n,
            a_batches: broadcast_offsets(batch_a, &batch),
            b_batches: broadcast_offsets(batch_b, &batch),
            shared_rhs,
        };
        let nb = plan.a_batches.len();
        let mut out = vec![0.0; nb * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                gemm_nn(av, bv, &mut out, nb * m, k, n);
            } else {
                for (i, c) in out.chunks_mut(m * n).enumerate() {
                    let ao = plan.a_batches[i] * m * k;
                    let bo = plan.b_batches[i] * k * n;
                    gemm_nn(&av[ao..ao + m * k], &bv[bo..bo + k * n], c, m, k, n);
                }
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, plan }))
    }

    // ---- element-wise --------------------------------------------------

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shapes(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ia, ib) = (BroadcastIndex::new(sa, &shape), BroadcastIndex::new(sb, &shape));
            let n: usize = shape.iter().product();
            (0..n).map(|e| f(av[ia.get(e)], bv[ib.get(e)])).collect()
        };
        Ok(Tensor::from_parts(shape, data))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Broadcasting subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    /// Broadcasting multiplication.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("hadamard", self.shape(a), self.shape(b)));
        }
        self.mul(a, b)
    }

    /// `|a - b|` element-wise; the subgradient at a tie is 0.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("abs_diff", self.shape(a), self.shape(b)));
        }
        let t = self.broadcast_binary("abs_diff", a, b, |x, y| (x - y).abs())?;
        Ok(self.push(t, Op::AbsDiff { a, b }))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| gelu_parts(v).0);
        self.push(t, Op::Gelu { x })
    }

    /// Softmax along `axis` with max-subtraction. Positions where `mask` is
    /// `false` get weight exactly 0 and are left out of the normalizer.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let xv = self.value(x).data();
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let keep = |j: usize| mask.is_none_or(|m| m[base + j * inner]);
                let mut max = f64::NEG_INFINITY;
                let mut kept = 0;
                for j in (0..len).filter(|&j| keep(j)) {
                    max = max.max(xv[base + j * inner]);
                    kept += 1;
                }
                if kept == 0 {
                    return Err(Error::DegenerateSlice {
                        op: "softmax",
                        slice: o * inner + i,
                    });
                }
                let mut sum = 0.0;
                for j in (0..len).filter(|&j| keep(j)) {
                    let e = (xv[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in (0..len).filter(|&j| keep(j)) {
                    out[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [dim] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let (xv, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = xv.len() / dim;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup: output shape is `ids_shape ++ [table_cols]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &ts, ids_shape));
        }
        let (rows, dim) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- shape ---------------------------------------------------------

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                size: shape[axis],
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Narrow {
                x,
                outer,
                len: full,
                inner,
                start,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
        ))
    }

    /// Reduce along `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduction) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("reduce", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = match kind {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / len as f64,
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                scale,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduction::Sum)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduction::Mean)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Broadcast `x` to `shape` (numpy rules).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if broadcast_shapes(&s, shape).as_deref() != Some(shape) {
            return Err(Error::shape("expand", &s, shape));
        }
        let xv = self.value(x).data();
        let data = broadcast_offsets(&s, shape).iter().map(|&o| xv[o]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Expand { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || seen[a]) {
            return Err(Error::shape("permute", &shape, axes));
        }
        for &a in axes {
            seen[a] = true;
        }
        let in_strides = strides(&shape);
        let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let ostr: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let numel: usize = oshape.iter().product();
        let mut offsets = Vec::with_capacity(numel);
        let mut idx = vec![0usize; oshape.len()];
        let mut off = 0;
        for _ in 0..numel {
            offsets.push(off);
            for ax in (0..oshape.len()).rev() {
                idx[ax] += 1;
                off += ostr[ax];
                if idx[ax] < oshape[ax] {
                    break;
                }
                off -= ostr[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let xv = self.value(x).data();
        let data = offsets.iter().map(|&o| xv[o]).collect();
        Ok(self.push(Tensor::from_parts(oshape, data), Op::Permute { x, offsets }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    // ---- regularization & losses ---------------------------------------

    /// Inverted dropout. With `training == false` or `rate == 0` the input
    /// handle itself is returned.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Mean negative log-likelihood of `gold` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != gold.len() {
            return Err(Error::shape("cross_entropy", &shape, &[gold.len()]));
        }
        let (k, l) = (shape[0], shape[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; k * l];
        let mut total = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            if g >= l {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: g,
                    size: l,
                });
            }
            let row = &lv[r * l..(r + 1) * l];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[g];
            for j in 0..l {
                probs[r * l + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(total / k as f64),
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of squared entries over all `parts`.
    pub fn frobenius_sq(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "frobenius_sq" });
        }
        let s = parts
            .iter()
            .map(|&p| self.value(p).data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::FrobeniusSq {
                parts: parts.to_vec(),
            },
        ))
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulate d(loss)/d(node) into every node that requires a gradient,
    /// visiting the tape in reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(Error::CyclicLineage {
                    node: i,
                    input: bad.0,
                });
            }
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let store = self.store;
        let grads = &mut self.grads;
        let value = |v: Var| -> &Tensor {
            match &nodes[v.0].value {
                Value::Owned(t) => t,
                Value::Param(id) => store.unwrap().value(*id),
            }
        };
        // Gradient buffer for `v`, or None when it does not need one.
        fn slot<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
            len: usize,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        let out = value(Var(i));
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, plan } => {
                let MatmulPlan { m, k, n, .. } = *plan;
                let (av, bv) = (value(*a).data(), value(*b).data());
                let nb = plan.a_batches.len();
                if let Some(ga) = slot(grads, nodes, *a, av.len()) {
                    if plan.shared_rhs {
                        gemm_nt(g, bv, ga, nb * m, n, k);
                    } else {
                        for bi in 0..nb {
                            let ao = plan.a_batches[bi] * m * k;
                            let bo = plan.b_batches[bi] * k * n;
                            gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bo..bo + k * n],
                                &mut ga[ao..ao + m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b, bv.len()) {
                    if plan.shared_rhs {
                        gemm_tn(av, g, gb, nb * m, k, n);
                    } else {
                        for bi in 0..nb {
                            let ao = plan.a_batches[bi] * m * k;
                            let bo = plan.b_batches[bi] * k * n;
                            gemm_tn(
                                &av[ao..ao + m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bo..bo + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let is_mul = matches!(nodes[i].op, Op::Mul { .. });
                let (ta, tb) = (value(*a), value(*b));
                let oa = BroadcastIndex::new(ta.shape(), out.shape());
                let ob = BroadcastIndex::new(tb.shape(), out.shape());
                let ia = |e: usize| oa.get(e);
                let ib = |e: usize| ob.get(e);
                if let Some(ga) = slot(grads, nodes, *a, ta.numel()) {
                    for (e, &gv) in g.iter().enumerate() {
                        let f = if is_mul { tb.data()[ib(e)] } else { 1.0 };
                        ga[ia(e)] += gv * f;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b, tb.numel()) {
                    for (e, &gv) in g.iter().enumerate() {
                        let f = if is_mul { ta.data()[ia(e)] } else { sign };
                        gb[ib(e)] += gv * f;
                    }
                }
            }
            Op::AbsDiff { a, b } => {
                let (av, bv) = (value(*a).data(), value(*b).data());
                let sign = |e: usize| {
                    let d = av[e] - bv[e];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(ga) = slot(grads, nodes, *a, av.len()) {
                    for (e, &gv) in g.iter().enumerate() {
                        ga[e] += gv * sign(e);
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b, bv.len()) {
                    for (e, &gv) in g.iter().enumerate() {
                        gb[e] -= gv * sign(e);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Tanh { x } | Op::Sigmoid { x } => {
                let tanh = matches!(nodes[i].op, Op::Tanh { .. });
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    for ((a, &gv), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *a += gv * if tanh { 1.0 - y * y } else { y * (1.0 - y) };
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = value(*x).data();
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gv * gelu_parts(v).1;
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let base = o * len * inner + c;
                            let dot: f64 = (0..*len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let e = base + j * inner;
                                gx[e] += y[e] * (g[e] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = value(*gamma).numel();
                let gam = value(*gamma).data();
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * dim..(r + 1) * dim;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dim {
                            let gh = gr[j] * gam[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for j in 0..dim {
                            gx[r * dim + j] += rs * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gamma, dim) {
                    for (e, &gv) in g.iter().enumerate() {
                        gg[e % dim] += gv * xhat[e];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta, dim) {
                    for (e, &gv) in g.iter().enumerate() {
                        gb[e % dim] += gv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let ts = value(*table).shape();
                let dim = ts[1];
                if let Some(gt) = slot(grads, nodes, *table, ts[0] * dim) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        for (d, &s) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                let n = g.len() / (outer * inner);
                if let Some(gx) = slot(grads, nodes, *x, outer * len * inner) {
                    for o in 0..*outer {
                        let dst = (o * len + start) * inner;
                        let src = o * n * inner;
                        for e in 0..n * inner {
                            gx[dst + e] += g[src + e];
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| value(p).numel() / outer)
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(gp) = slot(grads, nodes, p, w * outer) {
                        for o in 0..*outer {
                            for e in 0..w {
                                gp[o * w + e] += g[o * total + offset + e];
                            }
                        }
                    }
                    offset += w;
                }
                let _ = inner;
            }
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                scale,
            } => {
                if let Some(gx) = slot(grads, nodes, *x, outer * len * inner) {
                    for o in 0..*outer {
                        for j in 0..*len {
                            let dst = (o * len + j) * inner;
                            for c in 0..*inner {
                                gx[dst + c] += g[o * inner + c] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let n = value(*x).numel();
                if let Some(gx) = slot(grads, nodes, *x, n) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Expand { x } => {
                let xs = value(*x).shape();
                let offs = broadcast_offsets(xs, out.shape());
                if let Some(gx) = slot(grads, nodes, *x, value(*x).numel()) {
                    for (e, &o) in offs.iter().enumerate() {
                        gx[o] += g[e];
                    }
                }
            }
            Op::Permute { x, offsets } => {
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    for (e, &o) in offsets.iter().enumerate() {
                        gx[o] += g[e];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(grads, nodes, *x, g.len()) {
                    for ((a, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += gv * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let k = gold.len();
                let l = probs.len() / k;
                if let Some(gl) = slot(grads, nodes, *logits, probs.len()) {
                    let s = g[0] / k as f64;
                    for (r, &gi) in gold.iter().enumerate() {
                        for j in 0..l {
                            let y = if j == gi { 1.0 } else { 0.0 };
                            gl[r * l + j] += s * (probs[r * l + j] - y);
                        }
                    }
                }
            }
            Op::FrobeniusSq { parts } => {
                for &p in parts {
                    let pv = value(p).data();
                    if let Some(gp) = slot(grads, nodes, p, pv.len()) {
                        for (a, &v) in gp.iter_mut().zip(pv) {
                            *a += 2.0 * v * g[0];
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`]; zeros when
    /// `v` does not require a gradient or was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) if self.nodes[v.0].requires_grad => Tensor::from_parts(shape, g.clone()),
            _ => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter touched by this tape, indexed by
    /// parameter id. Untouched parameters are `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        let n = self.store.map(|s| s.len()).unwrap_or(0);
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (&id, &v) in &self.param_vars {
            out[id] = Some(self.grad(v));
        }
        out
    }
}
