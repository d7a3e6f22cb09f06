//! Reverse-mode tape.
//!
//! A [`Tape`] records primitive applications in execution order, so node
//! indices are already a topological order. Values are either owned by the
//! tape (and charged to the activation ledger) or borrowed from the caller,
//! which is how parameters and reconstructed layer inputs enter a graph
//! without being copied.
//!
//! Leaf gradients accumulate across repeated [`Tape::backward_from`] calls;
//! they are never overwritten.

use std::collections::HashMap;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::axis_split;
use super::kernels::{self, AttnDims, Padding};
use super::{Gradients, ParamId, ParamStore, RngStream, Scalar, Tensor};
use crate::profiler::ledger::{self, ScopeTag};
use crate::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    AddBias,
    MatMul {
        transpose_b: bool,
    },
    Relu,
    Sigmoid,
    Softmax {
        axis: usize,
    },
    LayerNorm {
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        padding: Padding,
    },
    DynConv {
        padding: Padding,
    },
    Attention {
        heads: usize,
        probs: Vec<T>,
    },
    Embedding {
        ids: Rc<[usize]>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Reshape,
    ReduceMax {
        axis: usize,
        argmax: Vec<u32>,
    },
    ReduceMean {
        axis: usize,
    },
    SumAll,
    Dropout {
        p: f64,
        seed: u64,
        position: u128,
    },
    CrossEntropy {
        targets: Rc<[usize]>,
        ignore: Option<usize>,
        smoothing: f64,
        count: usize,
    },
    WeightedSum,
}

impl<T: Scalar> Op<T> {
    fn saved_bytes(&self) -> usize {
        let s = T::DTYPE.size_of();
        match self {
            Op::LayerNorm { mean, rstd } => (mean.len() + rstd.len()) * s,
            Op::Attention { probs, .. } => probs.len() * s,
            Op::ReduceMax { argmax, .. } => argmax.len() * 4,
            _ => 0,
        }
    }
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Tensor<T>>,
    charged: usize,
    tag: Option<ScopeTag>,
}

/// Identifier for [`Tape::apply_primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Conv1d,
    DynConv,
    Attention,
    Embedding,
    Concat,
    Slice,
    Reshape,
    ReduceMax,
    ReduceMean,
    SumAll,
    Dropout,
    CrossEntropy,
    WeightedSum,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" | "subtract" => Primitive::Sub,
            "mul" | "multiply" => Primitive::Mul,
            "scale" => Primitive::Scale,
            "add_bias" => Primitive::AddBias,
            "matmul" => Primitive::MatMul,
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "softmax" => Primitive::Softmax,
            "layer_norm" => Primitive::LayerNorm,
            "conv1d" => Primitive::Conv1d,
            "dyn_conv" => Primitive::DynConv,
            "attention" => Primitive::Attention,
            "embedding" => Primitive::Embedding,
            "concat" => Primitive::Concat,
            "slice" => Primitive::Slice,
            "reshape" => Primitive::Reshape,
            "max" | "reduce_max" => Primitive::ReduceMax,
            "mean" | "reduce_mean" => Primitive::ReduceMean,
            "sum" => Primitive::SumAll,
            "dropout" => Primitive::Dropout,
            "cross_entropy" => Primitive::CrossEntropy,
            "weighted_sum" => Primitive::WeightedSum,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Attribute bag for [`Tape::apply_primitive`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub eps: Option<f64>,
    pub factor: Option<f64>,
    pub padding: Option<Padding>,
    pub p: Option<f64>,
    pub seed: Option<u64>,
    pub position: Option<u128>,
    pub ids: Option<Rc<[usize]>>,
    pub ids_shape: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub causal: bool,
    pub key_mask: Option<Rc<[bool]>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub smoothing: Option<f64>,
    pub ignore_index: Option<usize>,
    pub transpose_b: bool,
}

fn need<V>(v: Option<V>, op: &'static str, attr: &'static str) -> Result<V> {
    v.ok_or(Error::MissingAttr { op, attr })
}

/// Options for the fused attention primitive.
#[derive(Clone, Debug, Default)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    /// `[batch × lk]`, `true` marks a key that may be attended.
    pub key_mask: Option<Rc<[bool]>>,
}

pub struct Tape<'a, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
    params: Option<&'a ParamStore<T>>,
    param_vars: HashMap<ParamId, usize>,
    recording: bool,
}

impl<T: Scalar> Drop for Tape<'_, T> {
    fn drop(&mut self) {
        for n in &self.nodes {
            if let Some(tag) = n.tag {
                ledger::release(n.charged, tag);
            }
        }
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// A recording tape with no parameter store.
    pub fn new() -> Self {
        Self::build(None, true)
    }

    /// A recording tape that can resolve [`ParamId`]s against `params`.
    pub fn with_params(params: &'a ParamStore<T>) -> Self {
        Self::build(Some(params), true)
    }

    /// Evaluation-only tape: values are computed, nothing is differentiable.
    pub fn no_grad(params: &'a ParamStore<T>) -> Self {
        Self::build(Some(params), false)
    }

    fn build(params: Option<&'a ParamStore<T>>, recording: bool) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params,
            param_vars: HashMap::new(),
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Activation bytes currently owned by this tape.
    pub fn owned_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.charged).sum()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    fn var(&self, idx: usize) -> Var {
        Var { tape: self.id, idx }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        self.nodes[v.idx].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.idx).and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self, v: Var) {
        if let Some(n) = self.nodes.get_mut(v.idx) {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Value<'a, T>, op: Op<T>, inputs: Vec<usize>, leaf_rg: bool) -> Result<Var> {
        let requires_grad = self.recording
            && match op {
                Op::Leaf => leaf_rg,
                _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
            };
        let charged = match &value {
            Value::Owned(t) => t.bytes(),
            Value::Borrowed(_) => 0,
        } + op.saved_bytes();
        let tag = if charged > 0 {
            Some(ledger::retain(charged)?)
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            param: None,
            grad: None,
            charged,
            tag,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn push_op(&mut self, out: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        self.push(Value::Owned(out), op, inputs.to_vec(), false)
    }

    // ----------------------------------------------------------- leaves

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Value::Owned(t), Op::Leaf, Vec::new(), requires_grad)
    }

    /// Leaf backed by a caller-owned tensor (no copy, no ledger charge).
    pub fn leaf_ref(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Value::Borrowed(t), Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Registers a parameter as a differentiable leaf (once per tape).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&idx) = self.param_vars.get(&id) {
            return Ok(self.var(idx));
        }
        let store = self
            .params
            .ok_or_else(|| Error::Invalid("tape has no parameter store".into()))?;
        let v = self.push(Value::Borrowed(store.value(id)), Op::Leaf, Vec::new(), true)?;
        self.nodes[v.idx].param = Some(id);
        self.param_vars.insert(id, v.idx);
        Ok(v)
    }

    /// Fresh leaf sharing `v`'s values but none of its history.
    pub fn detach(&mut self, v: Var, requires_grad: bool) -> Result<Var> {
        let i = self.index(v)?;
        let t = self.nodes[i].value.get().clone();
        self.leaf(t, requires_grad)
    }

    // ------------------------------------------------------ elementwise

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.get().shape(), self.nodes[b].value.get().shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.value(a).add(self.value(b))?;
        self.push_op(out, Op::Add, &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("sub", ia, ib)?;
        let out = self.value(a).sub(self.value(b))?;
        self.push_op(out, Op::Sub, &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("mul", ia, ib)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op(out, Op::Mul, &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let f = T::of(factor);
        let out = self.value(a).scale(f);
        self.push_op(out, Op::Scale(f), &[ia])
    }

    /// `x [.., c] + bias [c]` broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.index(x)?, self.index(bias)?);
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.numel() != xv.last_dim() {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match trailing axis of {:?}", bv.shape(), xv.shape()),
            ));
        }
        let c = bv.numel();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        self.push_op(out, Op::AddBias, &[ix, ib])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push_op(out, Op::Relu, &[ix])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push_op(out, Op::Sigmoid, &[ix])
    }

    // ------------------------------------------------------------ linear

    /// `a [.., k] · b`, where `b` is `[k × n]` (or `[n × k]` if `transpose_b`).
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 {
            return Err(Error::shape(
                "matmul",
                format!("expected [.., k] x [k, n], got {:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let k = av.last_dim();
        let (bk, n) = if transpose_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dims differ: {:?} x {:?}{}",
                    av.shape(),
                    bv.shape(),
                    if transpose_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let rows = av.numel() / k.max(1);
        let data = kernels::matmul(av.data(), rows, k, bv.data(), n, transpose_b);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        self.push_op(out, Op::MatMul { transpose_b }, &[ia, ib])
    }

    // ---------------------------------------------------------- softmax

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let (o, l, i) = axis_split(xv.shape(), axis);
        let out = Tensor::new(xv.shape().to_vec(), kernels::softmax(xv.data(), o, l, i))?;
        self.push_op(out, Op::Softmax { axis }, &[ix])
    }

    /// Normalizes the trailing axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs trailing axis {c}", gv.shape(), bv.shape()),
            ));
        }
        let (y, mean, rstd) = kernels::layer_norm(xv.data(), gv.data(), bv.data(), c, eps);
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        self.push_op(out, Op::LayerNorm { mean, rstd }, &[ix, ig, ib])
    }

    // ------------------------------------------------------ convolutions

    fn seq_dims(&self, op: &'static str, x: usize) -> Result<(usize, usize, usize)> {
        let s = self.nodes[x].value.get().shape();
        if s.len() != 3 {
            return Err(Error::shape(op, format!("expected [batch, len, channels], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Depthwise 1-D convolution of `x [b, l, c]` with `weight [w, c]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, padding: Padding) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(weight)?);
        let (b, l, c) = self.seq_dims("conv1d", ix)?;
        let wv = self.value(weight);
        if wv.rank() != 2 || wv.shape()[1] != c {
            return Err(Error::shape(
                "conv1d",
                format!("weight {:?} vs channels {c}", wv.shape()),
            ));
        }
        let width = wv.shape()[0];
        if padding == Padding::Symmetric && width.is_multiple_of(2) {
            return Err(Error::shape(
                "conv1d",
                format!("symmetric padding needs odd width, got {width}"),
            ));
        }
        let data = kernels::conv1d(self.value(x).data(), wv.data(), b, l, c, width, padding);
        let out = Tensor::new(vec![b, l, c], data)?;
        self.push_op(out, Op::Conv1d { padding }, &[ix, iw])
    }

    /// Position-dependent depthwise convolution; `kernels [b, l, groups, w]`.
    pub fn dyn_conv(&mut self, x: Var, kernels_var: Var, padding: Padding) -> Result<Var> {
        let (ix, ik) = (self.index(x)?, self.index(kernels_var)?);
        let (b, l, c) = self.seq_dims("dyn_conv", ix)?;
        let kv = self.value(kernels_var);
        let ks = kv.shape();
        if ks.len() != 4 || ks[0] != b || ks[1] != l || ks[2] == 0 || c % ks[2] != 0 {
            return Err(Error::shape(
                "dyn_conv",
                format!("kernels {ks:?} incompatible with input [{b}, {l}, {c}]"),
            ));
        }
        let (groups, width) = (ks[2], ks[3]);
        if padding == Padding::Symmetric && width % 2 == 0 {
            return Err(Error::shape(
                "dyn_conv",
                format!("symmetric padding needs odd width, got {width}"),
            ));
        }
        let data = kernels::dyn_conv(self.value(x).data(), kv.data(), b, l, c, groups, width, padding);
        let out = Tensor::new(vec![b, l, c], data)?;
        self.push_op(out, Op::DynConv { padding }, &[ix, ik])
    }

    // --------------------------------------------------------- attention

    /// Fused multi-head scaled dot-product attention over `[b, l, c]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (iq, ik, iv) = (self.index(q)?, self.index(k)?, self.index(v)?);
        let (b, lq, c) = self.seq_dims("attention", iq)?;
        let (bk, lk, ck) = self.seq_dims("attention", ik)?;
        if self.nodes[iv].value.get().shape() != [bk, lk, ck] || bk != b || ck != c {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if spec.heads == 0 || c % spec.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{c} channels not divisible by {} heads", spec.heads),
            ));
        }
        if spec.causal && lk < lq {
            return Err(Error::shape(
                "attention",
                format!("causal attention needs lk >= lq, got {lk} < {lq}"),
            ));
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != b * lk {
                return Err(Error::shape(
                    "attention",
                    format!("key mask has {} entries, expected {}", m.len(), b * lk),
                ));
            }
        }
        let dims = AttnDims {
            batch: b,
            lq,
            lk,
            c,
            heads: spec.heads,
        };
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            spec.causal,
            spec.key_mask.as_deref(),
        );
        let out = Tensor::new(vec![b, lq, c], out)?;
        // probabilities are only kept when a backward pass can use them
        let rg = self.recording && [iq, ik, iv].iter().any(|&i| self.nodes[i].requires_grad);
        let probs = if rg { probs } else { Vec::new() };
        self.push_op(
            out,
            Op::Attention {
                heads: spec.heads,
                probs,
            },
            &[iq, ik, iv],
        )
    }

    // ---------------------------------------------------------- indexing

    /// Rows of `table [V, e]` selected by `ids`, shaped `ids_shape ++ [e]`.
    pub fn embedding(&mut self, table: Var, ids: Rc<[usize]>, ids_shape: &[usize]) -> Result<Var> {
        let it = self.index(table)?;
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape(
                "embedding",
                format!("table must be 2-D, got {:?}", tv.shape()),
            ));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids cannot form {ids_shape:?}", ids.len()),
            ));
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids.iter() {
            if id >= v {
                return Err(Error::shape(
                    "embedding",
                    format!("id {id} out of range for vocabulary {v}"),
                ));
            }
            data.extend_from_slice(&tv.data()[id * e..(id + 1) * e]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(e);
        let out = Tensor::new(shape, data)?;
        self.push_op(out, Op::Embedding { ids }, &[it])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        self.push_op(out, Op::Concat { axis }, &idx)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.value(x).slice_axis(axis, start, len)?;
        self.push_op(out, Op::Slice { axis, start }, &[ix])
    }

    /// `parts` equal slices along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || parts == 0 || !shape[axis].is_multiple_of(parts) {
            return Err(Error::shape(
                "split",
                format!("axis {axis} of {shape:?} is not divisible into {parts} parts"),
            ));
        }
        let w = shape[axis] / parts;
        (0..parts).map(|p| self.slice(x, axis, p * w, w)).collect()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push_op(out, Op::Reshape, &[ix])
    }

    // --------------------------------------------------------- reductions

    fn reduce_shape(&self, op: &'static str, x: usize, axis: usize) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let s = self.nodes[x].value.get().shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape(op, format!("axis {axis} invalid for {s:?}")));
        }
        let mut out = s.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok((out, axis_split(s, axis)))
    }

    /// Maximum over `axis` (the axis is removed).
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let (shape, (o, l, i)) = self.reduce_shape("reduce_max", ix, axis)?;
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); o * i];
        let mut argmax = vec![0u32; o * i];
        for a in 0..o {
            for b in 0..i {
                let mut best = 0;
                for j in 1..l {
                    if xd[a * l * i + j * i + b] > xd[a * l * i + best * i + b] {
                        best = j;
                    }
                }
                data[a * i + b] = xd[a * l * i + best * i + b];
                argmax[a * i + b] = best as u32;
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push_op(out, Op::ReduceMax { axis, argmax }, &[ix])
    }

    /// Mean over `axis` (the axis is removed).
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let (shape, (o, l, i)) = self.reduce_shape("reduce_mean", ix, axis)?;
        let xd = self.value(x).data();
        let inv = T::of(1.0 / l as f64);
        let mut data = vec![T::zero(); o * i];
        for a in 0..o {
            for j in 0..l {
                for b in 0..i {
                    data[a * i + b] += xd[a * l * i + j * i + b];
                }
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let out = Tensor::new(shape, data)?;
        self.push_op(out, Op::ReduceMean { axis }, &[ix])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::SumAll, &[ix])
    }

    // ------------------------------------------------------- stochastic

    /// Inverted dropout. The mask is a pure function of the stream's
    /// `(seed, position)` at call time and is regenerated, not stored.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let ix = self.index(x)?;
        let (seed, position) = (rng.seed(), rng.position());
        let keep = T::of(1.0 / (1.0 - p));
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if rng.uniform() < p {
                *v = T::zero();
            } else {
                *v *= keep;
            }
        }
        self.push_op(out, Op::Dropout { p, seed, position }, &[ix])
    }

    // ------------------------------------------------------------- losses

    /// Mean label-smoothed cross-entropy over rows whose target is not
    /// `ignore`; logits `[.., V]` with one target per row.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Rc<[usize]>,
        ignore: Option<usize>,
        smoothing: f64,
    ) -> Result<Var> {
        let il = self.index(logits)?;
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.numel() / vocab.max(1) != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), lv.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab && Some(t) != ignore) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} out of range for {vocab} classes"),
            ));
        }
        let (loss, count) = kernels::cross_entropy(lv.data(), vocab, &targets, ignore, smoothing);
        let out = Tensor::scalar(loss);
        self.push_op(
            out,
            Op::CrossEntropy {
                targets,
                ignore,
                smoothing,
                count,
            },
            &[il],
        )
    }

    /// `Σ_i w[i] · xs[i]` for a weight vector `w [K]` and `K` same-shape inputs.
    pub fn weighted_sum(&mut self, w: Var, xs: &[Var]) -> Result<Var> {
        let iw = self.index(w)?;
        let idx = xs.iter().map(|&x| self.index(x)).collect::<Result<Vec<_>>>()?;
        let wv = self.value(w);
        if wv.rank() != 1 || wv.numel() != xs.len() || xs.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {:?} for {} inputs", wv.shape(), xs.len()),
            ));
        }
        let shape = self.nodes[idx[0]].value.get().shape().to_vec();
        let mut out = Tensor::zeros(shape.clone());
        for (k, &i) in idx.iter().enumerate() {
            let xv = self.nodes[i].value.get();
            if xv.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{:?} vs {shape:?}", xv.shape())));
            }
            let wk = self.nodes[iw].value.get().data()[k];
            for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += wk * v;
            }
        }
        let mut inputs = vec![iw];
        inputs.extend(idx);
        self.push_op(out, Op::WeightedSum, &inputs)
    }

    // --------------------------------------------------------- dispatch

    /// Applies a primitive by identifier; `attrs` carries the non-tensor
    /// arguments (`seed` and `position` address the dropout stream).
    pub fn apply_primitive(&mut self, kind: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match kind {
            Primitive::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2, "sub")?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale => {
                arity(1, "scale")?;
                self.scale(inputs[0], need(attrs.factor, "scale", "factor")?)
            }
            Primitive::AddBias => {
                arity(2, "add_bias")?;
                self.add_bias(inputs[0], inputs[1])
            }
            Primitive::MatMul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1], attrs.transpose_b)
            }
            Primitive::Relu => {
                arity(1, "relu")?;
                self.relu(inputs[0])
            }
            Primitive::Sigmoid => {
                arity(1, "sigmoid")?;
                self.sigmoid(inputs[0])
            }
            Primitive::Softmax => {
                arity(1, "softmax")?;
                self.softmax(inputs[0], need(attrs.axis, "softmax", "axis")?)
            }
            Primitive::LayerNorm => {
                arity(3, "layer_norm")?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5))
            }
            Primitive::Conv1d => {
                arity(2, "conv1d")?;
                self.conv1d(inputs[0], inputs[1], need(attrs.padding, "conv1d", "padding")?)
            }
            Primitive::DynConv => {
                arity(2, "dyn_conv")?;
                self.dyn_conv(inputs[0], inputs[1], need(attrs.padding, "dyn_conv", "padding")?)
            }
            Primitive::Attention => {
                arity(3, "attention")?;
                let spec = AttentionSpec {
                    heads: need(attrs.heads, "attention", "heads")?,
                    causal: attrs.causal,
                    key_mask: attrs.key_mask.clone(),
                };
                self.attention(inputs[0], inputs[1], inputs[2], &spec)
            }
            Primitive::Embedding => {
                arity(1, "embedding")?;
                let ids = need(attrs.ids.clone(), "embedding", "ids")?;
                let shape = attrs.ids_shape.clone().unwrap_or_else(|| vec![ids.len()]);
                self.embedding(inputs[0], ids, &shape)
            }
            Primitive::Concat => self.concat(inputs, need(attrs.axis, "concat", "axis")?),
            Primitive::Slice => {
                arity(1, "slice")?;
                self.slice(
                    inputs[0],
                    need(attrs.axis, "slice", "axis")?,
                    need(attrs.start, "slice", "start")?,
                    need(attrs.len, "slice", "len")?,
                )
            }
            Primitive::Reshape => {
                arity(1, "reshape")?;
                let shape = need(attrs.shape.clone(), "reshape", "shape")?;
                self.reshape(inputs[0], &shape)
            }
            Primitive::ReduceMax => {
                arity(1, "reduce_max")?;
                self.reduce_max(inputs[0], need(attrs.axis, "reduce_max", "axis")?)
            }
            Primitive::ReduceMean => {
                arity(1, "reduce_mean")?;
                self.reduce_mean(inputs[0], need(attrs.axis, "reduce_mean", "axis")?)
            }
            Primitive::SumAll => {
                arity(1, "sum")?;
                self.sum_all(inputs[0])
            }
            Primitive::Dropout => {
                arity(1, "dropout")?;
                let seed = need(attrs.seed, "dropout", "seed")?;
                let mut rng = RngStream::at(seed, attrs.position.unwrap_or(0));
                self.dropout(inputs[0], need(attrs.p, "dropout", "p")?, &mut rng)
            }
            Primitive::CrossEntropy => {
                arity(1, "cross_entropy")?;
                let targets = need(attrs.ids.clone(), "cross_entropy", "ids")?;
                self.cross_entropy(inputs[0], targets, attrs.ignore_index, attrs.smoothing.unwrap_or(0.0))
            }
            Primitive::WeightedSum => {
                if inputs.len() < 2 {
                    return Err(Error::shape("weighted_sum", "needs weights and at least one input"));
                }
                self.weighted_sum(inputs[0], &inputs[1..])
            }
        }
    }

    // ---------------------------------------------------------- backward

    /// Accumulates `∂root/∂leaf · upstream` into every reachable leaf.
    pub fn backward_from(&mut self, root: Var, upstream: &Tensor<T>) -> Result<()> {
        let r = self.index(root)?;
        if !self.recording {
            return Err(Error::Invalid("backward on a no-grad tape".into()));
        }
        let rs = self.nodes[r].value.get().shape();
        if rs != upstream.shape() {
            return Err(Error::shape(
                "backward_from",
                format!("upstream {:?} vs root {rs:?}", upstream.shape()),
            ));
        }
        if !self.nodes[r].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(r + 1, || None);
        grads[r] = Some(upstream.clone());
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let input_grads = self.input_grads(i, &g)?;
            for (&inp, ig) in self.nodes[i].inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Moves every parameter leaf's accumulated gradient into `grads`.
    pub fn drain_param_grads(&mut self, grads: &mut Gradients<T>) -> Result<()> {
        for n in &mut self.nodes {
            let Some(id) = n.param else { continue };
            if let Some(g) = n.grad.take() {
                grads.accumulate_owned(id, g)?;
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| self.nodes[j].value.get()).collect();
        let want = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        let out = node.value.get();
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data);
        let gd = g.data();

        let grads = match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the sweep"),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let ga = want(0).then(|| like(ins[0], gd.iter().zip(ins[1].data()).map(|(&a, &b)| a * b).collect()));
                let gb = want(1).then(|| like(ins[1], gd.iter().zip(ins[0].data()).map(|(&a, &b)| a * b).collect()));
                vec![ga.transpose()?, gb.transpose()?]
            }
            Op::Scale(f) => vec![Some(g.scale(*f))],
            Op::AddBias => {
                let c = ins[1].numel();
                let mut db = vec![T::zero(); c];
                for (k, &v) in gd.iter().enumerate() {
                    db[k % c] += v;
                }
                vec![Some(g.clone()), Some(like(ins[1], db)?)]
            }
            Op::MatMul { transpose_b } => {
                let (a, b) = (ins[0], ins[1]);
                let k = a.last_dim();
                let rows = a.numel() / k.max(1);
                let n = out.last_dim();
                let ga = want(0)
                    .then(|| like(a, kernels::matmul_grad_a(gd, rows, k, b.data(), n, *transpose_b)))
                    .transpose()?;
                let gb = want(1)
                    .then(|| like(b, kernels::matmul_grad_b(a.data(), rows, k, gd, n, *transpose_b)))
                    .transpose()?;
                vec![ga, gb]
            }
            Op::Relu => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Some(like(out, d)?)]
            }
            Op::Sigmoid => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                vec![Some(like(out, d)?)]
            }
            Op::Softmax { axis } => {
                let (o, l, inner) = axis_split(out.shape(), *axis);
                vec![Some(like(out, kernels::softmax_grad(out.data(), gd, o, l, inner))?)]
            }
            Op::LayerNorm { mean, rstd } => {
                let c = ins[0].last_dim();
                let (dx, dg, db) = kernels::layer_norm_grad(ins[0].data(), ins[1].data(), mean, rstd, gd, c);
                vec![
                    Some(like(ins[0], dx)?),
                    Some(like(ins[1], dg)?),
                    Some(like(ins[2], db)?),
                ]
            }
            Op::Conv1d { padding } => {
                let s = ins[0].shape();
                let (dx, dw) = kernels::conv1d_grad(
                    ins[0].data(),
                    ins[1].data(),
                    gd,
                    s[0],
                    s[1],
                    s[2],
                    ins[1].shape()[0],
                    *padding,
                );
                vec![Some(like(ins[0], dx)?), Some(like(ins[1], dw)?)]
            }
            Op::DynConv { padding } => {
                let s = ins[0].shape();
                let ks = ins[1].shape();
                let (dx, dk) = kernels::dyn_conv_grad(
                    ins[0].data(),
                    ins[1].data(),
                    gd,
                    s[0],
                    s[1],
                    s[2],
                    ks[2],
                    ks[3],
                    *padding,
                );
                vec![Some(like(ins[0], dx)?), Some(like(ins[1], dk)?)]
            }
            Op::Attention { heads, probs } => {
                let (qs, ks) = (ins[0].shape(), ins[1].shape());
                let dims = AttnDims {
                    batch: qs[0],
                    lq: qs[1],
                    lk: ks[1],
                    c: qs[2],
                    heads: *heads,
                };
                let (dq, dk, dv) =
                    kernels::attention_grad(ins[0].data(), ins[1].data(), ins[2].data(), probs, gd, dims);
                vec![
                    Some(like(ins[0], dq)?),
                    Some(like(ins[1], dk)?),
                    Some(like(ins[2], dv)?),
                ]
            }
            Op::Embedding { ids } => {
                let e = ins[0].shape()[1];
                let mut dt = vec![T::zero(); ins[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[id * e + j] += gd[r * e + j];
                    }
                }
                vec![Some(like(ins[0], dt)?)]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(ins.len());
                for t in &ins {
                    let len = t.shape()[*axis];
                    v.push(Some(g.slice_axis(*axis, start, len)?));
                    start += len;
                }
                v
            }
            Op::Slice { axis, start } => {
                let src = ins[0];
                let (o, n, inner) = axis_split(src.shape(), *axis);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); src.numel()];
                for a in 0..o {
                    let dst = a * n * inner + start * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[a * len * inner..(a + 1) * len * inner]);
                }
                vec![Some(like(src, d)?)]
            }
            Op::Reshape => vec![Some(like(ins[0], gd.to_vec())?)],
            Op::ReduceMax { axis, argmax } => {
                let (o, l, inner) = axis_split(ins[0].shape(), *axis);
                let mut d = vec![T::zero(); ins[0].numel()];
                for a in 0..o {
                    for b in 0..inner {
                        let j = argmax[a * inner + b] as usize;
                        d[a * l * inner + j * inner + b] += gd[a * inner + b];
                    }
                }
                vec![Some(like(ins[0], d)?)]
            }
            Op::ReduceMean { axis } => {
                let (o, l, inner) = axis_split(ins[0].shape(), *axis);
                let inv = T::of(1.0 / l as f64);
                let mut d = vec![T::zero(); ins[0].numel()];
                for a in 0..o {
                    for j in 0..l {
                        for b in 0..inner {
                            d[a * l * inner + j * inner + b] = gd[a * inner + b] * inv;
                        }
                    }
                }
                vec![Some(like(ins[0], d)?)]
            }
            Op::SumAll => vec![Some(Tensor::full(ins[0].shape().to_vec(), gd[0]))],
            Op::Dropout { p, seed, position } => {
                let mut rng = RngStream::at(*seed, *position);
                let keep = T::of(1.0 / (1.0 - p));
                let d = gd
                    .iter()
                    .map(|&gv| if rng.uniform() < *p { T::zero() } else { gv * keep })
                    .collect();
                vec![Some(like(ins[0], d)?)]
            }
            Op::CrossEntropy {
                targets,
                ignore,
                smoothing,
                count,
            } => {
                let d = kernels::cross_entropy_grad(
                    ins[0].data(),
                    ins[0].last_dim(),
                    targets,
                    *ignore,
                    *smoothing,
                    *count,
                    gd[0],
                );
                vec![Some(like(ins[0], d)?)]
            }
            Op::WeightedSum => {
                let mut v = Vec::with_capacity(ins.len());
                let w = ins[0];
                let dw: Vec<T> = ins[1..]
                    .iter()
                    .map(|x| x.data().iter().zip(gd).map(|(&a, &b)| a * b).sum())
                    .collect();
                v.push(Some(like(w, dw)?));
                for k in 0..ins.len() - 1 {
                    v.push(want(k + 1).then(|| g.scale(w.data()[k])));
                }
                v
            }
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Gradients, ParamGroup, ParamStore};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn add_and_softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1., 2.]), false).unwrap();
        let b = tape.leaf(t(&[2], &[3., 4.]), false).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).to_f64_vec(), vec![4., 6.]);
        let z = tape.leaf(t(&[2], &[0., 0.]), false).unwrap();
        let sm = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(sm).to_f64_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_two_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[2., 4.]), false).unwrap();
        let g = tape.leaf(t(&[2], &[1., 1.]), false).unwrap();
        let b = tape.leaf(t(&[2], &[0., 0.]), false).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = tape.value(y).to_f64_vec();
        assert!((v[0] + expect).abs() < 1e-12 && (v[1] - expect).abs() < 1e-12);
        assert!((v[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn linear_and_product_rules() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[2.]), true).unwrap();
        let y = tape.leaf(t(&[1], &[5.]), true).unwrap();
        let three_x = tape.scale(x, 3.0).unwrap();
        tape.backward_from(three_x, &t(&[1], &[1.])).unwrap();
        assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![3.]);
        tape.zero_grad(x);
        let xy = tape.mul(x, y).unwrap();
        tape.backward_from(xy, &t(&[1], &[1.])).unwrap();
        assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![5.]);
        assert_eq!(tape.grad(y).unwrap().to_f64_vec(), vec![2.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[2.]), true).unwrap();
        let r = tape.scale(x, 3.0).unwrap();
        tape.backward_from(r, &t(&[1], &[1.])).unwrap();
        tape.backward_from(r, &t(&[1], &[1.])).unwrap();
        assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![6.]);
    }

    #[test]
    fn backward_rejects_bad_upstream_and_foreign_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
        let r = tape.scale(x, 2.0).unwrap();
        assert!(matches!(
            tape.backward_from(r, &t(&[3], &[1., 1., 1.])),
            Err(Error::Shape { .. })
        ));
        let mut other = Tape::<f64>::new();
        let z = other.leaf(t(&[2], &[0., 0.]), true).unwrap();
        assert!(matches!(
            tape.backward_from(z, &t(&[2], &[1., 1.])),
            Err(Error::NotOnTape)
        ));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1., 2.]), false).unwrap();
        let b = tape.leaf(t(&[3], &[1., 2., 3.]), false).unwrap();
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
        assert!(matches!("conv9".parse::<Primitive>(), Err(Error::UnknownPrimitive(_))));
    }

    #[test]
    fn detach_cuts_history() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
        let h = tape.scale(x, 2.0).unwrap();
        let d = tape.detach(h, true).unwrap();
        assert_eq!(tape.value(d), tape.value(h));
        let r = tape.scale(d, 5.0).unwrap();
        tape.backward_from(r, &t(&[2], &[1., 1.])).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(d).unwrap().to_f64_vec(), vec![5., 5.]);
    }

    #[test]
    fn dropout_replays_from_seed() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(vec![64], 1.0), false).unwrap();
        let a = tape.dropout(x, 0.3, &mut RngStream::at(9, 40)).unwrap();
        let b = tape.dropout(x, 0.3, &mut RngStream::at(9, 40)).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let c = tape.dropout(x, 0.3, &mut RngStream::at(9, 0)).unwrap();
        assert_ne!(tape.value(a), tape.value(c));
    }

    #[test]
    fn tape_releases_ledger_bytes_on_drop() {
        let before = ledger::retained_bytes();
        {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::zeros(vec![10]), true).unwrap();
            tape.scale(x, 2.0).unwrap();
            assert_eq!(ledger::retained_bytes(), before + 80);
        }
        assert_eq!(ledger::retained_bytes(), before);
    }

    #[test]
    fn draining_params_keeps_input_grads() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Theta, Tensor::from_f64(vec![2], &[2.0, 3.0]).unwrap());
        let x = Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.leaf_ref(&x, true).unwrap();
        let wv = tape.param(id).unwrap();
        let y = tape.mul(xv, wv).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward_from(s, &Tensor::scalar(1.0)).unwrap();
        let mut grads = Gradients::new();
        tape.drain_param_grads(&mut grads).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[1.0, -1.0]);
        assert_eq!(tape.grad(xv).unwrap().data(), &[2.0, 3.0]);
    }
}
