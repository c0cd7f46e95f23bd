//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application in order; [`Tape::backward`]
//! walks the trace in reverse and accumulates gradients into the named leaves.
//! The trace order is the accumulation order, so repeated runs are
//! bit-reproducible. Training runs in `f32`; gradient-check oracles run the
//! same code in `f64`.

pub mod gradcheck;

use crate::error::{Error, Result};
use indexmap::IndexMap;

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Scalar width tag used by file manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense row-major tensor. Rank 0 (`shape == []`) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorData<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero extent in shape {:?}", shape),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![S::zero(); numel] }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![v; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns when viewed as (everything-but-last, last) axes.
    fn row_view(&self) -> (usize, usize) {
        match self.shape.last() {
            Some(&c) => (self.data.len() / c, c),
            None => (1, 1),
        }
    }

    pub fn map_as_f64(&self) -> TensorData<f64> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &TensorData<f64>) -> Self {
        Self {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| S::from_f64(v)).collect(),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
pub type ValueId = usize;

/// One recorded primitive application: the op id plus input references.
/// The node's own value is the saved forward activation.
#[derive(Debug, Clone)]
pub enum Op<S> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    ScalarMul(ValueId, S),
    Neg(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Sigmoid(ValueId),
    Softplus(ValueId),
    Gelu(ValueId),
    MatMul {
        lhs: ValueId,
        rhs: ValueId,
        trans_rhs: bool,
    },
    SumAll(ValueId),
    MeanAll(ValueId),
    Softmax(ValueId),
    LogSoftmax(ValueId),
    EmbedGather {
        table: ValueId,
        ids: Vec<usize>,
    },
    IndexSelect {
        input: ValueId,
        axis: usize,
        indices: Vec<usize>,
    },
    PickPerRow {
        input: ValueId,
        cols: Vec<usize>,
    },
    Concat {
        parts: Vec<ValueId>,
        axis: usize,
    },
    Reshape(ValueId),
    LayerNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: S,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar-mul",
            Op::Neg(..) => "negate",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::MatMul { .. } => "matmul",
            Op::SumAll(..) => "sum-reduce",
            Op::MeanAll(..) => "mean-reduce",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log-softmax",
            Op::EmbedGather { .. } => "embedding-gather",
            Op::IndexSelect { .. } => "index-select",
            Op::PickPerRow { .. } => "pick-per-row",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm { .. } => "layer-norm",
        }
    }

    fn inputs(&self) -> Vec<ValueId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a) => vec![*a],
            Op::MatMul { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::EmbedGather { table, .. } => vec![*table],
            Op::IndexSelect { input, .. } => vec![*input],
            Op::PickPerRow { input, .. } => vec![*input],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node<S> {
    value: TensorData<S>,
    op: Op<S>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients keyed by leaf name, in leaf registration order.
pub type GradMap<S> = IndexMap<String, TensorData<S>>;

/// Trace of primitive applications with recorded forward values.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &TensorData<S> {
        &self.nodes[id].value
    }

    /// Register a differentiable leaf under a stable name.
    pub fn named_leaf(&mut self, name: &str, value: TensorData<S>) -> ValueId {
        self.push_node(value, Op::Leaf, true, Some(name.to_string()))
    }

    /// Register a constant (non-differentiable) leaf.
    pub fn constant(&mut self, value: TensorData<S>) -> ValueId {
        self.push_node(value, Op::Leaf, false, None)
    }

    pub fn constant_scalar(&mut self, v: S) -> ValueId {
        self.constant(TensorData::scalar(v))
    }

    fn push_node(
        &mut self,
        value: TensorData<S>,
        op: Op<S>,
        requires_grad: bool,
        name: Option<String>,
    ) -> ValueId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad, name });
        id
    }

    fn apply(&mut self, op: Op<S>) -> Result<ValueId> {
        let value = eval_op(&op, |id| &self.nodes[id].value)?;
        if !value.all_finite() {
            return Err(Error::NonFinite { context: op.name().to_string() });
        }
        let rg = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(value, op, rg, None))
    }

    // ── primitive surface ───────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: ValueId, c: S) -> Result<ValueId> {
        self.apply(Op::ScalarMul(a, c))
    }

    pub fn neg(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Neg(a))
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Gelu(a))
    }

    pub fn matmul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.apply(Op::MatMul { lhs, rhs, trans_rhs: false })
    }

    /// `lhs @ rhs^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.apply(Op::MatMul { lhs, rhs, trans_rhs: true })
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::MeanAll(a))
    }

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::Softmax(a))
    }

    /// Log-softmax along the last axis; probabilities are never materialized
    /// and then logged.
    pub fn log_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        self.apply(Op::LogSoftmax(a))
    }

    pub fn embed_gather(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        self.apply(Op::EmbedGather { table, ids: ids.to_vec() })
    }

    pub fn index_select(&mut self, input: ValueId, axis: usize, indices: &[usize]) -> Result<ValueId> {
        self.apply(Op::IndexSelect { input, axis, indices: indices.to_vec() })
    }

    /// `out[r] = input[r, cols[r]]` for a 2-D input.
    pub fn pick_per_row(&mut self, input: ValueId, cols: &[usize]) -> Result<ValueId> {
        self.apply(Op::PickPerRow { input, cols: cols.to_vec() })
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        self.apply(Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input].value.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!(
                    "cannot reshape {:?} to {:?}",
                    self.nodes[input].value.shape(),
                    shape
                ),
            });
        }
        let value = TensorData { shape, data: self.nodes[input].value.data.clone() };
        let rg = self.nodes[input].requires_grad;
        Ok(self.push_node(value, Op::Reshape(input), rg, None))
    }

    pub fn layer_norm(&mut self, input: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        self.apply(Op::LayerNorm { input, gamma, beta, eps: S::from_f64(1e-5) })
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss with respect to every named
    /// leaf that requires grad. Fan-out accumulates by summation, in trace
    /// order.
    pub fn backward(&self, loss: ValueId) -> Result<GradMap<S>> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![S::one()]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            // keep gradient for named leaves so it can be collected below
            if self.nodes[id].name.is_some() {
                grads[id] = Some(g);
            }
        }

        let mut out = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.name, node.requires_grad) {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
                out.insert(
                    name.clone(),
                    TensorData { shape: node.value.shape.clone(), data },
                );
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<S>>], target: ValueId, numel: usize, f: impl FnOnce(&mut [S])) {
        let slot = grads[target].get_or_insert_with(|| vec![S::zero(); numel]);
        f(slot);
    }

    fn propagate(&self, id: ValueId, g: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let node = &self.nodes[id];
        let rg = |i: ValueId| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (na, nb) = (self.nodes[*a].value.numel(), self.nodes[*b].value.numel());
                if rg(*a) {
                    Self::accumulate(grads, *a, na, |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si = *si + *gi;
                        }
                    });
                }
                if rg(*b) {
                    if nb == g.len() {
                        Self::accumulate(grads, *b, nb, |s| {
                            for (si, gi) in s.iter_mut().zip(g) {
                                *si = *si + *gi;
                            }
                        });
                    } else {
                        // row-broadcast add: reduce over rows
                        let cols = nb;
                        Self::accumulate(grads, *b, nb, |s| {
                            for (i, gi) in g.iter().enumerate() {
                                s[i % cols] = s[i % cols] + *gi;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si = *si + *gi;
                        }
                    });
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, g.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si = *si - *gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                if rg(*a) {
                    Self::accumulate(grads, *a, av.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] * bv[i];
                        }
                    });
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, bv.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] * av[i];
                        }
                    });
                }
            }
            Op::ScalarMul(a, c) => {
                if rg(*a) {
                    let c = *c;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si = *si + *gi * c;
                        }
                    });
                }
            }
            Op::Neg(a) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si = *si - *gi;
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if rg(*a) {
                    let y = &node.value.data;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] * y[i];
                        }
                    });
                }
            }
            Op::Log(a) => {
                if rg(*a) {
                    let x = &self.nodes[*a].value.data;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] / x[i];
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if rg(*a) {
                    let y = &node.value.data;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] * y[i] * (S::one() - y[i]);
                        }
                    });
                }
            }
            Op::Softplus(a) => {
                if rg(*a) {
                    let x = &self.nodes[*a].value.data;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] * stable_sigmoid(x[i]);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let x = &self.nodes[*a].value.data;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + g[i] * gelu_grad(x[i]);
                        }
                    });
                }
            }
            Op::MatMul { lhs, rhs, trans_rhs } => {
                let a = &self.nodes[*lhs].value;
                let b = &self.nodes[*rhs].value;
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = node.value.shape[1];
                if !trans_rhs {
                    // C = A·B. dA = G·Bᵀ; dB = Aᵀ·G.
                    if rg(*lhs) {
                        Self::accumulate(grads, *lhs, a.numel(), |s| {
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc = S::zero();
                                    for j in 0..n {
                                        acc = acc + g[i * n + j] * b.data[p * n + j];
                                    }
                                    s[i * k + p] = s[i * k + p] + acc;
                                }
                            }
                        });
                    }
                    if rg(*rhs) {
                        Self::accumulate(grads, *rhs, b.numel(), |s| {
                            for p in 0..k {
                                for j in 0..n {
                                    let mut acc = S::zero();
                                    for i in 0..m {
                                        acc = acc + a.data[i * k + p] * g[i * n + j];
                                    }
                                    s[p * n + j] = s[p * n + j] + acc;
                                }
                            }
                        });
                    }
                } else {
                    // C = A·Bᵀ with B: [n, k]. dA = G·B; dB = Gᵀ·A.
                    if rg(*lhs) {
                        Self::accumulate(grads, *lhs, a.numel(), |s| {
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc = S::zero();
                                    for j in 0..n {
                                        acc = acc + g[i * n + j] * b.data[j * k + p];
                                    }
                                    s[i * k + p] = s[i * k + p] + acc;
                                }
                            }
                        });
                    }
                    if rg(*rhs) {
                        Self::accumulate(grads, *rhs, b.numel(), |s| {
                            for j in 0..n {
                                for p in 0..k {
                                    let mut acc = S::zero();
                                    for i in 0..m {
                                        acc = acc + g[i * n + j] * a.data[i * k + p];
                                    }
                                    s[j * k + p] = s[j * k + p] + acc;
                                }
                            }
                        });
                    }
                }
            }
            Op::SumAll(a) => {
                if rg(*a) {
                    let n = self.nodes[*a].value.numel();
                    Self::accumulate(grads, *a, n, |s| {
                        for si in s.iter_mut() {
                            *si = *si + g[0];
                        }
                    });
                }
            }
            Op::MeanAll(a) => {
                if rg(*a) {
                    let n = self.nodes[*a].value.numel();
                    let scale = g[0] / S::from_f64(n as f64);
                    Self::accumulate(grads, *a, n, |s| {
                        for si in s.iter_mut() {
                            *si = *si + scale;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let y = &node.value;
                    let (rows, cols) = y.row_view();
                    Self::accumulate(grads, *a, y.numel(), |s| {
                        for r in 0..rows {
                            let base = r * cols;
                            let mut dot = S::zero();
                            for j in 0..cols {
                                dot = dot + g[base + j] * y.data[base + j];
                            }
                            for j in 0..cols {
                                s[base + j] =
                                    s[base + j] + y.data[base + j] * (g[base + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if rg(*a) {
                    let y = &node.value; // log-probs
                    let (rows, cols) = y.row_view();
                    Self::accumulate(grads, *a, y.numel(), |s| {
                        for r in 0..rows {
                            let base = r * cols;
                            let mut gsum = S::zero();
                            for j in 0..cols {
                                gsum = gsum + g[base + j];
                            }
                            for j in 0..cols {
                                let p = y.data[base + j].exp();
                                s[base + j] = s[base + j] + g[base + j] - p * gsum;
                            }
                        }
                    });
                }
            }
            Op::EmbedGather { table, ids } => {
                if rg(*table) {
                    let t = &self.nodes[*table].value;
                    let d = t.shape[1];
                    Self::accumulate(grads, *table, t.numel(), |s| {
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                s[id * d + j] = s[id * d + j] + g[row * d + j];
                            }
                        }
                    });
                }
            }
            Op::IndexSelect { input, axis, indices } => {
                if rg(*input) {
                    let x = &self.nodes[*input].value;
                    if x.shape.len() == 1 {
                        Self::accumulate(grads, *input, x.numel(), |s| {
                            for (i, &idx) in indices.iter().enumerate() {
                                s[idx] = s[idx] + g[i];
                            }
                        });
                    } else {
                        let (r, c) = (x.shape[0], x.shape[1]);
                        if *axis == 0 {
                            Self::accumulate(grads, *input, x.numel(), |s| {
                                for (i, &idx) in indices.iter().enumerate() {
                                    for j in 0..c {
                                        s[idx * c + j] = s[idx * c + j] + g[i * c + j];
                                    }
                                }
                            });
                        } else {
                            let out_c = indices.len();
                            Self::accumulate(grads, *input, x.numel(), |s| {
                                for i in 0..r {
                                    for (j, &idx) in indices.iter().enumerate() {
                                        s[i * c + idx] = s[i * c + idx] + g[i * out_c + j];
                                    }
                                }
                            });
                        }
                    }
                }
            }
            Op::PickPerRow { input, cols } => {
                if rg(*input) {
                    let x = &self.nodes[*input].value;
                    let c = x.shape[1];
                    Self::accumulate(grads, *input, x.numel(), |s| {
                        for (r, &col) in cols.iter().enumerate() {
                            s[r * c + col] = s[r * c + col] + g[r];
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.numel();
                        if rg(p) {
                            let seg = &g[offset..offset + n];
                            Self::accumulate(grads, p, n, |s| {
                                for (si, gi) in s.iter_mut().zip(seg) {
                                    *si = *si + *gi;
                                }
                            });
                        }
                        offset += n;
                    }
                } else {
                    let rows = self.nodes[parts[0]].value.shape[0];
                    let total_c = node.value.shape[1];
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.shape[1];
                        if rg(p) {
                            Self::accumulate(grads, p, rows * pc, |s| {
                                for r in 0..rows {
                                    for j in 0..pc {
                                        s[r * pc + j] =
                                            s[r * pc + j] + g[r * total_c + col_off + j];
                                    }
                                }
                            });
                        }
                        col_off += pc;
                    }
                }
            }
            Op::Reshape(a) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si = *si + *gi;
                        }
                    });
                }
            }
            Op::LayerNorm { input, gamma, beta, eps } => {
                let x = &self.nodes[*input].value;
                let gam = &self.nodes[*gamma].value;
                let (rows, cols) = x.row_view();
                let cn = S::from_f64(cols as f64);
                // recompute per-row statistics
                for r in 0..rows {
                    let base = r * cols;
                    let mut mean = S::zero();
                    for j in 0..cols {
                        mean = mean + x.data[base + j];
                    }
                    mean = mean / cn;
                    let mut var = S::zero();
                    for j in 0..cols {
                        let d = x.data[base + j] - mean;
                        var = var + d * d;
                    }
                    var = var / cn;
                    let rstd = S::one() / (var + *eps).sqrt();

                    let xhat: Vec<S> = (0..cols)
                        .map(|j| (x.data[base + j] - mean) * rstd)
                        .collect();
                    let dy = &g[base..base + cols];

                    if rg(*beta) {
                        Self::accumulate(grads, *beta, cols, |s| {
                            for j in 0..cols {
                                s[j] = s[j] + dy[j];
                            }
                        });
                    }
                    if rg(*gamma) {
                        Self::accumulate(grads, *gamma, cols, |s| {
                            for j in 0..cols {
                                s[j] = s[j] + dy[j] * xhat[j];
                            }
                        });
                    }
                    if rg(*input) {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        let dxhat: Vec<S> = (0..cols).map(|j| dy[j] * gam.data[j]).collect();
                        for j in 0..cols {
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat[j];
                        }
                        m1 = m1 / cn;
                        m2 = m2 / cn;
                        Self::accumulate(grads, *input, x.numel(), |s| {
                            for j in 0..cols {
                                s[base + j] =
                                    s[base + j] + rstd * (dxhat[j] - m1 - xhat[j] * m2);
                            }
                        });
                    }
                }
            }
        }
    }

    /// Recompute every non-leaf value from its recorded inputs and compare
    /// bit-for-bit against the stored forward value.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let recomputed = eval_op(&node.op, |id| &self.nodes[id].value)?;
            let same = recomputed.shape == node.value.shape
                && recomputed
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus_value<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    let m = if x > S::zero() { x } else { S::zero() };
    m + (S::one() + (-x.abs()).exp()).ln()
}

fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    S::from_f64(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Forward kernel shared by recording and replay.
fn eval_op<'a, S: Scalar>(
    op: &Op<S>,
    get: impl Fn(ValueId) -> &'a TensorData<S>,
) -> Result<TensorData<S>> {
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            let (x, y) = (get(*a), get(*b));
            if x.shape == y.shape {
                let data = x.data.iter().zip(&y.data).map(|(u, v)| *u + *v).collect();
                Ok(TensorData { shape: x.shape.clone(), data })
            } else if x.shape.len() == 2 && y.shape.len() == 1 && x.shape[1] == y.shape[0] {
                // [r, c] + [c] row broadcast (bias add)
                let c = y.shape[0];
                let data = x
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, u)| *u + y.data[i % c])
                    .collect();
                Ok(TensorData { shape: x.shape.clone(), data })
            } else {
                Err(shape_err(
                    "add",
                    format!("{:?} vs {:?}", x.shape, y.shape),
                ))
            }
        }
        Op::Sub(a, b) => {
            let (x, y) = (get(*a), get(*b));
            if x.shape != y.shape {
                return Err(shape_err("sub", format!("{:?} vs {:?}", x.shape, y.shape)));
            }
            let data = x.data.iter().zip(&y.data).map(|(u, v)| *u - *v).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Mul(a, b) => {
            let (x, y) = (get(*a), get(*b));
            if x.shape != y.shape {
                return Err(shape_err("mul", format!("{:?} vs {:?}", x.shape, y.shape)));
            }
            let data = x.data.iter().zip(&y.data).map(|(u, v)| *u * *v).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::ScalarMul(a, c) => {
            let x = get(*a);
            let data = x.data.iter().map(|u| *u * *c).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Neg(a) => {
            let x = get(*a);
            let data = x.data.iter().map(|u| -*u).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Exp(a) => {
            let x = get(*a);
            let data = x.data.iter().map(|u| u.exp()).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Log(a) => {
            let x = get(*a);
            if x.data.iter().any(|v| *v <= S::zero()) {
                return Err(Error::InvalidInput(
                    "log of non-positive value; use log-softmax for probabilities".into(),
                ));
            }
            let data = x.data.iter().map(|u| u.ln()).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Sigmoid(a) => {
            let x = get(*a);
            let data = x.data.iter().map(|u| stable_sigmoid(*u)).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Softplus(a) => {
            let x = get(*a);
            let data = x.data.iter().map(|u| softplus_value(*u)).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::Gelu(a) => {
            let x = get(*a);
            let data = x.data.iter().map(|u| gelu_value(*u)).collect();
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::MatMul { lhs, rhs, trans_rhs } => {
            let (a, b) = (get(*lhs), get(*rhs));
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(shape_err(
                    "matmul",
                    format!("expects 2-D inputs, got {:?} and {:?}", a.shape, b.shape),
                ));
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (n, bk) = if *trans_rhs {
                (b.shape[0], b.shape[1])
            } else {
                (b.shape[1], b.shape[0])
            };
            if k != bk {
                return Err(shape_err(
                    "matmul",
                    format!(
                        "inner dimensions differ: {:?} x {:?}{}",
                        a.shape,
                        b.shape,
                        if *trans_rhs { " (transposed)" } else { "" }
                    ),
                ));
            }
            let mut data = vec![S::zero(); m * n];
            if *trans_rhs {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = S::zero();
                        for p in 0..k {
                            acc = acc + a.data[i * k + p] * b.data[j * k + p];
                        }
                        data[i * n + j] = acc;
                    }
                }
            } else {
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        let row = p * n;
                        let out = i * n;
                        for j in 0..n {
                            data[out + j] = data[out + j] + av * b.data[row + j];
                        }
                    }
                }
            }
            Ok(TensorData { shape: vec![m, n], data })
        }
        Op::SumAll(a) => {
            let x = get(*a);
            let mut acc = S::zero();
            for v in &x.data {
                acc = acc + *v;
            }
            Ok(TensorData::scalar(acc))
        }
        Op::MeanAll(a) => {
            let x = get(*a);
            let mut acc = S::zero();
            for v in &x.data {
                acc = acc + *v;
            }
            Ok(TensorData::scalar(acc / S::from_f64(x.numel() as f64)))
        }
        Op::Softmax(a) => {
            let x = get(*a);
            let (rows, cols) = x.row_view();
            let mut data = vec![S::zero(); x.numel()];
            for r in 0..rows {
                let base = r * cols;
                let row = &x.data[base..base + cols];
                let mut max = row[0];
                for v in row {
                    if *v > max {
                        max = *v;
                    }
                }
                let mut z = S::zero();
                for j in 0..cols {
                    let e = (row[j] - max).exp();
                    data[base + j] = e;
                    z = z + e;
                }
                for j in 0..cols {
                    data[base + j] = data[base + j] / z;
                }
            }
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::LogSoftmax(a) => {
            let x = get(*a);
            let (rows, cols) = x.row_view();
            let mut data = vec![S::zero(); x.numel()];
            for r in 0..rows {
                let base = r * cols;
                let row = &x.data[base..base + cols];
                let mut max = row[0];
                for v in row {
                    if *v > max {
                        max = *v;
                    }
                }
                let mut z = S::zero();
                for j in 0..cols {
                    z = z + (row[j] - max).exp();
                }
                let lz = z.ln() + max;
                for j in 0..cols {
                    data[base + j] = row[j] - lz;
                }
            }
            Ok(TensorData { shape: x.shape.clone(), data })
        }
        Op::EmbedGather { table, ids } => {
            let t = get(*table);
            if t.shape.len() != 2 {
                return Err(shape_err(
                    "embedding-gather",
                    format!("table must be 2-D, got {:?}", t.shape),
                ));
            }
            let (v, d) = (t.shape[0], t.shape[1]);
            if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
                return Err(shape_err(
                    "embedding-gather",
                    format!("id {} out of range for table with {} rows", bad, v),
                ));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
            }
            Ok(TensorData { shape: vec![ids.len(), d], data })
        }
        Op::IndexSelect { input, axis, indices } => {
            let x = get(*input);
            match (x.shape.len(), axis) {
                (1, 0) => {
                    if let Some(&bad) = indices.iter().find(|&&i| i >= x.shape[0]) {
                        return Err(shape_err(
                            "index-select",
                            format!("index {} out of range {:?}", bad, x.shape),
                        ));
                    }
                    let data = indices.iter().map(|&i| x.data[i]).collect();
                    Ok(TensorData { shape: vec![indices.len()], data })
                }
                (2, 0) => {
                    let (r, c) = (x.shape[0], x.shape[1]);
                    if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
                        return Err(shape_err(
                            "index-select",
                            format!("row {} out of range {:?}", bad, x.shape),
                        ));
                    }
                    let mut data = Vec::with_capacity(indices.len() * c);
                    for &i in indices {
                        data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
                    }
                    Ok(TensorData { shape: vec![indices.len(), c], data })
                }
                (2, 1) => {
                    let (r, c) = (x.shape[0], x.shape[1]);
                    if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
                        return Err(shape_err(
                            "index-select",
                            format!("column {} out of range {:?}", bad, x.shape),
                        ));
                    }
                    let mut data = Vec::with_capacity(indices.len() * r);
                    for i in 0..r {
                        for &j in indices {
                            data.push(x.data[i * c + j]);
                        }
                    }
                    Ok(TensorData { shape: vec![r, indices.len()], data })
                }
                _ => Err(shape_err(
                    "index-select",
                    format!("axis {} invalid for shape {:?}", axis, x.shape),
                )),
            }
        }
        Op::PickPerRow { input, cols } => {
            let x = get(*input);
            if x.shape.len() != 2 {
                return Err(shape_err(
                    "pick-per-row",
                    format!("expects a 2-D input, got {:?}", x.shape),
                ));
            }
            let (r, c) = (x.shape[0], x.shape[1]);
            if cols.len() != r {
                return Err(shape_err(
                    "pick-per-row",
                    format!("{} columns for {} rows", cols.len(), r),
                ));
            }
            if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
                return Err(shape_err(
                    "pick-per-row",
                    format!("column {} out of range {:?}", bad, x.shape),
                ));
            }
            let data = cols.iter().enumerate().map(|(i, &j)| x.data[i * c + j]).collect();
            Ok(TensorData { shape: vec![r], data })
        }
        Op::Concat { parts, axis } => {
            if parts.is_empty() {
                return Err(shape_err("concat", "no inputs".into()));
            }
            let first = get(parts[0]);
            if first.shape.len() == 1 || *axis == 0 {
                let trailing: &[usize] = if first.shape.is_empty() { &[] } else { &first.shape[1..] };
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let x = get(p);
                    if x.shape.is_empty() || &x.shape[1..] != trailing {
                        return Err(shape_err(
                            "concat",
                            format!("incompatible shapes {:?} vs {:?}", first.shape, x.shape),
                        ));
                    }
                    rows += x.shape[0];
                    data.extend_from_slice(&x.data);
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(trailing);
                Ok(TensorData { shape, data })
            } else {
                let rows = first.shape[0];
                let mut cols = 0;
                for &p in parts {
                    let x = get(p);
                    if x.shape.len() != 2 || x.shape[0] != rows {
                        return Err(shape_err(
                            "concat",
                            format!("incompatible shapes along axis 1: {:?}", x.shape),
                        ));
                    }
                    cols += x.shape[1];
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        let x = get(p);
                        let pc = x.shape[1];
                        data.extend_from_slice(&x.data[r * pc..(r + 1) * pc]);
                    }
                }
                Ok(TensorData { shape: vec![rows, cols], data })
            }
        }
        Op::Reshape(a) => Ok(get(*a).clone()),
        Op::LayerNorm { input, gamma, beta, eps } => {
            let x = get(*input);
            let gam = get(*gamma);
            let bet = get(*beta);
            let (rows, cols) = x.row_view();
            if gam.shape != vec![cols] || bet.shape != vec![cols] {
                return Err(shape_err(
                    "layer-norm",
                    format!(
                        "gamma {:?} / beta {:?} must match last axis {}",
                        gam.shape, bet.shape, cols
                    ),
                ));
            }
            let cn = S::from_f64(cols as f64);
            let mut data = vec![S::zero(); x.numel()];
            for r in 0..rows {
                let base = r * cols;
                let mut mean = S::zero();
                for j in 0..cols {
                    mean = mean + x.data[base + j];
                }
                mean = mean / cn;
                let mut var = S::zero();
                for j in 0..cols {
                    let d = x.data[base + j] - mean;
                    var = var + d * d;
                }
                var = var / cn;
                let rstd = S::one() / (var + *eps).sqrt();
                for j in 0..cols {
                    let xhat = (x.data[base + j] - mean) * rstd;
                    data[base + j] = xhat * gam.data[j] + bet.data[j];
                }
            }
            Ok(TensorData { shape: x.shape.clone(), data })
        }
    }
}

#[cfg(test)]
mod tests;
