//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable operation in execution order;
//! since the record is append-only, replaying it backwards is already a
//! topological traversal. Everything is plain `f64` with fixed reduction
//! order, so identical inputs produce bitwise-identical values and
//! gradients. Non-finite results are hard errors, never silent values.

use std::collections::BTreeMap;

use thiserror::Error;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Tensor ──────────────────────────────────────────────────────────

/// Dense n-dimensional value, row-major, with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape is all-positive, matches
    /// the data length, and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor::new" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient buffer; the shape invariant (same length as data)
    /// is enforced.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor::set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Bitwise equality of the value buffers (shape and every f64 bit).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ── Tape ────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { a: NodeId },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SoftmaxLastDim { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, inv_std: Vec<f64>, mean: Vec<f64> },
    AddBias { x: NodeId, bias: NodeId },
    NormalizeRows { x: NodeId, inv_norm: Vec<f64> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    BceLoss { probs: NodeId, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Append-only record of differentiable operations. Reverse index order is
/// a valid topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Records a tensor as a leaf; gradients are tracked iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf {
                requires_grad: t.requires_grad,
            },
        )
    }

    /// Records raw data as a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(vec![1], vec![v])
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient buffer of a node, present after `backward` for every node
    /// that participates in the differentiated subgraph.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_finite(&self, id: NodeId, op: &'static str) -> Result<NodeId> {
        if self.nodes[id.0].data.iter().any(|v| !v.is_finite()) {
            Err(TensorError::NonFinite { op })
        } else {
            Ok(id)
        }
    }

    fn require_2d(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::Domain {
                op,
                msg: format!("expected a 2-d tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.require_2d(a, "matmul")?;
        let (kb, n) = self.require_2d(b, "matmul")?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(vec![m, n], out, needs, Op::Matmul { a, b });
        self.check_finite(id, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![c, r], out, needs, Op::Transpose { a }))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.data(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.data(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b, op_name)?;
        let numel: usize = shape.iter().product();
        let da = self.data(a);
        let db = self.data(b);
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = if da.len() == 1 { da[0] } else { da[i] };
            let y = if db.len() == 1 { db[0] } else { db[i] };
            out.push(f(x, y));
        }
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(shape, out, needs, op);
        self.check_finite(id, op_name)
    }

    /// Elementwise add; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiplies by a plain constant (recorded as a constant scalar node).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant_scalar(c)?;
        self.mul(a, k)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        let id = self.push(shape, out, needs, Op::Sigmoid { a });
        self.check_finite(id, "sigmoid")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        let id = self.push(shape, out, needs, Op::Gelu { a });
        self.check_finite(id, "gelu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.exp()).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        let id = self.push(shape, out, needs, Op::Exp { a });
        self.check_finite(id, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("log of non-positive value {bad}"),
            });
        }
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.ln()).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        let id = self.push(shape, out, needs, Op::Log { a });
        self.check_finite(id, "log")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        let id = self.push(vec![1], vec![s], needs, Op::Sum { a });
        self.check_finite(id, "sum")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(TensorError::Domain {
                op: "mean",
                msg: "empty reduction axis".into(),
            });
        }
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let needs = self.needs(a);
        let id = self.push(vec![1], vec![s], needs, Op::Mean { a });
        self.check_finite(id, "mean")
    }

    /// Row-wise softmax over the last dimension (max-shifted for stability).
    /// Output rows are strictly positive and sum to 1.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if d == 0 {
            return Err(TensorError::Domain {
                op: "softmax_lastdim",
                msg: "empty reduction axis".into(),
            });
        }
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for row in 0..src.len() / d {
            let x = &src[row * d..(row + 1) * d];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (x[j] - m).exp();
                out[row * d + j] = e;
                z += e;
            }
            for j in 0..d {
                out[row * d + j] /= z;
            }
        }
        let needs = self.needs(a);
        let id = self.push(shape, out, needs, Op::SoftmaxLastDim { a });
        self.check_finite(id, "softmax_lastdim")
    }

    /// Row-wise layer normalization over the last dimension, followed by a
    /// per-feature gain and bias (shapes equal to the last dimension).
    pub fn layer_norm_lastdim(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if d == 0 {
            return Err(TensorError::Domain {
                op: "layer_norm_lastdim",
                msg: "empty reduction axis".into(),
            });
        }
        for param in [gain, bias] {
            if self.data(param).len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_lastdim",
                    lhs: shape,
                    rhs: self.shape(param).to_vec(),
                });
            }
        }
        let rows = self.data(x).len() / d;
        let mut out = vec![0.0; self.data(x).len()];
        let mut inv_std = vec![0.0; rows];
        let mut means = vec![0.0; rows];
        {
            let src = self.data(x);
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for row in 0..rows {
                let xs = &src[row * d..(row + 1) * d];
                let mu = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                means[row] = mu;
                inv_std[row] = is;
                for j in 0..d {
                    out[row * d + j] = g[j] * ((xs[j] - mu) * is) + b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let id = self.push(
            shape,
            out,
            needs,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                mean: means,
            },
        );
        self.check_finite(id, "layer_norm_lastdim")
    }

    /// Adds a `[c]` bias vector to every row of a `[r,c]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "add_bias")?;
        if self.data(bias).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let src = self.data(x);
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let id = self.push(vec![r, c], out, needs, Op::AddBias { x, bias });
        self.check_finite(id, "add_bias")
    }

    /// Rescales each row of a `[r,c]` tensor to unit L2 norm. A zero-norm
    /// row is a numeric error.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "normalize_rows")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        let mut inv_norm = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Domain {
                    op: "normalize_rows",
                    msg: format!("zero-norm row {i}"),
                });
            }
            let inv = 1.0 / n;
            inv_norm[i] = inv;
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let needs = self.needs(x);
        let id = self.push(vec![r, c], out, needs, Op::NormalizeRows { x, inv_norm });
        self.check_finite(id, "normalize_rows")
    }

    /// Column slice `[r, start..start+len]` of a `[r,c]` tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Domain {
                op: "slice_cols",
                msg: format!("slice {start}..{} out of bounds for {c} columns", start + len),
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, len], out, needs, Op::SliceCols { x, start }))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = self.require_2d(parts[0], "concat_cols")?;
        let mut total_c = 0;
        for &p in parts {
            let (rp, cp) = self.require_2d(p, "concat_cols")?;
            if rp != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_c += cp;
        }
        let mut out = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                let src = self.data(p);
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![r, total_c],
            out,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenates 2-d tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of zero parts".into()));
        }
        let (_, c) = self.require_2d(parts[0], "concat_rows")?;
        let mut total_r = 0;
        for &p in parts {
            let (rp, cp) = self.require_2d(p, "concat_rows")?;
            if cp != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_r += rp;
        }
        let mut out = Vec::with_capacity(total_r * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![total_r, c],
            out,
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Mean binary cross entropy between probabilities and 0/1 targets:
    /// `-mean(y·ln p + (1-y)·ln(1-p))` with probabilities clamped to
    /// `[BCE_CLAMP, 1-BCE_CLAMP]` before the logs.
    pub fn bce_loss(&mut self, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
        if self.shape(probs) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                lhs: self.shape(probs).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Domain {
                op: "bce_loss",
                msg: "targets must be exactly 0 or 1".into(),
            });
        }
        let p = self.data(probs);
        let n = p.len() as f64;
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            let y = targets.data()[i];
            let ph = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc += -(y * ph.ln() + (1.0 - y) * (1.0 - ph).ln());
        }
        let needs = self.needs(probs);
        let id = self.push(
            vec![1],
            vec![acc / n],
            needs,
            Op::BceLoss {
                probs,
                targets: targets.data().to_vec(),
            },
        );
        self.check_finite(id, "bce_loss")
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// node in the differentiated subgraph; `requires_grad` leaves that
    /// are unreachable from the loss end up with zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward may run only once per tape".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        // Zero-filled buffers for every differentiable leaf, so that leaves
        // unreachable from the loss still report a gradient.
        for node in self.nodes.iter_mut() {
            if let Op::Leaf { requires_grad: true } = node.op {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = self.nodes[idx].grad.clone().expect("checked above");
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bd = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let ad = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] = s;
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::Add { a, b } => {
                self.binary_grad(*a, g, |_, _| 1.0, *a, *b, idx);
                self.binary_grad(*b, g, |_, _| 1.0, *a, *b, idx);
            }
            Op::Sub { a, b } => {
                self.binary_grad(*a, g, |_, _| 1.0, *a, *b, idx);
                self.binary_grad(*b, g, |_, _| -1.0, *a, *b, idx);
            }
            Op::Mul { a, b } => {
                self.binary_grad(*a, g, |_, y| y, *a, *b, idx);
                self.binary_grad(*b, g, |x, _| x, *a, *b, idx);
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let out = &self.nodes[idx].data;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(out.iter())
                        .map(|(gi, s)| gi * s * (1.0 - s))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let xs = self.data(*a);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xs.iter())
                        .map(|(gi, &x)| gi * gelu_grad_scalar(x))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Exp { a } => {
                if self.needs(*a) {
                    let out = &self.nodes[idx].data;
                    let da: Vec<f64> = g.iter().zip(out.iter()).map(|(gi, e)| gi * e).collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Log { a } => {
                if self.needs(*a) {
                    let xs = self.data(*a);
                    let da: Vec<f64> = g.iter().zip(xs.iter()).map(|(gi, x)| gi / x).collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    self.accumulate(*a, &da);
                }
            }
            Op::Mean { a } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![g[0] / n as f64; n];
                    self.accumulate(*a, &da);
                }
            }
            Op::SoftmaxLastDim { a } => {
                if self.needs(*a) {
                    let d = *self.nodes[idx].shape.last().expect("non-empty");
                    let out = &self.nodes[idx].data;
                    let mut da = vec![0.0; out.len()];
                    for row in 0..out.len() / d {
                        let s = &out[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let dot: f64 = gr.iter().zip(s.iter()).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            da[row * d + j] = s[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                mean,
            } => {
                let d = *self.nodes[idx].shape.last().expect("non-empty");
                let rows = self.nodes[idx].data.len() / d;
                let xs = self.data(*x).to_vec();
                let gn = self.data(*gain).to_vec();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for row in 0..rows {
                        let is = inv_std[row];
                        let mu = mean[row];
                        for j in 0..d {
                            let xhat = (xs[row * d + j] - mu) * is;
                            dg[j] += g[row * d + j] * xhat;
                        }
                    }
                    self.accumulate(*gain, &dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for row in 0..rows {
                        for j in 0..d {
                            db[j] += g[row * d + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; xs.len()];
                    for row in 0..rows {
                        let is = inv_std[row];
                        let mu = mean[row];
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..d {
                            let h = g[row * d + j] * gn[j];
                            let xhat = (xs[row * d + j] - mu) * is;
                            h_mean += h;
                            hx_mean += h * xhat;
                        }
                        h_mean /= d as f64;
                        hx_mean /= d as f64;
                        for j in 0..d {
                            let h = g[row * d + j] * gn[j];
                            let xhat = (xs[row * d + j] - mu) * is;
                            dx[row * d + j] = is * (h - h_mean - xhat * hx_mean);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::AddBias { x, bias } => {
                let c = self.shape(*x)[1];
                if self.needs(*x) {
                    self.accumulate(*x, g);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::NormalizeRows { x, inv_norm } => {
                if self.needs(*x) {
                    let c = self.shape(*x)[1];
                    let out = &self.nodes[idx].data;
                    let mut dx = vec![0.0; out.len()];
                    for (row, inv) in inv_norm.iter().enumerate() {
                        let y = &out[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f64 = gr.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[row * c + j] = (gr[j] - y[j] * dot) * inv;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = self.nodes[idx].shape[1];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] = g[i * len + j];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.nodes[idx].shape[0];
                let total_c = self.nodes[idx].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] = g[i * total_c + offset + j];
                            }
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    if self.needs(p) {
                        let dp = g[offset..offset + n].to_vec();
                        self.accumulate(p, &dp);
                    }
                    offset += n;
                }
            }
            Op::BceLoss { probs, targets } => {
                if self.needs(*probs) {
                    let p = self.data(*probs);
                    let n = p.len() as f64;
                    let mut dp = vec![0.0; p.len()];
                    for (i, &pi) in p.iter().enumerate() {
                        // Clamped region contributes no gradient.
                        if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
                            let y = targets[i];
                            dp[i] = g[0] * (pi - y) / (pi * (1.0 - pi) * n);
                        }
                    }
                    self.accumulate(*probs, &dp);
                }
            }
        }
    }

    /// Gradient for one side of an elementwise binary op, handling the
    /// scalar-broadcast case by summing contributions.
    fn binary_grad(
        &mut self,
        target: NodeId,
        g: &[f64],
        local: impl Fn(f64, f64) -> f64,
        a: NodeId,
        b: NodeId,
        _idx: usize,
    ) {
        if !self.needs(target) {
            return;
        }
        let da = self.data(a);
        let db = self.data(b);
        let n = g.len();
        let t_len = self.nodes[target.0].data.len();
        let mut delta = vec![0.0; t_len];
        for i in 0..n {
            let x = if da.len() == 1 { da[0] } else { da[i] };
            let y = if db.len() == 1 { db[0] } else { db[i] };
            let contrib = g[i] * local(x, y);
            if t_len == 1 {
                delta[0] += contrib;
            } else {
                delta[i] += contrib;
            }
        }
        self.accumulate(target, &delta);
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────

/// Numerically stable logistic sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_COEF: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

// ── Finite differences ──────────────────────────────────────────────

/// Central-difference gradient of a scalar function of named parameters:
/// `(f(p+eps) - f(p-eps)) / (2 eps)` per coordinate. The independent
/// oracle used to verify every autodiff gradient in this crate.
pub fn finite_diff_grad<F, E>(
    mut f: F,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> std::result::Result<f64, E>,
    E: std::fmt::Display,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!(
            "finite_diff_grad requires eps > 0, got {eps}"
        )));
    }
    let mut eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let v = f(p).map_err(|e| TensorError::Domain {
            op: "finite_diff_grad",
            msg: e.to_string(),
        })?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        Ok(v)
    };
    let mut grads = BTreeMap::new();
    let mut work = params.clone();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let numel = params[&name].numel();
        let mut g = vec![0.0; numel];
        for i in 0..numel {
            let orig = params[&name].data()[i];
            work.get_mut(&name).expect("known key").data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(&name).expect("known key").data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(&name).expect("known key").data_mut()[i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.insert(name, g);
    }
    Ok(grads)
}

/// Relative error with a floor on the denominator, so gradients near zero
/// are compared absolutely against `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(floor))
}

/// Maximum [`rel_err`] over two gradient maps with identical keys/shapes.
pub fn max_grad_rel_err(
    autodiff: &BTreeMap<String, Vec<f64>>,
    finite: &BTreeMap<String, Vec<f64>>,
    floor: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, ad) in autodiff {
        if let Some(fd) = finite.get(name) {
            for (a, f) in ad.iter().zip(fd.iter()) {
                worst = worst.max(rel_err(*a, *f, floor));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        // Hand oracle: [1,2]·[3,4]ᵀ = 1*3 + 2*4 = 11.
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(out), &[1, 1]);
        assert_eq!(tape.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| {
                let data: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                t(&[4, 4], &data)
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let mut tape = Tape::new();
            let (ai, bi, ci) = (tape.leaf(&a), tape.leaf(&b), tape.leaf(&c));
            let ab = tape.matmul(ai, bi).unwrap();
            let ab_c = tape.matmul(ab, ci).unwrap();
            let bc = tape.matmul(bi, ci).unwrap();
            let a_bc = tape.matmul(ai, bc).unwrap();
            for (x, y) in tape.data(ab_c).iter().zip(tape.data(a_bc)) {
                assert!((x - y).abs() < 1e-9, "associativity violated: {x} vs {y}");
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 3.0, -700.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.data(s)[0], 0.5);
        assert!((tape.data(s)[1] - 0.9525741268224334).abs() < 1e-15);
        assert!(tape.data(s)[2] > 0.0); // stable in the far-negative tail
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[0.0]));
        assert!(matches!(
            tape.log(x),
            Err(TensorError::Domain { op: "log", .. })
        ));
    }

    #[test]
    fn exp_overflow_is_hard_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn scalar_broadcast_add_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.constant_scalar(10.0).unwrap();
        let out = tape.add(a, s).unwrap();
        assert_eq!(tape.data(out), &[11.0, 12.0, 13.0, 14.0]);

        let b = tape.leaf(&t(&[3], &[0.0; 3]));
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_row_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        for v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let y = tape.leaf(&t(&[4, 6], &data));
        let sy = tape.softmax_lastdim(y).unwrap();
        for row in 0..4 {
            let r = &tape.data(sy)[row * 6..(row + 1) * 6];
            assert!(r.iter().all(|&v| v > 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_and_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.data(s), &[10.0]);
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.data(m), &[2.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[5.0, 5.0, 5.0]));
        let g = tape.leaf(&t(&[3], &[1.0, 1.0, 1.0]));
        let b = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let out = tape.layer_norm_lastdim(x, g, b, 1e-5).unwrap();
        for v in tape.data(out) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4, 8], &data));
        let g = tape.leaf(&t(&[8], &[1.0; 8]));
        let b = tape.leaf(&t(&[8], &[0.0; 8]));
        let out = tape.layer_norm_lastdim(x, g, b, 1e-12).unwrap();
        for row in 0..4 {
            let r = &tape.data(out)[row * 8..(row + 1) * 8];
            let mu = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-9, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-9, "row var {var}");
        }
    }

    #[test]
    fn backward_square_and_sigmoid() {
        // d/dx sum(x*x) = 2x = 6 at x = 3.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        // σ'(0) = 1/4.
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1], &[0.0]).with_requires_grad(true));
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn backward_runs_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_requires_grad(true));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_requires_grad(true));
        let orphan = tape.leaf(&t(&[3], &[1.0, 1.0, 1.0]).with_requires_grad(true));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(orphan).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1, 1], &[0.5]));
        let y = t(&[1, 1], &[1.0]);
        let loss = tape.bce_loss(p, &y).unwrap();
        assert!((tape.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Mean of two equal ln 2 terms.
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1, 2], &[0.5, 0.5]));
        let y = t(&[1, 2], &[1.0, 0.0]);
        let loss = tape.bce_loss(p, &y).unwrap();
        assert!((tape.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Saturated probabilities stay finite through the clamp.
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1, 2], &[0.0, 1.0]));
        let y = t(&[1, 2], &[1.0, 0.0]);
        let loss = tape.bce_loss(p, &y).unwrap();
        assert!(tape.data(loss)[0].is_finite());

        // Near-perfect prediction is ~1e-7 after clamping.
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1, 1], &[1.0 - 1e-7]));
        let y = t(&[1, 1], &[1.0]);
        let loss = tape.bce_loss(p, &y).unwrap();
        assert!((tape.data(loss)[0] - 1e-7).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1], &[0.5]));
        let y = t(&[1], &[0.5]);
        assert!(tape.bce_loss(p, &y).is_err());
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), t(&[1], &[3.0]));
        let g = finite_diff_grad(
            |p: &BTreeMap<String, Tensor>| -> std::result::Result<f64, String> {
                let x = p["x"].data()[0];
                Ok(x * x)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!((g["x"][0] - 6.0).abs() < 1e-6);

        let g = finite_diff_grad(
            |_p: &BTreeMap<String, Tensor>| -> std::result::Result<f64, String> { Ok(42.0) },
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(g["x"][0], 0.0);
    }

    #[test]
    fn finite_diff_rejects_bad_eps_and_non_finite() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), t(&[1], &[1.0]));
        assert!(finite_diff_grad(
            |_: &BTreeMap<String, Tensor>| -> std::result::Result<f64, String> { Ok(0.0) },
            &params,
            0.0
        )
        .is_err());
        assert!(matches!(
            finite_diff_grad(
                |_: &BTreeMap<String, Tensor>| -> std::result::Result<f64, String> {
                    Ok(f64::NAN)
                },
                &params,
                1e-5
            ),
            Err(TensorError::NonFinite { .. })
        ));
    }

    /// Builds a small randomized computation exercising one op, returns the
    /// scalar loss for the given parameter map.
    fn op_pipeline(op: &str, params: &BTreeMap<String, Tensor>) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(&params["a"]);
        let out = match op {
            "matmul" => {
                let b = tape.leaf(&params["b"]);
                tape.matmul(a, b)?
            }
            "transpose" => {
                let tr = tape.transpose(a)?;
                let b = tape.leaf(&params["b"]);
                tape.matmul(tr, b)?
            }
            "add" => {
                let b = tape.leaf(&params["b"]);
                tape.add(a, b)?
            }
            "sub" => {
                let b = tape.leaf(&params["b"]);
                tape.sub(a, b)?
            }
            "mul" => {
                let b = tape.leaf(&params["b"]);
                tape.mul(a, b)?
            }
            "add_scalar" => {
                let b = tape.leaf(&params["s"]);
                tape.add(a, b)?
            }
            "mul_scalar" => {
                let b = tape.leaf(&params["s"]);
                tape.mul(b, a)?
            }
            "sigmoid" => tape.sigmoid(a)?,
            "gelu" => tape.gelu(a)?,
            "exp" => tape.exp(a)?,
            "log" => {
                // Shift into the positive domain.
                let c = tape.constant_scalar(3.0)?;
                let shifted = tape.add(a, c)?;
                tape.log(shifted)?
            }
            "softmax" => tape.softmax_lastdim(a)?,
            "layer_norm" => {
                let g = tape.leaf(&params["g"]);
                let b = tape.leaf(&params["bv"]);
                tape.layer_norm_lastdim(a, g, b, 1e-5)?
            }
            "add_bias" => {
                let b = tape.leaf(&params["bv"]);
                tape.add_bias(a, b)?
            }
            "normalize_rows" => tape.normalize_rows(a)?,
            "slice_concat" => {
                let left = tape.slice_cols(a, 0, 2)?;
                let right = tape.slice_cols(a, 2, 2)?;
                let cols = tape.concat_cols(&[right, left])?;
                let rows = tape.concat_rows(&[cols, cols])?;
                rows
            }
            "bce" => {
                let s = tape.sigmoid(a)?;
                let targets = Tensor::new(
                    params["a"].shape().to_vec(),
                    params["a"]
                        .data()
                        .iter()
                        .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                )?;
                tape.bce_loss(s, &targets)?
            }
            "mean" => tape.mean(a)?,
            other => panic!("unknown op {other}"),
        };
        // Make the loss nonlinear in the output so gradients are nontrivial.
        let sq = tape.mul(out, out)?;
        let loss = tape.mean(sq)?;
        Ok(tape.data(loss)[0])
    }

    fn op_autodiff(op: &str, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<f64>> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        let mut tracked = params.clone();
        for (k, v) in tracked.iter_mut() {
            v.set_requires_grad(true);
            ids.insert(k.clone(), ());
        }
        // Re-run the pipeline with tracked leaves by substituting the map.
        let mut leaf_ids = BTreeMap::new();
        for (k, v) in tracked.iter() {
            leaf_ids.insert(k.clone(), tape.leaf(v));
        }
        let a = leaf_ids["a"];
        let out = match op {
            "matmul" => tape.matmul(a, leaf_ids["b"]).unwrap(),
            "transpose" => {
                let tr = tape.transpose(a).unwrap();
                tape.matmul(tr, leaf_ids["b"]).unwrap()
            }
            "add" => tape.add(a, leaf_ids["b"]).unwrap(),
            "sub" => tape.sub(a, leaf_ids["b"]).unwrap(),
            "mul" => tape.mul(a, leaf_ids["b"]).unwrap(),
            "add_scalar" => tape.add(a, leaf_ids["s"]).unwrap(),
            "mul_scalar" => tape.mul(leaf_ids["s"], a).unwrap(),
            "sigmoid" => tape.sigmoid(a).unwrap(),
            "gelu" => tape.gelu(a).unwrap(),
            "exp" => tape.exp(a).unwrap(),
            "log" => {
                let c = tape.constant_scalar(3.0).unwrap();
                let shifted = tape.add(a, c).unwrap();
                tape.log(shifted).unwrap()
            }
            "softmax" => tape.softmax_lastdim(a).unwrap(),
            "layer_norm" => tape
                .layer_norm_lastdim(a, leaf_ids["g"], leaf_ids["bv"], 1e-5)
                .unwrap(),
            "add_bias" => tape.add_bias(a, leaf_ids["bv"]).unwrap(),
            "normalize_rows" => tape.normalize_rows(a).unwrap(),
            "slice_concat" => {
                let left = tape.slice_cols(a, 0, 2).unwrap();
                let right = tape.slice_cols(a, 2, 2).unwrap();
                let cols = tape.concat_cols(&[right, left]).unwrap();
                tape.concat_rows(&[cols, cols]).unwrap()
            }
            "bce" => {
                let s = tape.sigmoid(a).unwrap();
                let targets = Tensor::new(
                    params["a"].shape().to_vec(),
                    params["a"]
                        .data()
                        .iter()
                        .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                tape.bce_loss(s, &targets).unwrap()
            }
            "mean" => tape.mean(a).unwrap(),
            other => panic!("unknown op {other}"),
        };
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = BTreeMap::new();
        for (k, id) in leaf_ids {
            grads.insert(k, tape.grad(id).unwrap().to_vec());
        }
        grads
    }

    /// Every differentiable op matches the central-difference oracle with
    /// relative error ≤ 1e-4 on ≥100 seeded random inputs in [-2, 2].
    #[test]
    fn all_ops_match_finite_differences() {
        let ops = [
            "matmul",
            "transpose",
            "add",
            "sub",
            "mul",
            "add_scalar",
            "mul_scalar",
            "sigmoid",
            "gelu",
            "exp",
            "log",
            "softmax",
            "layer_norm",
            "add_bias",
            "normalize_rows",
            "slice_concat",
            "bce",
            "mean",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut cases = 0;
        for &op in &ops {
            for _ in 0..8 {
                let mut params = BTreeMap::new();
                let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                    t(shape, &data)
                };
                params.insert("a".to_string(), rand_t(&mut rng, &[3, 4]));
                params.insert(
                    "b".to_string(),
                    match op {
                        "matmul" => rand_t(&mut rng, &[4, 2]),
                        "transpose" => rand_t(&mut rng, &[3, 2]),
                        _ => rand_t(&mut rng, &[3, 4]),
                    },
                );
                params.insert("s".to_string(), rand_t(&mut rng, &[1]));
                params.insert("g".to_string(), rand_t(&mut rng, &[4]));
                params.insert("bv".to_string(), rand_t(&mut rng, &[4]));
                let ad = op_autodiff(op, &params);
                let fd = finite_diff_grad(
                    |p: &BTreeMap<String, Tensor>| op_pipeline(op, p),
                    &params,
                    1e-5,
                )
                .unwrap();
                let err = max_grad_rel_err(&ad, &fd, 1e-4);
                assert!(err <= 1e-4, "op {op}: max rel err {err}");
                cases += 1;
            }
        }
        assert!(cases >= 100, "only {cases} gradient cases ran");
    }

    /// A random two-layer MLP gradient-checks against finite differences.
    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            t(shape, &data)
        };
        let mut params = BTreeMap::new();
        params.insert("w1".to_string(), rand_t(&mut rng, &[5, 7]));
        params.insert("b1".to_string(), rand_t(&mut rng, &[7]));
        params.insert("w2".to_string(), rand_t(&mut rng, &[7, 3]));
        params.insert("b2".to_string(), rand_t(&mut rng, &[3]));
        let input = rand_t(&mut rng, &[2, 5]);

        let run = |p: &BTreeMap<String, Tensor>, track: bool| -> (f64, BTreeMap<String, Vec<f64>>) {
            let mut tape = Tape::new();
            let mut tracked = p.clone();
            if track {
                for v in tracked.values_mut() {
                    v.set_requires_grad(true);
                }
            }
            let x = tape.leaf(&input);
            let w1 = tape.leaf(&tracked["w1"]);
            let b1 = tape.leaf(&tracked["b1"]);
            let w2 = tape.leaf(&tracked["w2"]);
            let b2 = tape.leaf(&tracked["b2"]);
            let h = tape.matmul(x, w1).unwrap();
            let h = tape.add_bias(h, b1).unwrap();
            let h = tape.gelu(h).unwrap();
            let o = tape.matmul(h, w2).unwrap();
            let o = tape.add_bias(o, b2).unwrap();
            let s = tape.sigmoid(o).unwrap();
            let loss = tape.mean(s).unwrap();
            let v = tape.data(loss)[0];
            let mut grads = BTreeMap::new();
            if track {
                tape.backward(loss).unwrap();
                for (name, id) in [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)] {
                    grads.insert(name.to_string(), tape.grad(id).unwrap().to_vec());
                }
            }
            (v, grads)
        };
        let (_, ad) = run(&params, true);
        let fd = finite_diff_grad(
            |p: &BTreeMap<String, Tensor>| -> Result<f64> { Ok(run(p, false).0) },
            &params,
            1e-5,
        )
        .unwrap();
        let err = max_grad_rel_err(&ad, &fd, 1e-4);
        assert!(err <= 1e-4, "mlp max rel err {err}");
    }

    /// Two identical forward+backward passes are bitwise identical.
    #[test]
    fn forward_backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let data: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let x = t(&[3, 4], &data).with_requires_grad(true);
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let s = tape.softmax_lastdim(xi).unwrap();
            let e = tape.gelu(s).unwrap();
            let loss = tape.sum(e).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.data(loss).to_vec(),
                tape.grad(xi).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1[0].to_bits(), v2[0].to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
