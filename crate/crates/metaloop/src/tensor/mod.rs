//! Reverse-mode autodiff on an explicit, replayable computation record.
//!
//! A [`ComputationRecord`] is a flat arena of eagerly-evaluated nodes; a
//! [`Tensor`] is a cheap handle (record + node id). The design constraint
//! that shapes everything here: [`gradient`] with `differentiable = true`
//! emits the backward pass *as ordinary recorded primitives*, so meta-updates
//! built from those gradients can be differentiated again by simply calling
//! [`gradient`] a second time. No tape-of-tapes, no special higher-order
//! types.
//!
//! Records are single-threaded by construction (`Rc` inside); concurrent
//! episode adaptation uses one record per episode and merges results outside.
//! Values are dense row-major buffers, rank 0–4. Image batches follow the
//! channels-last `[B, H, W, C]` convention; the only broadcasts are the ones
//! an op implies (per-channel affine, per-row shift, scalar ops).

mod archive;
mod autodiff;
mod graph;
mod kernels;
mod storage;

pub use archive::{read_tensor, read_tensor_from, write_tensor, write_tensor_to};
pub use autodiff::gradient;
pub use storage::Storage;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use graph::{GraphInner, Op};

/// Element precision of a whole record. f32 is the working precision;
/// f64 exists so gradient checks can run below f32 noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: operands belong to different computation records")]
    RecordMismatch { op: &'static str },
    #[error("{op}: precision mismatch (record is {record:?}, value is {value:?})")]
    PrecisionMismatch { op: &'static str, record: Precision, value: Precision },
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("gradient: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("replay diverged at node {node}: recomputed value is not bit-identical")]
    ReplayMismatch { node: usize },
    #[error("tensor archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── host arrays ──

/// Plain host-side value: shape plus flat row-major data. This is what
/// crosses record boundaries (parameters, batches, extracted gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Storage,
}

impl Array {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Array {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Array { shape, data: Storage::F32(data) }
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Array {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Array { shape, data: Storage::F64(data) }
    }

    /// Values given as f64, stored at `precision` (narrowing for f32).
    pub fn from_f64_values(precision: Precision, shape: Vec<usize>, values: &[f64]) -> Array {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/data length mismatch");
        Array { shape, data: Storage::from_f64_slice(precision, values) }
    }

    pub fn zeros(precision: Precision, shape: Vec<usize>) -> Array {
        let len = shape.iter().product();
        Array { shape, data: Storage::zeros(precision, len) }
    }

    pub fn scalar(precision: Precision, value: f64) -> Array {
        Array::from_f64_values(precision, vec![], &[value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.data.precision()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    /// Single-element arrays read back as f64.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar_value on non-scalar array");
        self.to_f64_vec()[0]
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }

    pub(crate) fn storage(&self) -> &Storage {
        &self.data
    }

    pub(crate) fn from_storage(shape: Vec<usize>, data: Storage) -> Array {
        Array { shape, data }
    }

    /// Reinterpret under a new shape with identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Array {
        assert_eq!(shape.iter().product::<usize>(), self.len(), "reshape changes element count");
        self.shape = shape;
        self
    }

    /// Convert to the other precision (f64→f32 narrows).
    pub fn cast(&self, precision: Precision) -> Array {
        if self.precision() == precision {
            return self.clone();
        }
        Array::from_f64_values(precision, self.shape.clone(), &self.to_f64_vec())
    }
}

// ── the record and tensor handles ──

/// A single-precision, single-threaded arena of evaluated primitives.
/// Cloning shares the arena; `Tensor`s are ids into it.
#[derive(Clone)]
pub struct ComputationRecord {
    inner: Rc<RefCell<GraphInner>>,
}

impl ComputationRecord {
    pub fn new(precision: Precision) -> ComputationRecord {
        ComputationRecord { inner: Rc::new(RefCell::new(GraphInner::new(precision))) }
    }

    pub fn precision(&self) -> Precision {
        self.inner.borrow().mode
    }

    /// Number of recorded nodes (monotone while the record lives).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert an external value. `requires_grad` marks it as a gradient
    /// target; everything derived from it inherits the flag.
    pub fn leaf(&self, value: &Array, requires_grad: bool) -> Result<Tensor> {
        if value.precision() != self.precision() {
            return Err(TensorError::PrecisionMismatch {
                op: "leaf",
                record: self.precision(),
                value: value.precision(),
            });
        }
        if value.shape().len() > 4 {
            return Err(TensorError::InvalidArgument {
                op: "leaf",
                detail: format!("rank {} exceeds the supported maximum of 4", value.shape().len()),
            });
        }
        let id = self.inner.borrow_mut().push_leaf(
            value.storage().clone(),
            value.shape().to_vec(),
            requires_grad,
        );
        Ok(Tensor { rec: self.clone(), id })
    }

    /// Convenience: a non-differentiable leaf.
    pub fn constant(&self, value: &Array) -> Result<Tensor> {
        self.leaf(value, false)
    }

    /// Re-execute every recorded primitive and verify each output reproduces
    /// bit-for-bit. The record *is* the experiment log: if this fails, some
    /// kernel is nondeterministic and no downstream result can be trusted.
    pub fn replay(&self) -> Result<()> {
        match self.inner.borrow().replay_check() {
            None => Ok(()),
            Some(node) => Err(TensorError::ReplayMismatch { node }),
        }
    }

    pub(crate) fn same_as(&self, other: &ComputationRecord) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn with_inner<R>(&self, f: impl FnOnce(&GraphInner) -> R) -> R {
        f(&self.inner.borrow())
    }

    pub(crate) fn with_inner_mut<R>(&self, f: impl FnOnce(&mut GraphInner) -> R) -> R {
        f(&mut self.inner.borrow_mut())
    }
}

/// Handle to one node of a [`ComputationRecord`].
#[derive(Clone)]
pub struct Tensor {
    rec: ComputationRecord,
    id: usize,
}

impl Tensor {
    pub fn record(&self) -> &ComputationRecord {
        &self.rec
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.rec.with_inner(|g| g.nodes[self.id].shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.rec.with_inner(|g| g.nodes[self.id].numel())
    }

    pub fn requires_grad(&self) -> bool {
        self.rec.with_inner(|g| g.nodes[self.id].requires_grad)
    }

    /// Copy the node's current value out of the record.
    pub fn value(&self) -> Array {
        self.rec.with_inner(|g| {
            Array::from_storage(g.nodes[self.id].shape.clone(), g.nodes[self.id].value.clone())
        })
    }

    /// Single-element tensors read back as f64.
    pub fn scalar_value(&self) -> f64 {
        self.value().scalar_value()
    }

    /// A constant leaf carrying this tensor's current value: same numbers,
    /// no history, so no gradient flows through it.
    pub fn detach(&self) -> Tensor {
        let v = self.value();
        self.rec.leaf(&v, false).expect("detach reinserts a value the record produced")
    }

    // ── op plumbing ──

    fn push(&self, op: Op, inputs: Vec<usize>, shape: Vec<usize>) -> Tensor {
        let id = self.rec.with_inner_mut(|g| g.push(op, inputs, shape));
        Tensor { rec: self.rec.clone(), id }
    }

    fn check_same_record(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.rec.same_as(&other.rec) {
            Ok(())
        } else {
            Err(TensorError::RecordMismatch { op })
        }
    }

    fn binary_same_shape(&self, other: &Tensor, op: &'static str, node: Op) -> Result<Tensor> {
        self.check_same_record(other, op)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("operand shapes {sa:?} and {sb:?} differ"),
            });
        }
        Ok(self.push(node, vec![self.id, other.id], sa))
    }

    // ── arithmetic ──

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "add", Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "sub", Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "mul", Op::Mul)
    }

    /// Skip connection: elementwise sum of two same-shape maps.
    pub fn residual_add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "residual_add", Op::Add)
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        self.push(Op::ScalarMul { c }, vec![self.id], self.shape())
    }

    pub fn scalar_add(&self, c: f64) -> Tensor {
        self.push(Op::ScalarAdd { c }, vec![self.id], self.shape())
    }

    pub fn exp(&self) -> Tensor {
        self.push(Op::Exp, vec![self.id], self.shape())
    }

    pub fn log(&self) -> Tensor {
        self.push(Op::Log, vec![self.id], self.shape())
    }

    pub fn recip(&self) -> Tensor {
        self.push(Op::Recip, vec![self.id], self.shape())
    }

    pub fn rsqrt(&self) -> Tensor {
        self.push(Op::Rsqrt, vec![self.id], self.shape())
    }

    // ── linear algebra ──

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_flags(other, false, false)
    }

    /// Matmul with transposition folded into gemm strides. The backward
    /// rules use this directly, which keeps transposes out of the record.
    pub fn matmul_flags(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        self.check_same_record(other, "matmul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("expected rank-2 operands, got {sa:?} and {sb:?}"),
            });
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "inner dimensions differ: {sa:?} (trans {trans_a}) vs {sb:?} (trans {trans_b})"
                ),
            });
        }
        Ok(self.push(Op::Matmul { trans_a, trans_b }, vec![self.id, other.id], vec![m, n]))
    }

    // ── convolution ──

    /// Stride-1 convolution of a `[B,H,W,Cin]` batch with `[kh,kw,Cin,Cout]`
    /// weights. Padding 0 or 1 only.
    pub fn conv2d(&self, weight: &Tensor, padding: usize) -> Result<Tensor> {
        self.check_same_record(weight, "conv2d")?;
        if padding > 1 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("padding {padding} unsupported (only 0 and 1)"),
            });
        }
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected [B,H,W,C] input and [kh,kw,Cin,Cout] weight, got {sx:?} and {sw:?}"),
            });
        }
        if sx[3] != sw[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} != weight Cin {}", sx[3], sw[2]),
            });
        }
        let (kh, kw) = (sw[0], sw[1]);
        if sx[1] + 2 * padding + 1 <= kh || sx[2] + 2 * padding + 1 <= kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {sx:?}"),
            });
        }
        let oh = kernels::conv_out_dim(sx[1], kh, padding);
        let ow = kernels::conv_out_dim(sx[2], kw, padding);
        Ok(self.push(
            Op::Conv2d { pad: padding },
            vec![self.id, weight.id],
            vec![sx[0], oh, ow, sw[3]],
        ))
    }

    pub(crate) fn conv2d_bwd_input(
        &self,
        weight: &Tensor,
        pad: usize,
        input_shape: Vec<usize>,
    ) -> Tensor {
        self.push(Op::ConvBwdInput { pad }, vec![self.id, weight.id], input_shape)
    }

    pub(crate) fn conv2d_bwd_weight(
        &self,
        grad_out: &Tensor,
        pad: usize,
        weight_shape: Vec<usize>,
    ) -> Tensor {
        self.push(Op::ConvBwdWeight { pad }, vec![self.id, grad_out.id], weight_shape)
    }

    // ── nonlinearities and pooling ──

    pub fn relu(&self) -> Tensor {
        self.push(Op::LeakyRelu { slope: 0.0 }, vec![self.id], self.shape())
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.push(Op::LeakyRelu { slope }, vec![self.id], self.shape())
    }

    pub(crate) fn masked_by_sign(&self, sign_ref: &Tensor, slope: f64) -> Tensor {
        self.push(Op::MaskedBySign { slope }, vec![self.id, sign_ref.id], self.shape())
    }

    /// 2x2 max pool, stride 2, floor semantics on odd extents.
    pub fn max_pool2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2d",
                detail: format!("expected [B,H,W,C], got {s:?}"),
            });
        }
        if s[1] < 2 || s[2] < 2 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                detail: format!("spatial extent {}x{} too small for a 2x2 window", s[1], s[2]),
            });
        }
        Ok(self.push(Op::MaxPool2d, vec![self.id], vec![s[0], s[1] / 2, s[2] / 2, s[3]]))
    }

    pub(crate) fn unpool(&self, pool: &Tensor, input_shape: Vec<usize>) -> Tensor {
        self.push(Op::Unpool { pool: pool.id }, vec![self.id], input_shape)
    }

    pub(crate) fn gather_pool_idx(&self, pool: &Tensor, out_shape: Vec<usize>) -> Tensor {
        self.push(Op::GatherIdx { pool: pool.id }, vec![self.id], out_shape)
    }

    // ── channel (last axis) helpers ──

    pub(crate) fn channel_sum(&self) -> Tensor {
        let c = *self.shape().last().expect("ranked operand");
        self.push(Op::ChannelSum, vec![self.id], vec![c])
    }

    pub(crate) fn channel_dot(&self, other: &Tensor) -> Tensor {
        let c = *self.shape().last().expect("ranked operand");
        self.push(Op::ChannelDot, vec![self.id, other.id], vec![c])
    }

    pub(crate) fn channel_scale(&self, scale: &Tensor) -> Tensor {
        self.push(Op::ChannelScale, vec![self.id, scale.id], self.shape())
    }

    /// Broadcast add of a `[C]` vector over the last axis — bias add.
    pub fn channel_add(&self, bias: &Tensor) -> Result<Tensor> {
        self.check_same_record(bias, "channel_add")?;
        let c = *self.shape().last().unwrap_or(&0);
        if bias.shape() != vec![c] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_add",
                detail: format!("bias shape {:?} does not match last axis {c}", bias.shape()),
            });
        }
        Ok(self.push(Op::ChannelAdd, vec![self.id, bias.id], self.shape()))
    }

    pub(crate) fn channel_broadcast(&self, shape: Vec<usize>) -> Tensor {
        self.push(Op::ChannelBroadcast, vec![self.id], shape)
    }

    // ── row helpers for [B, n] logits ──

    pub(crate) fn row_max(&self) -> Tensor {
        let b = self.shape()[0];
        self.push(Op::RowMax, vec![self.id], vec![b])
    }

    pub(crate) fn row_sum(&self) -> Tensor {
        let b = self.shape()[0];
        self.push(Op::RowSum, vec![self.id], vec![b])
    }

    pub(crate) fn row_broadcast(&self, n: usize) -> Tensor {
        let b = self.shape()[0];
        self.push(Op::RowBroadcast { n }, vec![self.id], vec![b, n])
    }

    pub(crate) fn gather_labels_op(&self, labels: Arc<Vec<u32>>) -> Tensor {
        let b = self.shape()[0];
        self.push(Op::GatherLabels { labels }, vec![self.id], vec![b])
    }

    pub(crate) fn scatter_labels_op(&self, labels: Arc<Vec<u32>>, n: usize) -> Tensor {
        let b = self.shape()[0];
        self.push(Op::ScatterLabels { labels, n }, vec![self.id], vec![b, n])
    }

    // ── reductions and reshapes ──

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        self.push(Op::SumAll, vec![self.id], vec![])
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scalar_mul(1.0 / n as f64)
    }

    pub(crate) fn scalar_broadcast(&self, shape: Vec<usize>) -> Tensor {
        self.push(Op::ScalarBroadcast, vec![self.id], shape)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape()),
            });
        }
        Ok(self.push(Op::Reshape, vec![self.id], shape))
    }

    /// Collapse everything after the leading (batch) axis: `[B, ...] -> [B, rest]`.
    pub fn flatten(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                detail: format!("need at least rank 2, got {s:?}"),
            });
        }
        let rest = s[1..].iter().product();
        self.reshape(vec![s[0], rest])
    }

    // ── composite layers ──

    /// Batch normalization over the last (channel) axis using the statistics
    /// of the *current* batch — always, in both training and evaluation.
    /// Composite of recorded primitives, so second-order gradients flow
    /// through the statistics like everything else. Variance is the biased
    /// (1/N) estimate.
    pub fn batch_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.check_same_record(gamma, "batch_norm")?;
        self.check_same_record(beta, "batch_norm")?;
        let s = self.shape();
        let c = *s.last().unwrap_or(&0);
        if s.len() < 2 || c == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("expected [rows..., C] with C > 0, got {s:?}"),
            });
        }
        if gamma.shape() != vec![c] || beta.shape() != vec![c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} must both be [{c}]",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let rows = self.numel() / c;
        if s[0] < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                detail: format!("batch statistics need at least 2 samples, got {}", s[0]),
            });
        }
        if eps < 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                detail: format!("eps must be non-negative, got {eps}"),
            });
        }
        let inv_n = 1.0 / rows as f64;
        let mu = self.channel_sum().scalar_mul(inv_n);
        let centered = self.channel_add(&mu.scalar_mul(-1.0))?;
        let var = centered.channel_dot(&centered).scalar_mul(inv_n);
        let istd = var.scalar_add(eps).rsqrt();
        let scale = gamma.mul(&istd)?;
        centered.channel_scale(&scale).channel_add(beta)
    }

    /// Row-wise softmax of `[B, n]` logits.
    pub fn softmax(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                detail: format!("expected [B, n] logits, got {s:?}"),
            });
        }
        let n = s[1];
        let shifted = self.sub(&self.row_max().row_broadcast(n))?;
        let e = shifted.exp();
        let inv = e.row_sum().recip();
        e.mul(&inv.row_broadcast(n))
    }

    /// Mean cross-entropy between `[B, n]` logits and integer labels,
    /// computed through the shift-stabilized log-sum-exp. The shift is the
    /// per-row max treated as a constant, which is exact: the loss value and
    /// all its derivatives are invariant to the shift.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("expected [B, n] logits, got {s:?}"),
            });
        }
        let (b, n) = (s[0], s[1]);
        if labels.len() != b {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for a batch of {b}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {n} classes"),
            });
        }
        let labels: Arc<Vec<u32>> = Arc::new(labels.iter().map(|&l| l as u32).collect());
        let m = self.row_max();
        let shifted = self.sub(&m.row_broadcast(n))?;
        let lse = shifted.exp().row_sum().log().add(&m)?;
        let picked = self.gather_labels_op(labels);
        Ok(lse.sub(&picked)?.sum_all().scalar_mul(1.0 / b as f64))
    }

    pub(crate) fn op_of(&self) -> Op {
        self.rec.with_inner(|g| g.nodes[self.id].op.clone())
    }

    pub(crate) fn inputs_of(&self) -> Vec<usize> {
        self.rec.with_inner(|g| g.nodes[self.id].inputs.clone())
    }

    pub(crate) fn at(rec: &ComputationRecord, id: usize) -> Tensor {
        Tensor { rec: rec.clone(), id }
    }
}
