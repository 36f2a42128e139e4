//! The node arena behind a [`ComputationRecord`](super::ComputationRecord).
//!
//! Every operation — including the ones emitted *by* the backward pass — is a
//! `Node` in one flat `Vec`, evaluated eagerly at record time. Gradients of
//! gradients need no special machinery: a backward pass appends ordinary
//! primitives, so a second `gradient` call can walk straight through them.

use std::sync::Arc;

use super::kernels as k;
use super::storage::{Scalar, Storage};
use super::Precision;

/// Primitive operations. Attributes hold what the kernel needs beyond the
/// input values; anything derivable from input/output shapes is not stored.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// External value (parameter, input batch, constant, detached copy).
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul { c: f64 },
    ScalarAdd { c: f64 },
    Matmul { trans_a: bool, trans_b: bool },
    Conv2d { pad: usize },
    /// Cotangent of the conv input; `(dy, w) -> dx`.
    ConvBwdInput { pad: usize },
    /// Cotangent of the conv weight; `(x, dy) -> dw`.
    ConvBwdWeight { pad: usize },
    /// slope 0 is plain relu.
    LeakyRelu { slope: f64 },
    /// `(g, sign_ref) -> g or slope*g` per element: the relu cotangent rule.
    /// Only the first input is differentiable; the sign reference contributes
    /// a derivative of zero almost everywhere.
    MaskedBySign { slope: f64 },
    /// 2x2/stride-2 max pool; winning flat indices are kept as node aux.
    MaxPool2d,
    /// Scatter a pooled cotangent back through the argmax of node `pool`.
    Unpool { pool: usize },
    /// Read back out through the argmax of node `pool` (adjoint of Unpool).
    GatherIdx { pool: usize },
    ChannelSum,
    ChannelDot,
    ChannelScale,
    ChannelAdd,
    ChannelBroadcast,
    /// Per-row max over the last axis, treated as a non-differentiable
    /// constant. Its only use is the log-sum-exp shift, where the result is
    /// exactly invariant to the shift value, so a zero derivative is not an
    /// approximation.
    RowMax,
    RowSum,
    RowBroadcast { n: usize },
    GatherLabels { labels: Arc<Vec<u32>> },
    ScatterLabels { labels: Arc<Vec<u32>>, n: usize },
    Exp,
    Log,
    Recip,
    Rsqrt,
    SumAll,
    /// Fill the node's own shape with a scalar input.
    ScalarBroadcast,
    Reshape,
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
    pub value: Storage,
    pub requires_grad: bool,
    /// MaxPool2d argmax indices; referenced by Unpool/GatherIdx via node id.
    pub aux: Option<Arc<Vec<u32>>>,
}

impl Node {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) struct GraphInner {
    pub mode: Precision,
    pub nodes: Vec<Node>,
}

impl GraphInner {
    pub fn new(mode: Precision) -> Self {
        GraphInner { mode, nodes: Vec::new() }
    }

    /// Append a node: evaluate it against current values, then store it.
    /// Callers have already validated shapes; this is the trusted layer.
    pub fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>) -> usize {
        let requires_grad = match &op {
            Op::Leaf => false, // leaves with grad are pushed via push_leaf
            Op::RowMax => false,
            Op::MaskedBySign { .. } | Op::Unpool { .. } | Op::GatherIdx { .. } => {
                self.nodes[inputs[0]].requires_grad
            }
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        let (value, aux) = eval(self.mode, &self.nodes, &op, &inputs, &shape);
        self.nodes.push(Node { op, inputs, shape, value, requires_grad, aux });
        self.nodes.len() - 1
    }

    pub fn push_leaf(&mut self, value: Storage, shape: Vec<usize>, requires_grad: bool) -> usize {
        debug_assert_eq!(value.precision(), self.mode);
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            value,
            requires_grad,
            aux: None,
        });
        self.nodes.len() - 1
    }

    /// Drop nodes from `len` on. Only used by the non-differentiable gradient
    /// path, which extracts its results before truncating, so no surviving
    /// node can reference a dropped id.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Re-execute every non-leaf node and report the first value that fails
    /// to reproduce bit-for-bit.
    pub fn replay_check(&self) -> Option<usize> {
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, _) = eval(self.mode, &self.nodes, &node.op, &node.inputs, &node.shape);
            if !bitwise_eq(&value, &node.value) {
                return Some(id);
            }
        }
        None
    }
}

fn bitwise_eq(a: &Storage, b: &Storage) -> bool {
    match (a, b) {
        (Storage::F32(x), Storage::F32(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        (Storage::F64(x), Storage::F64(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => false,
    }
}

/// Evaluate one op. Record and replay share this path, which is what makes
/// the replay guarantee checkable at all.
fn eval(
    mode: Precision,
    nodes: &[Node],
    op: &Op,
    inputs: &[usize],
    out_shape: &[usize],
) -> (Storage, Option<Arc<Vec<u32>>>) {
    match mode {
        Precision::F32 => eval_typed::<f32>(nodes, op, inputs, out_shape),
        Precision::F64 => eval_typed::<f64>(nodes, op, inputs, out_shape),
    }
}

fn eval_typed<T: Scalar>(
    nodes: &[Node],
    op: &Op,
    inputs: &[usize],
    out_shape: &[usize],
) -> (Storage, Option<Arc<Vec<u32>>>) {
    let arg = |i: usize| T::slice(&nodes[inputs[i]].value);
    let shape_of = |i: usize| nodes[inputs[i]].shape.as_slice();
    let last_dim = |i: usize| *shape_of(i).last().expect("ranked operand");

    let value: Vec<T> = match op {
        Op::Leaf => unreachable!("leaves are pushed with their value"),
        Op::Add => k::map2(arg(0), arg(1), |a, b| a + b),
        Op::Sub => k::map2(arg(0), arg(1), |a, b| a - b),
        Op::Mul => k::map2(arg(0), arg(1), |a, b| a * b),
        Op::ScalarMul { c } => {
            let c = T::from_f64(*c);
            k::map1(arg(0), |v| v * c)
        }
        Op::ScalarAdd { c } => {
            let c = T::from_f64(*c);
            k::map1(arg(0), |v| v + c)
        }
        Op::Matmul { trans_a, trans_b } => {
            let (sa, sb) = (shape_of(0), shape_of(1));
            let m = if *trans_a { sa[1] } else { sa[0] };
            let kk = if *trans_a { sa[0] } else { sa[1] };
            let n = if *trans_b { sb[0] } else { sb[1] };
            k::matmul(arg(0), arg(1), m, kk, n, *trans_a, *trans_b)
        }
        Op::Conv2d { pad } => {
            let (sx, sw) = (shape_of(0), shape_of(1));
            k::conv2d(arg(0), arg(1), sx[0], sx[1], sx[2], sx[3], sw[0], sw[1], sw[3], *pad)
        }
        Op::ConvBwdInput { pad } => {
            let sw = shape_of(1);
            // out_shape is the original conv input shape
            k::conv2d_bwd_input(
                arg(0),
                arg(1),
                out_shape[0],
                out_shape[1],
                out_shape[2],
                out_shape[3],
                sw[0],
                sw[1],
                sw[3],
                *pad,
            )
        }
        Op::ConvBwdWeight { pad } => {
            let sx = shape_of(0);
            k::conv2d_bwd_weight(
                arg(0),
                arg(1),
                sx[0],
                sx[1],
                sx[2],
                sx[3],
                out_shape[0],
                out_shape[1],
                out_shape[3],
                *pad,
            )
        }
        Op::LeakyRelu { slope } => k::leaky_relu(arg(0), T::from_f64(*slope)),
        Op::MaskedBySign { slope } => k::masked_by_sign(arg(0), arg(1), T::from_f64(*slope)),
        Op::MaxPool2d => {
            let s = shape_of(0);
            let (y, idx) = k::max_pool2d(arg(0), s[0], s[1], s[2], s[3]);
            return (T::storage_from_vec(y), Some(Arc::new(idx)));
        }
        Op::Unpool { pool } => {
            let idx = nodes[*pool].aux.as_ref().expect("pool node keeps its argmax");
            k::unpool(arg(0), idx, out_shape.iter().product())
        }
        Op::GatherIdx { pool } => {
            let idx = nodes[*pool].aux.as_ref().expect("pool node keeps its argmax");
            k::gather_idx(arg(0), idx)
        }
        Op::ChannelSum => k::channel_sum(arg(0), last_dim(0)),
        Op::ChannelDot => k::channel_dot(arg(0), arg(1), last_dim(0)),
        Op::ChannelScale => k::channel_scale(arg(0), arg(1)),
        Op::ChannelAdd => k::channel_add(arg(0), arg(1)),
        Op::ChannelBroadcast => {
            let rows = out_shape.iter().product::<usize>() / last_dim(0).max(1);
            k::channel_broadcast(arg(0), rows)
        }
        Op::RowMax => k::row_max(arg(0), last_dim(0)),
        Op::RowSum => k::row_sum(arg(0), last_dim(0)),
        Op::RowBroadcast { n } => k::row_broadcast(arg(0), *n),
        Op::GatherLabels { labels } => k::gather_labels(arg(0), last_dim(0), labels),
        Op::ScatterLabels { labels, n } => k::scatter_labels(arg(0), *n, labels),
        Op::Exp => k::map1(arg(0), |v| v.exp()),
        Op::Log => k::map1(arg(0), |v| v.ln()),
        Op::Recip => k::map1(arg(0), |v| T::one() / v),
        Op::Rsqrt => k::map1(arg(0), |v| T::one() / v.sqrt()),
        Op::SumAll => vec![k::sum_all(arg(0))],
        Op::ScalarBroadcast => {
            let v = arg(0)[0];
            vec![v; out_shape.iter().product()]
        }
        Op::Reshape => arg(0).to_vec(),
    };
    (T::storage_from_vec(value), None)
}
