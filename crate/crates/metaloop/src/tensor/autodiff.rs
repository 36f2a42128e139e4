//! Reverse-mode differentiation over a [`ComputationRecord`].
//!
//! `gradient(loss, wrt, differentiable)` walks the record once, emitting the
//! vector-Jacobian product of every visited node *as recorded primitives*.
//! With `differentiable = true` the returned tensors therefore carry their
//! own history and can be differentiated again — that is the whole
//! second-order story. With `differentiable = false` the same rules run, the
//! numeric results are copied out, and the backward nodes are truncated away,
//! leaving constant leaves (cheaper to keep, nothing to differentiate).
//!
//! The walk is pruned to nodes that are descendants of `wrt`, ancestors of
//! the loss, and gradient-carrying. Adapting only the head of a network
//! therefore never touches the conv stack's backward rules.

use super::graph::Op;
use super::{Array, Result, Tensor, TensorError};

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// Every `wrt` tensor must live in the same record as `loss` and be marked
/// as a gradient target (`requires_grad`). A target that the loss does not
/// depend on gets a **zero tensor** of its shape — by design, so a frozen or
/// unused parameter group reports an explicit zero outer gradient rather
/// than an error.
pub fn gradient(loss: &Tensor, wrt: &[Tensor], differentiable: bool) -> Result<Vec<Tensor>> {
    let rec = loss.record().clone();
    for t in wrt {
        if !rec.same_as(t.record()) {
            return Err(TensorError::RecordMismatch { op: "gradient" });
        }
        if !t.requires_grad() {
            return Err(TensorError::InvalidArgument {
                op: "gradient",
                detail: "wrt tensor is not marked as a gradient target".into(),
            });
        }
    }
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss { shape: loss.shape() });
    }

    let loss_id = loss.id();
    let pre_len = rec.len();

    // Prune: descendants of wrt ∧ ancestors of loss ∧ gradient-carrying.
    let (desc, anc, rg) = rec.with_inner(|g| {
        let n = loss_id + 1;
        let mut desc = vec![false; n];
        for t in wrt {
            desc[t.id()] = true;
        }
        for id in 0..n {
            if !desc[id] && g.nodes[id].inputs.iter().any(|&i| desc[i]) {
                desc[id] = true;
            }
        }
        let mut anc = vec![false; n];
        anc[loss_id] = true;
        for id in (0..n).rev() {
            if anc[id] {
                for &i in &g.nodes[id].inputs {
                    anc[i] = true;
                }
            }
        }
        let rg: Vec<bool> = (0..n).map(|id| g.nodes[id].requires_grad).collect();
        (desc, anc, rg)
    });
    let needed: Vec<bool> = (0..=loss_id).map(|i| desc[i] && anc[i] && rg[i]).collect();

    // Cotangent per node, as a node id in the same record.
    let mut cot: Vec<Option<usize>> = vec![None; loss_id + 1];
    let seed = rec.leaf(&Array::scalar(rec.precision(), 1.0), false)?;
    let seed = seed.reshape(loss.shape())?;
    cot[loss_id] = Some(seed.id());

    for id in (0..=loss_id).rev() {
        if !needed[id] {
            continue;
        }
        let Some(g_id) = cot[id] else { continue };
        let g = Tensor::at(&rec, g_id);
        let node = Tensor::at(&rec, id);
        let op = node.op_of();
        let inputs = node.inputs_of();
        let input = |k: usize| Tensor::at(&rec, inputs[k]);

        // (input position, contribution) pairs for this node.
        let mut contrib: Vec<(usize, Tensor)> = Vec::with_capacity(2);
        let mut push = |pos: usize, t: Tensor| contrib.push((pos, t));

        match &op {
            Op::Leaf | Op::RowMax => {}
            Op::Add => {
                push(0, g.clone());
                push(1, g.clone());
            }
            Op::Sub => {
                push(0, g.clone());
                push(1, g.scalar_mul(-1.0));
            }
            Op::Mul => {
                push(0, g.mul(&input(1))?);
                push(1, g.mul(&input(0))?);
            }
            Op::ScalarMul { c } => push(0, g.scalar_mul(*c)),
            Op::ScalarAdd { .. } => push(0, g.clone()),
            Op::Matmul { trans_a, trans_b } => {
                let (a, b) = (input(0), input(1));
                let da = if !trans_a {
                    g.matmul_flags(&b, false, !trans_b)?
                } else {
                    b.matmul_flags(&g, *trans_b, true)?
                };
                let db = if !trans_b {
                    a.matmul_flags(&g, !trans_a, false)?
                } else {
                    g.matmul_flags(&a, true, *trans_a)?
                };
                push(0, da);
                push(1, db);
            }
            Op::Conv2d { pad } => {
                let (x, w) = (input(0), input(1));
                push(0, g.conv2d_bwd_input(&w, *pad, x.shape()));
                push(1, x.conv2d_bwd_weight(&g, *pad, w.shape()));
            }
            Op::ConvBwdInput { pad } => {
                // node = dx(dy, w); cotangent g is x-shaped
                let (dy, w) = (input(0), input(1));
                push(0, g.conv2d(&w, *pad)?);
                push(1, g.conv2d_bwd_weight(&dy, *pad, w.shape()));
            }
            Op::ConvBwdWeight { pad } => {
                // node = dw(x, dy); cotangent g is w-shaped
                let (x, dy) = (input(0), input(1));
                push(0, dy.conv2d_bwd_input(&g, *pad, x.shape()));
                push(1, x.conv2d(&g, *pad)?);
            }
            Op::LeakyRelu { slope } => push(0, g.masked_by_sign(&input(0), *slope)),
            Op::MaskedBySign { slope } => push(0, g.masked_by_sign(&input(1), *slope)),
            Op::MaxPool2d => push(0, g.unpool(&node, input(0).shape())),
            Op::Unpool { pool } => {
                let pool = Tensor::at(&rec, *pool);
                push(0, g.gather_pool_idx(&pool, input(0).shape()));
            }
            Op::GatherIdx { pool } => {
                let pool = Tensor::at(&rec, *pool);
                push(0, g.unpool(&pool, input(0).shape()));
            }
            Op::ChannelSum => push(0, g.channel_broadcast(input(0).shape())),
            Op::ChannelDot => {
                push(0, input(1).channel_scale(&g));
                push(1, input(0).channel_scale(&g));
            }
            Op::ChannelScale => {
                push(0, g.channel_scale(&input(1)));
                push(1, g.channel_dot(&input(0)));
            }
            Op::ChannelAdd => {
                push(0, g.clone());
                push(1, g.channel_sum());
            }
            Op::ChannelBroadcast => push(0, g.channel_sum()),
            Op::RowSum => {
                let n = *input(0).shape().last().expect("rank checked at record time");
                push(0, g.row_broadcast(n));
            }
            Op::RowBroadcast { .. } => push(0, g.row_sum()),
            Op::GatherLabels { labels } => {
                let n = *input(0).shape().last().expect("rank checked at record time");
                push(0, g.scatter_labels_op(labels.clone(), n));
            }
            Op::ScatterLabels { labels, .. } => push(0, g.gather_labels_op(labels.clone())),
            Op::Exp => push(0, g.mul(&node)?),
            Op::Log => push(0, g.mul(&input(0).recip())?),
            Op::Recip => {
                // d(1/x) = -y^2 g
                push(0, g.mul(&node)?.mul(&node)?.scalar_mul(-1.0));
            }
            Op::Rsqrt => {
                // d(x^-1/2) = -(1/2) y^3 g
                push(0, g.mul(&node)?.mul(&node)?.mul(&node)?.scalar_mul(-0.5));
            }
            Op::SumAll => push(0, g.scalar_broadcast(input(0).shape())),
            Op::ScalarBroadcast => push(0, g.sum_all()),
            Op::Reshape => push(0, g.reshape(input(0).shape())?),
        }

        for (pos, t) in contrib {
            let target = inputs[pos];
            if !needed[target] {
                continue;
            }
            cot[target] = Some(match cot[target] {
                None => t.id(),
                Some(prev) => Tensor::at(&rec, prev).add(&t)?.id(),
            });
        }
    }

    let precision = rec.precision();
    if differentiable {
        let mut out = Vec::with_capacity(wrt.len());
        for t in wrt {
            out.push(match cot[t.id()] {
                Some(id) => Tensor::at(&rec, id),
                None => rec.leaf(&Array::zeros(precision, t.shape()), false)?,
            });
        }
        Ok(out)
    } else {
        // Copy the numbers out, then drop every node the walk appended.
        let values: Vec<Array> = wrt
            .iter()
            .map(|t| match cot[t.id()] {
                Some(id) => Tensor::at(&rec, id).value(),
                None => Array::zeros(precision, t.shape()),
            })
            .collect();
        rec.with_inner_mut(|g| g.truncate(pre_len));
        values.into_iter().map(|v| rec.leaf(&v, false)).collect()
    }
}
