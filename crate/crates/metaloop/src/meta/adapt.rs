//! Inner-loop adaptation: gradient steps on a task loss with per-group rates.

use crate::nn::{forward, BoundParams, ParameterSet};
use crate::tensor::{gradient, Array, ComputationRecord, Tensor};

use super::{InnerLoopConfig, InnerOrder, MetaError, Result};

/// Adapt record-bound parameters against an arbitrary recorded loss.
///
/// Runs `cfg.steps` gradient steps; the loss is recomputed from scratch each
/// step (unrolled semantics). Groups with rate 0 keep their exact tensor
/// handles — bit-identical values, and still present in the record so outer
/// gradients reach them through the loss. With `order = second` the update
/// `θ − α·∇L` stays differentiable in θ through ∇L; with `first` the inner
/// gradient enters as a detached constant, leaving only the identity path.
pub fn adapt_bound(
    bound: &BoundParams,
    loss_of: &mut dyn FnMut(&BoundParams) -> Result<Tensor>,
    cfg: &InnerLoopConfig,
) -> Result<BoundParams> {
    if cfg.steps == 0 {
        return Err(MetaError::InvalidConfig("inner steps must be >= 1".into()));
    }
    for (name, &rate) in &cfg.rates {
        if !bound.groups.iter().any(|g| &g.name == name) {
            return Err(MetaError::UnknownGroup { name: name.clone() });
        }
        if rate < 0.0 {
            return Err(MetaError::NegativeRate { group: name.clone(), rate });
        }
    }

    let mut current = bound.clone();
    // (group idx, param idx, rate) of every adapting parameter, fixed order.
    let slots: Vec<(usize, usize, f64)> = current
        .groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| {
            let rate = cfg.rate(&g.name);
            (0..g.params.len()).filter_map(move |pi| (rate > 0.0).then_some((gi, pi, rate)))
        })
        .collect();

    for _ in 0..cfg.steps {
        let loss = loss_of(&current)?;
        if slots.is_empty() {
            continue; // fully frozen: the loss was still recorded, params unchanged
        }
        let wrt: Vec<Tensor> =
            slots.iter().map(|&(gi, pi, _)| current.groups[gi].params[pi].1.clone()).collect();
        let grads = gradient(&loss, &wrt, cfg.order == InnerOrder::Second)?;
        for (&(gi, pi, rate), grad) in slots.iter().zip(&grads) {
            let slot = &mut current.groups[gi].params[pi];
            slot.1 = slot.1.sub(&grad.scalar_mul(rate))?;
        }
    }
    Ok(current)
}

/// Classification loss closure over a fixed support batch.
pub(crate) fn support_loss<'a>(
    x: &'a Tensor,
    y: &'a [usize],
) -> impl FnMut(&BoundParams) -> Result<Tensor> + 'a {
    move |p: &BoundParams| {
        let out = forward(p, x, &[])?;
        Ok(out.logits.softmax_cross_entropy(y)?)
    }
}

/// Check that a support batch covers every class the head can predict.
pub(crate) fn check_support(n: usize, y: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &l in y {
        if l >= n {
            return Err(MetaError::BadEpisode(format!("label {l} out of range for {n} classes")));
        }
        seen[l] = true;
    }
    match seen.iter().position(|&s| !s) {
        Some(label) => Err(MetaError::MissingClass { label }),
        None => Ok(()),
    }
}

/// Host-level adaptation: returns a new parameter set, leaving the input
/// untouched. This is the value-only form — for meta-gradients, adapt inside
/// an existing record with [`adapt_bound`].
pub fn inner_adapt(
    params: &ParameterSet,
    support_x: &Array,
    support_y: &[usize],
    cfg: &InnerLoopConfig,
) -> Result<ParameterSet> {
    cfg.validate(params)?;
    check_support(params.config.num_classes, support_y)?;
    if support_x.shape()[0] != support_y.len() {
        return Err(MetaError::BadEpisode(format!(
            "{} support inputs vs {} labels",
            support_x.shape()[0],
            support_y.len()
        )));
    }
    let rec = ComputationRecord::new(params.config.precision);
    let bound = params.bind(&rec)?;
    let x = rec.leaf(&support_x.cast(params.config.precision), false)?;
    let adapted = adapt_bound(&bound, &mut support_loss(&x, support_y), cfg)?;
    Ok(adapted.to_parameter_set())
}
