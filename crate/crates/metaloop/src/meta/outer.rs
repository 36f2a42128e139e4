//! Outer loop: summed-query meta-loss, meta-gradient, optimizers, evaluation.

use std::collections::BTreeMap;

use crate::nn::{center_head, forward, ParameterSet, HEAD_GROUP};
use crate::tensor::{gradient, Array, ComputationRecord};

use super::adapt::{adapt_bound, check_support, support_loss};
use super::{
    accuracy, Episode, HeadVariant, InnerLoopConfig, InnerOrder, MetaError, MetaStepReport,
    OuterLoopConfig, OuterOptimizer, Result,
};

/// Outer gradient in f64, aligned `[group][param][element]` with the
/// parameter set that produced it.
pub type GradSet = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Copy, Debug)]
pub struct EpisodeEval {
    /// Query accuracy at the initialization.
    pub before: f64,
    /// Query accuracy after inner adaptation.
    pub after: f64,
}

fn check_episode(params: &ParameterSet, ep: &Episode) -> Result<()> {
    ep.validate()?;
    if ep.n != params.config.num_classes {
        return Err(MetaError::BadEpisode(format!(
            "{}-way episode fed to a {}-class head",
            ep.n, params.config.num_classes
        )));
    }
    Ok(())
}

/// Meta-loss (sum of per-episode query losses at the adapted parameters),
/// its gradient with respect to the initialization, and per-episode query
/// accuracies before/after adaptation.
///
/// Each episode owns a fresh record; the accumulation across episodes is an
/// ordered f64 reduction by episode index, so the result is independent of
/// any execution interleaving.
pub fn meta_loss_and_gradient(
    params: &ParameterSet,
    episodes: &[Episode],
    inner: &InnerLoopConfig,
) -> Result<(f64, GradSet, Vec<EpisodeEval>)> {
    inner.validate(params)?;
    if episodes.is_empty() {
        return Err(MetaError::InvalidConfig("meta-batch is empty".into()));
    }
    let precision = params.config.precision;
    let mut meta_loss = 0.0f64;
    let mut grads: GradSet = params
        .groups
        .iter()
        .map(|g| g.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
        .collect();
    let mut evals = Vec::with_capacity(episodes.len());

    for ep in episodes {
        check_episode(params, ep)?;
        check_support(ep.n, &ep.support_y)?;
        let rec = ComputationRecord::new(precision);
        let bound = params.bind(&rec)?;
        let sx = rec.leaf(&ep.support_x.cast(precision), false)?;
        let qx = rec.leaf(&ep.query_x.cast(precision), false)?;

        let before = accuracy(&forward(&bound, &qx, &[])?.logits.value(), &ep.query_y);
        let adapted = adapt_bound(&bound, &mut support_loss(&sx, &ep.support_y), inner)?;
        let query_logits = forward(&adapted, &qx, &[])?.logits;
        let after = accuracy(&query_logits.value(), &ep.query_y);
        let loss = query_logits.softmax_cross_entropy(&ep.query_y)?;
        meta_loss += loss.value().to_f64_vec()[0];
        evals.push(EpisodeEval { before, after });

        let wrt = bound.tensors();
        let episode_grads = gradient(&loss, &wrt, false)?;
        let mut it = episode_grads.iter();
        for group in grads.iter_mut() {
            for acc in group.iter_mut() {
                let g = it.next().expect("gradient list aligns with parameter list");
                for (a, v) in acc.iter_mut().zip(g.value().to_f64_vec()) {
                    *a += v;
                }
            }
        }
    }
    Ok((meta_loss, grads, evals))
}

// ── outer optimizers ──

/// Stateful outer-loop optimizer. Built once per training run from the same
/// config that drives [`meta_step`]; moment buffers stay aligned with the
/// parameter set across steps.
pub struct Optimizer {
    kind: OuterOptimizer,
    beta: f64,
    beta_head: Option<f64>,
    fix_head: bool,
    t: i32,
    m: GradSet,
    v: GradSet,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(outer: &OuterLoopConfig, params: &ParameterSet) -> Result<Self> {
        outer.validate()?;
        let zeros: GradSet = params
            .groups
            .iter()
            .map(|g| g.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
            .collect();
        Ok(Optimizer {
            kind: outer.optimizer,
            beta: outer.beta,
            beta_head: outer.beta_head,
            fix_head: outer.head_variant == HeadVariant::Fix,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One outer update in place. Groups with an effective rate of zero are
    /// skipped entirely, so their values stay bit-identical.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradSet) -> Result<()> {
        if grads.len() != params.groups.len() {
            return Err(MetaError::InvalidConfig("gradient/parameter group mismatch".into()));
        }
        self.t += 1;
        for (gi, group) in params.groups.iter_mut().enumerate() {
            let rate = if group.name == HEAD_GROUP {
                if self.fix_head {
                    continue;
                }
                self.beta_head.unwrap_or(self.beta)
            } else {
                self.beta
            };
            if rate == 0.0 {
                continue;
            }
            for (pi, p) in group.params.iter_mut().enumerate() {
                let g = &grads[gi][pi];
                if g.len() != p.value.len() {
                    return Err(MetaError::InvalidConfig(format!(
                        "gradient for {}/{} has wrong length",
                        group.name, p.name
                    )));
                }
                let mut theta = p.value.to_f64_vec();
                match self.kind {
                    OuterOptimizer::Sgd => {
                        for (t, &gv) in theta.iter_mut().zip(g) {
                            *t -= rate * gv;
                        }
                    }
                    OuterOptimizer::Adam => {
                        let (m, v) = (&mut self.m[gi][pi], &mut self.v[gi][pi]);
                        let bc1 = 1.0 - ADAM_B1.powi(self.t);
                        let bc2 = 1.0 - ADAM_B2.powi(self.t);
                        for i in 0..theta.len() {
                            m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                            v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                            theta[i] -= rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                        }
                    }
                }
                p.value =
                    Array::from_f64_values(p.value.precision(), p.value.shape().to_vec(), &theta);
            }
        }
        Ok(())
    }
}

/// One outer update: adapt each episode, sum query losses, differentiate
/// with respect to the initialization, and apply the outer optimizer. Under
/// `head_variant = fix` the head is skipped; under `centering` the head is
/// re-centered after the update (a softmax no-op that keeps its rows
/// comparable across steps).
///
/// `opt` must have been built from this same `outer` config and parameter
/// structure.
pub fn meta_step(
    params: &ParameterSet,
    episodes: &[Episode],
    inner: &InnerLoopConfig,
    outer: &OuterLoopConfig,
    opt: &mut Optimizer,
) -> Result<(ParameterSet, MetaStepReport)> {
    outer.validate()?;
    if episodes.len() != outer.meta_batch {
        return Err(MetaError::EpisodeCount { want: outer.meta_batch, got: episodes.len() });
    }
    let (meta_loss, grads, evals) = meta_loss_and_gradient(params, episodes, inner)?;
    let mut new_params = params.clone();
    opt.step(&mut new_params, &grads)?;
    if outer.head_variant == HeadVariant::Centering {
        center_head(&mut new_params);
    }
    let grad_norms: BTreeMap<String, f64> = params
        .groups
        .iter()
        .zip(&grads)
        .map(|(g, gg)| {
            let sq: f64 = gg.iter().flatten().map(|v| v * v).sum();
            (g.name.clone(), sq.sqrt())
        })
        .collect();
    let report = MetaStepReport {
        meta_loss,
        acc_before: evals.iter().map(|e| e.before).collect(),
        acc_after: evals.iter().map(|e| e.after).collect(),
        grad_norms,
    };
    Ok((new_params, report))
}

/// Evaluate on episodes without mutating anything: query accuracy at the
/// initialization and after adapting on each support set.
///
/// Inner order is irrelevant here — it changes gradient flow, not update
/// values — so adaptation always runs in the cheaper detached mode.
/// `adapt_steps_override` replaces `inner.steps`; an override of 0 skips
/// adaptation entirely (after == before).
pub fn meta_test(
    params: &ParameterSet,
    episodes: &[Episode],
    inner: &InnerLoopConfig,
    adapt_steps_override: Option<usize>,
) -> Result<Vec<EpisodeEval>> {
    inner.validate(params)?;
    let steps = adapt_steps_override.unwrap_or(inner.steps);
    let precision = params.config.precision;
    let mut evals = Vec::with_capacity(episodes.len());
    for ep in episodes {
        check_episode(params, ep)?;
        check_support(ep.n, &ep.support_y)?;
        let rec = ComputationRecord::new(precision);
        let bound = params.bind(&rec)?;
        let qx = rec.leaf(&ep.query_x.cast(precision), false)?;
        let before = accuracy(&forward(&bound, &qx, &[])?.logits.value(), &ep.query_y);
        let after = if steps == 0 {
            before
        } else {
            let sx = rec.leaf(&ep.support_x.cast(precision), false)?;
            let cfg =
                InnerLoopConfig { rates: inner.rates.clone(), steps, order: InnerOrder::First };
            let adapted = adapt_bound(&bound, &mut support_loss(&sx, &ep.support_y), &cfg)?;
            accuracy(&forward(&adapted, &qx, &[])?.logits.value(), &ep.query_y)
        };
        evals.push(EpisodeEval { before, after });
    }
    Ok(evals)
}
