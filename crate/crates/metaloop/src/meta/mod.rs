//! Episodic inner/outer-loop machinery.
//!
//! One algorithm, parameterized by per-group inner learning rates: all groups
//! adapting is the classic full-network method, head-only adaptation freezes
//! the body, body-only adaptation freezes the head and trains it exclusively
//! in the outer loop. Frozen groups still appear in the adaptation record, so
//! outer gradients flow through their *use* in the inner loss — that is what
//! makes body-only inner loops head-aware.
//!
//! The outer loop sums query losses over a meta-batch and differentiates the
//! whole unrolled computation (or its first-order truncation) with respect to
//! the initialization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::{NnError, ParameterSet, HEAD_GROUP};
use crate::tensor::{Array, TensorError};

mod adapt;
mod outer;

pub use adapt::{adapt_bound, inner_adapt};
pub use outer::{meta_loss_and_gradient, meta_step, meta_test, EpisodeEval, GradSet, Optimizer};

// ── errors ──

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid loop config: {0}")]
    InvalidConfig(String),
    #[error("rate map names unknown parameter group '{name}'")]
    UnknownGroup { name: String },
    #[error("negative inner rate {rate} for group '{group}'")]
    NegativeRate { group: String, rate: f64 },
    #[error("support set has no sample for class {label}")]
    MissingClass { label: usize },
    #[error("meta-batch expects exactly {want} episodes, got {got}")]
    EpisodeCount { want: usize, got: usize },
    #[error("malformed episode: {0}")]
    BadEpisode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

// ── episodes ──

/// One few-shot task: `n`-way classification with `k` support and `q` query
/// samples per class. Inputs are `[batch, h, w, c]`; labels are episode-local
/// (0..n), assigned to the sampled classes by a random bijection recorded in
/// `label_map` (original class id → episode label). Class ids carry no
/// meaning inside an episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support_x: Array,
    pub support_y: Vec<usize>,
    pub query_x: Array,
    pub query_y: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub label_map: BTreeMap<usize, usize>,
}

impl Episode {
    /// Structural consistency: batch sizes, exact per-label counts.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 1 || self.q < 1 {
            return Err(MetaError::BadEpisode(format!(
                "degenerate geometry n={} k={} q={}",
                self.n, self.k, self.q
            )));
        }
        let check = |x: &Array, y: &[usize], per_class: usize, role: &str| -> Result<()> {
            if x.shape().len() != 4 || x.shape()[0] != self.n * per_class {
                return Err(MetaError::BadEpisode(format!(
                    "{role} inputs {:?} do not hold {} samples",
                    x.shape(),
                    self.n * per_class
                )));
            }
            if y.len() != self.n * per_class {
                return Err(MetaError::BadEpisode(format!(
                    "{role} has {} labels for {} samples",
                    y.len(),
                    self.n * per_class
                )));
            }
            let mut counts = vec![0usize; self.n];
            for &l in y {
                if l >= self.n {
                    return Err(MetaError::BadEpisode(format!(
                        "{role} label {l} out of range for {}-way episode",
                        self.n
                    )));
                }
                counts[l] += 1;
            }
            if let Some(l) = counts.iter().position(|&c| c != per_class) {
                return Err(MetaError::BadEpisode(format!(
                    "{role} has {} samples of label {l}, expected {per_class}",
                    counts[l]
                )));
            }
            Ok(())
        };
        check(&self.support_x, &self.support_y, self.k, "support")?;
        check(&self.query_x, &self.query_y, self.q, "query")
    }
}

// ── inner loop config ──

/// Whether inner gradients stay differentiable (full unrolled second-order
/// meta-gradient) or are detached before being applied (first-order mode:
/// the update value is identical, only outer gradient flow changes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOrder {
    Second,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerLoopConfig {
    /// Group name → inner learning rate. Groups absent from the map are
    /// frozen (rate 0) during adaptation.
    pub rates: BTreeMap<String, f64>,
    pub steps: usize,
    pub order: InnerOrder,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        InnerLoopConfig { rates: BTreeMap::new(), steps: 1, order: InnerOrder::Second }
    }
}

impl InnerLoopConfig {
    /// Every group adapts at the same rate.
    pub fn maml(params: &ParameterSet, alpha: f64) -> Self {
        let rates = params.groups.iter().map(|g| (g.name.clone(), alpha)).collect();
        InnerLoopConfig { rates, ..Default::default() }
    }

    /// Only the head adapts; the body is frozen in the inner loop.
    pub fn anil(_params: &ParameterSet, alpha: f64) -> Self {
        let rates = [(HEAD_GROUP.to_string(), alpha)].into_iter().collect();
        InnerLoopConfig { rates, ..Default::default() }
    }

    /// Only the body adapts; the head is trained by the outer loop alone.
    pub fn boil(params: &ParameterSet, alpha: f64) -> Self {
        let rates = params
            .groups
            .iter()
            .filter(|g| g.name != HEAD_GROUP)
            .map(|g| (g.name.clone(), alpha))
            .collect();
        InnerLoopConfig { rates, ..Default::default() }
    }

    /// Effective rate for a group: absent means frozen.
    pub fn rate(&self, group: &str) -> f64 {
        self.rates.get(group).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, params: &ParameterSet) -> Result<()> {
        if self.steps == 0 {
            return Err(MetaError::InvalidConfig("inner steps must be >= 1".into()));
        }
        for (name, &rate) in &self.rates {
            if params.group(name).is_none() {
                return Err(MetaError::UnknownGroup { name: name.clone() });
            }
            if rate < 0.0 {
                return Err(MetaError::NegativeRate { group: name.clone(), rate });
            }
        }
        Ok(())
    }
}

/// Rate map for adapting only a subset of body layers (optionally plus the
/// head), everything else frozen. `learn` = all body names with
/// `learn_head = true` reproduces the full-network preset; with
/// `learn_head = false`, the body-only preset.
pub fn layer_subset_config(
    params: &ParameterSet,
    learn: &[String],
    learn_head: bool,
    alpha: f64,
) -> Result<InnerLoopConfig> {
    if learn.is_empty() && !learn_head {
        return Err(MetaError::InvalidConfig(
            "empty layer subset with a frozen head adapts nothing".into(),
        ));
    }
    let mut rates = BTreeMap::new();
    for name in learn {
        match params.group(name) {
            None => return Err(MetaError::UnknownGroup { name: name.clone() }),
            Some(g) if g.name == HEAD_GROUP => {
                return Err(MetaError::InvalidConfig(
                    "the head is toggled by learn_head, not listed as a body layer".into(),
                ))
            }
            Some(_) => {
                rates.insert(name.clone(), alpha);
            }
        }
    }
    if learn_head {
        rates.insert(HEAD_GROUP.to_string(), alpha);
    }
    Ok(InnerLoopConfig { rates, ..Default::default() })
}

// ── outer loop config ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Head trains normally in the outer loop.
    None,
    /// Subtract the row/bias mean from the head after every outer update —
    /// the softmax-invariant direction, so decisions are unchanged.
    Centering,
    /// Head outer rate is zero; pair with an orthonormalized head at build.
    Fix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    /// Adaptive moment estimation with the standard defaults
    /// (0.9 / 0.999 / 1e-8). The stock outer rates presume this.
    Adam,
    /// Plain gradient descent — exact, so oracle tests prefer it.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterLoopConfig {
    pub beta: f64,
    /// Optional head-specific outer rate; defaults to `beta`.
    pub beta_head: Option<f64>,
    /// Episodes per outer update (B).
    pub meta_batch: usize,
    /// Total outer steps a training run performs.
    pub steps: usize,
    pub head_variant: HeadVariant,
    pub optimizer: OuterOptimizer,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        OuterLoopConfig {
            beta: 1e-3,
            beta_head: None,
            meta_batch: 4,
            steps: 2000,
            head_variant: HeadVariant::None,
            optimizer: OuterOptimizer::Adam,
        }
    }
}

impl OuterLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(MetaError::InvalidConfig(format!("outer rate {} invalid", self.beta)));
        }
        if let Some(bh) = self.beta_head {
            if !(bh >= 0.0) {
                return Err(MetaError::InvalidConfig(format!("head outer rate {bh} invalid")));
            }
        }
        if self.meta_batch == 0 {
            return Err(MetaError::InvalidConfig("meta-batch must be >= 1".into()));
        }
        Ok(())
    }
}

// ── reporting ──

#[derive(Clone, Debug, Serialize)]
pub struct MetaStepReport {
    /// Sum of per-episode query losses at the adapted parameters.
    pub meta_loss: f64,
    /// Query accuracy per episode at the initialization.
    pub acc_before: Vec<f64>,
    /// Query accuracy per episode after adaptation.
    pub acc_after: Vec<f64>,
    /// L2 norm of the outer gradient, per parameter group.
    pub grad_norms: BTreeMap<String, f64>,
}

// ── small shared helpers ──

/// Index of the row maximum, ties broken toward the lowest index (strict
/// `>` keeps the first maximum encountered).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Array, labels: &[usize]) -> f64 {
    let shape = logits.shape();
    let (b, n) = (shape[0], shape[1]);
    let vals = logits.to_f64_vec();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&vals[i * n..(i + 1) * n]) == l)
        .count();
    debug_assert_eq!(b, labels.len());
    correct as f64 / b as f64
}
