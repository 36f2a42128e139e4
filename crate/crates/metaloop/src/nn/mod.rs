//! Conv backbones with explicitly grouped parameters.
//!
//! The whole meta-learning engine revolves around *parameter groups*: each
//! body module ("conv1".."convN" or "block1".."blockN") and the classifier
//! head ("head") is a named group, and inner/outer learning rates are set per
//! group. Full-network, head-only and body-only adaptation are then the same
//! code path with different rate maps.
//!
//! Convention: image batches are channels-last `[B, H, W, C]`; conv weights
//! are `[kh, kw, Cin, Cout]`. The user-facing `input_shape` stays `(C, H, W)`
//! to match the on-disk dataset layout.

mod checkpoint;
mod forward;
mod head;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, ForwardOutput};
pub use head::{center_head, orthonormalize_head};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Array, ComputationRecord, Precision, Tensor, TensorError};

/// Batch-norm epsilon used by every backbone layer.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("input {h}x{w} too small: module {module} would pool a {at_h}x{at_w} map below 2x2")]
    SpatialTooSmall { h: usize, w: usize, module: usize, at_h: usize, at_w: usize },
    #[error("unknown capture layer '{name}'; valid layers are: {valid}")]
    UnknownCapture { name: String, valid: String },
    #[error("head has {n} rows but only {d} feature dimensions; cannot orthonormalize")]
    HeadTooWide { n: usize, d: usize },
    #[error("orthonormalization failed: {retries} redraws all produced degenerate rows")]
    OrthonormalizeFailed { retries: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

// ── configuration ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    /// conv3x3(pad 1) → BN → ReLU → maxpool2x2 per module, constant width.
    Convnet,
    /// per block: 3 x (conv3x3 → BN → leaky ReLU), additive skip from block
    /// input to block output, then maxpool2x2; width doubles per block.
    Miniresnet,
}

/// Which residual connections a miniresnet keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Every block keeps its skip.
    Full,
    /// All but the final block — the "disconnected last skip" probe.
    DisconnectLast,
    /// No skips anywhere: the net degenerates to the plain stacked form.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub family: BackboneFamily,
    /// Conv modules (convnet) or residual blocks (miniresnet).
    pub depth: usize,
    pub base_channels: usize,
    /// `(C, H, W)` of a single input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Negative-side slope of miniresnet activations.
    pub leaky_slope: f64,
    pub skip_mode: SkipMode,
    pub precision: Precision,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            family: BackboneFamily::Convnet,
            depth: 4,
            base_channels: 32,
            input_shape: [3, 32, 32],
            num_classes: 5,
            leaky_slope: 0.01,
            skip_mode: SkipMode::Full,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    ConvModule,
    ResidualBlock,
}

/// One body module, as derived from the config.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip_enabled: bool,
}

impl BackboneConfig {
    /// The body modules this config describes, in forward order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.depth);
        let mut cin = self.input_shape[0];
        for i in 0..self.depth {
            let spec = match self.family {
                BackboneFamily::Convnet => LayerSpec {
                    name: format!("conv{}", i + 1),
                    kind: LayerKind::ConvModule,
                    in_channels: cin,
                    out_channels: self.base_channels,
                    skip_enabled: false,
                },
                BackboneFamily::Miniresnet => LayerSpec {
                    name: format!("block{}", i + 1),
                    kind: LayerKind::ResidualBlock,
                    in_channels: cin,
                    out_channels: self.base_channels << i,
                    skip_enabled: match self.skip_mode {
                        SkipMode::Full => true,
                        SkipMode::DisconnectLast => i + 1 < self.depth,
                        SkipMode::None => false,
                    },
                },
            };
            cin = spec.out_channels;
            specs.push(spec);
        }
        specs
    }

    /// Spatial extent after each module's 2x2 pool (floor semantics), with
    /// the too-small check the builder and forward pass both rely on.
    pub fn spatial_plan(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let mut plan = Vec::with_capacity(self.depth);
        for module in 1..=self.depth {
            if h < 2 || w < 2 {
                return Err(NnError::SpatialTooSmall {
                    h: self.input_shape[1],
                    w: self.input_shape[2],
                    module,
                    at_h: h,
                    at_w: w,
                });
            }
            h /= 2;
            w /= 2;
            plan.push((h, w));
        }
        Ok(plan)
    }

    /// Flattened dimension of the representation entering the head.
    pub fn feature_dim(&self) -> Result<usize> {
        let plan = self.spatial_plan()?;
        let (h, w) = *plan.last().expect("depth >= 1 checked in validate");
        let specs = self.layer_specs();
        Ok(h * w * specs.last().expect("depth >= 1").out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(NnError::InvalidConfig("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(NnError::InvalidConfig("base_channels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NnError::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidConfig(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(NnError::InvalidConfig(format!(
                "leaky_slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        self.spatial_plan()?;
        Ok(())
    }
}

// ── parameters ──

/// Whether a parameter scales activations (conv/head weights, BN gamma) or
/// shifts them (conv/head biases, BN beta). Gradient-norm reports split on
/// this axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array,
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Param>,
}

/// All parameters of one backbone: body groups in forward order, then the
/// head group. Host-side values; [`ParameterSet::bind`] turns them into
/// record leaves for one episode.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    pub config: BackboneConfig,
    pub groups: Vec<ParamGroup>,
}

pub const HEAD_GROUP: &str = "head";

impl ParameterSet {
    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn head(&self) -> &ParamGroup {
        self.group(HEAD_GROUP).expect("every backbone ends in a head group")
    }

    /// Body group names in forward order — also the valid capture names.
    pub fn body_names(&self) -> Vec<String> {
        self.groups.iter().filter(|g| g.name != HEAD_GROUP).map(|g| g.name.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.params).map(|p| p.value.len()).sum()
    }

    /// Insert every parameter into `rec` as a gradient-target leaf.
    pub fn bind(&self, rec: &ComputationRecord) -> Result<BoundParams> {
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let mut params = Vec::with_capacity(g.params.len());
            for p in &g.params {
                params.push((p.name.clone(), rec.leaf(&p.value, true)?));
            }
            groups.push(BoundGroup { name: g.name.clone(), params });
        }
        Ok(BoundParams { config: self.config.clone(), groups })
    }
}

/// Record-bound mirror of a [`ParameterSet`]: same group structure, tensor
/// handles instead of host arrays. This is what adaptation transforms — an
/// adapted parameter is an expression, not a leaf.
#[derive(Clone)]
pub struct BoundParams {
    pub config: BackboneConfig,
    pub groups: Vec<BoundGroup>,
}

#[derive(Clone)]
pub struct BoundGroup {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
}

impl BoundParams {
    pub fn group(&self, name: &str) -> Option<&BoundGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.groups.iter().flat_map(|g| g.params.iter().map(|(_, t)| t.clone())).collect()
    }

    /// Copy current values back into a host-side parameter set.
    pub fn to_parameter_set(&self) -> ParameterSet {
        let groups = self
            .groups
            .iter()
            .map(|g| ParamGroup {
                name: g.name.clone(),
                params: g
                    .params
                    .iter()
                    .map(|(name, t)| Param {
                        name: name.clone(),
                        kind: param_kind(name),
                        value: t.value(),
                    })
                    .collect(),
            })
            .collect();
        ParameterSet { config: self.config.clone(), groups }
    }
}

/// Parameter kinds are a naming convention: weights are "w*"/"gamma*"
/// (scaling), biases are "b*"/"beta*" (shifting).
pub(crate) fn param_kind(name: &str) -> ParamKind {
    if name.starts_with('b') || name.starts_with("beta") {
        ParamKind::Bias
    } else {
        ParamKind::Weight
    }
}

// ── initialization ──

/// Build a freshly initialized parameter set. Deterministic in `seed`:
/// the same config and seed reproduce every value bit-for-bit.
///
/// Conv weights are He-normal (std sqrt(2/fan_in)); the head weight is
/// uniform in ±1/sqrt(d); every bias, and BN beta, starts at zero; BN gamma
/// starts at one.
pub fn build(config: &BackboneConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = crate::seeded_rng(seed);
    let precision = config.precision;
    let mut groups = Vec::with_capacity(config.depth + 1);

    for spec in config.layer_specs() {
        let mut params = Vec::new();
        let convs: &[(&str, usize, usize, usize)] = match spec.kind {
            LayerKind::ConvModule => &[("", 3, spec.in_channels, spec.out_channels)],
            LayerKind::ResidualBlock => &[
                ("1", 3, spec.in_channels, spec.out_channels),
                ("2", 3, spec.out_channels, spec.out_channels),
                ("3", 3, spec.out_channels, spec.out_channels),
            ],
        };
        for &(suffix, k, cin, cout) in convs {
            params.push(Param {
                name: format!("w{suffix}"),
                kind: ParamKind::Weight,
                value: he_normal(&mut rng, precision, &[k, k, cin, cout]),
            });
            params.push(Param {
                name: format!("b{suffix}"),
                kind: ParamKind::Bias,
                value: Array::zeros(precision, vec![cout]),
            });
            params.push(Param {
                name: format!("gamma{suffix}"),
                kind: ParamKind::Weight,
                value: Array::from_f64_values(precision, vec![cout], &vec![1.0; cout]),
            });
            params.push(Param {
                name: format!("beta{suffix}"),
                kind: ParamKind::Bias,
                value: Array::zeros(precision, vec![cout]),
            });
        }
        // 1x1 projection so the skip can cross a channel-count change.
        if spec.skip_enabled && spec.in_channels != spec.out_channels {
            params.push(Param {
                name: "skip_w".into(),
                kind: ParamKind::Weight,
                value: he_normal(&mut rng, precision, &[1, 1, spec.in_channels, spec.out_channels]),
            });
        }
        groups.push(ParamGroup { name: spec.name, params });
    }

    let d = config.feature_dim()?;
    let n = config.num_classes;
    let bound = 1.0 / (d as f64).sqrt();
    let w: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-bound..bound)).collect();
    groups.push(ParamGroup {
        name: HEAD_GROUP.into(),
        params: vec![
            Param {
                name: "w".into(),
                kind: ParamKind::Weight,
                value: Array::from_f64_values(precision, vec![n, d], &w),
            },
            Param { name: "b".into(), kind: ParamKind::Bias, value: Array::zeros(precision, vec![n]) },
        ],
    });

    Ok(ParameterSet { config: config.clone(), groups })
}

fn he_normal(rng: &mut ChaCha8Rng, precision: Precision, shape: &[usize]) -> Array {
    let fan_in: usize = shape[..3].iter().product();
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Array::from_f64_values(precision, shape.to_vec(), &data)
}
