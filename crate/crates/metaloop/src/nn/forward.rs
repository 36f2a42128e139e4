//! Forward pass over bound parameters, with per-module representation
//! capture for the analysis tooling.

use crate::tensor::Tensor;

use super::{BoundGroup, BoundParams, LayerKind, NnError, Result, BN_EPS, HEAD_GROUP};

pub struct ForwardOutput {
    /// `[B, num_classes]` classifier outputs.
    pub logits: Tensor,
    /// `[B, d]` flattened representation entering the head.
    pub features: Tensor,
    /// Flattened post-module representations for each requested capture, in
    /// forward (layer) order.
    pub captures: Vec<(String, Tensor)>,
}

impl BoundGroup {
    fn tensor(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("group '{}' has no parameter '{name}'", self.name))
            .1
    }
}

/// Run the backbone on a channels-last `[B, H, W, C]` batch.
///
/// `capture` names body groups whose post-pool output should be returned
/// flattened; an unknown name is an error that lists the valid layers.
/// Capturing only appends reshape views — the logits are bit-identical with
/// and without captures.
///
/// Batch norm always uses the statistics of `x` itself (never running
/// averages), so a support batch and a query batch see different
/// normalizations by design.
pub fn forward(params: &BoundParams, x: &Tensor, capture: &[&str]) -> Result<ForwardOutput> {
    let config = &params.config;
    let specs = config.layer_specs();

    for name in capture {
        if !specs.iter().any(|s| &s.name == name) {
            return Err(NnError::UnknownCapture {
                name: (*name).to_string(),
                valid: specs.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", "),
            });
        }
    }

    let shape = x.shape();
    let expect = [config.input_shape[1], config.input_shape[2], config.input_shape[0]];
    if shape.len() != 4 || shape[1..] != expect {
        return Err(NnError::InvalidConfig(format!(
            "input batch {shape:?} does not match [B, {}, {}, {}] for this backbone",
            expect[0], expect[1], expect[2],
        )));
    }

    let mut cur = x.clone();
    let mut captures = Vec::with_capacity(capture.len());

    for spec in &specs {
        let group = params
            .group(&spec.name)
            .unwrap_or_else(|| panic!("bound parameters missing group '{}'", spec.name));
        cur = match spec.kind {
            LayerKind::ConvModule => {
                let y = cur.conv2d(group.tensor("w"), 1)?.channel_add(group.tensor("b"))?;
                let y = y.batch_norm(group.tensor("gamma"), group.tensor("beta"), BN_EPS)?;
                y.relu().max_pool2d()?
            }
            LayerKind::ResidualBlock => {
                let mut t = cur.clone();
                for j in 1..=3 {
                    let y = t
                        .conv2d(group.tensor(&format!("w{j}")), 1)?
                        .channel_add(group.tensor(&format!("b{j}")))?;
                    let y = y.batch_norm(
                        group.tensor(&format!("gamma{j}")),
                        group.tensor(&format!("beta{j}")),
                        BN_EPS,
                    )?;
                    t = y.leaky_relu(config.leaky_slope);
                }
                if spec.skip_enabled {
                    let skip = if spec.in_channels != spec.out_channels {
                        cur.conv2d(group.tensor("skip_w"), 0)?
                    } else {
                        cur.clone()
                    };
                    t = t.residual_add(&skip)?;
                }
                t.max_pool2d()?
            }
        };
        if capture.contains(&spec.name.as_str()) {
            captures.push((spec.name.clone(), cur.flatten()?));
        }
    }

    let features = cur.flatten()?;
    let head = params.group(HEAD_GROUP).expect("bound parameters end in a head group");
    let logits = features.matmul_flags(head.tensor("w"), false, true)?.channel_add(head.tensor("b"))?;

    Ok(ForwardOutput { logits, features, captures })
}
