//! Backbone construction/forward oracles: hand-computed shapes, init
//! distribution checks, capture semantics, residual/plain equivalence, head
//! surgery invariants, checkpoint round trips.

use rand::Rng;

use crate::tensor::{Array, ComputationRecord, Precision};

use super::*;

fn convnet(depth: usize, base: usize, input: [usize; 3], precision: Precision) -> BackboneConfig {
    BackboneConfig {
        family: BackboneFamily::Convnet,
        depth,
        base_channels: base,
        input_shape: input,
        precision,
        ..BackboneConfig::default()
    }
}

fn rand_batch(rng: &mut impl Rng, b: usize, input: [usize; 3], precision: Precision) -> Array {
    let [c, h, w] = input;
    let data: Vec<f64> = (0..b * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Array::from_f64_values(precision, vec![b, h, w, c], &data)
}

fn bits_of(a: &Array) -> Vec<u64> {
    a.to_f64_vec().iter().map(|v| v.to_bits()).collect()
}

// ── shapes and construction ──

#[test]
fn feature_dims_match_hand_computation() {
    // 84 → 42 → 21 → 10 → 5 spatial, 64 channels: 64·5·5 = 1600.
    let big = convnet(4, 64, [3, 84, 84], Precision::F32);
    assert_eq!(big.feature_dim().unwrap(), 1600);
    // 32 → 16 → 8 → 4 → 2, 32 channels: 32·2·2 = 128.
    let desk = convnet(4, 32, [3, 32, 32], Precision::F32);
    assert_eq!(desk.feature_dim().unwrap(), 128);
    // miniresnet doubles width per block: 32 → 16 → 8 spatial, 64 channels.
    let res = BackboneConfig {
        family: BackboneFamily::Miniresnet,
        depth: 2,
        base_channels: 32,
        input_shape: [3, 32, 32],
        ..BackboneConfig::default()
    };
    assert_eq!(res.feature_dim().unwrap(), 8 * 8 * 64);
}

#[test]
fn too_small_input_is_rejected_with_the_failing_module() {
    let cfg = convnet(4, 8, [3, 8, 8], Precision::F32);
    match cfg.validate() {
        Err(NnError::SpatialTooSmall { module, at_h, at_w, .. }) => {
            assert_eq!(module, 4);
            assert_eq!((at_h, at_w), (1, 1));
        }
        other => panic!("expected SpatialTooSmall, got {other:?}"),
    }
}

#[test]
fn build_is_deterministic_in_seed() {
    let cfg = convnet(3, 8, [3, 16, 16], Precision::F32);
    let a = build(&cfg, 42).unwrap();
    let b = build(&cfg, 42).unwrap();
    let c = build(&cfg, 43).unwrap();
    for (ga, gb) in a.groups.iter().zip(&b.groups) {
        for (pa, pb) in ga.params.iter().zip(&gb.params) {
            assert_eq!(bits_of(&pa.value), bits_of(&pb.value), "{}/{}", ga.name, pa.name);
        }
    }
    let wa = &a.groups[0].params[0].value;
    let wc = &c.groups[0].params[0].value;
    assert_ne!(bits_of(wa), bits_of(wc), "different seeds must differ");
}

#[test]
fn init_matches_declared_distributions() {
    let cfg = convnet(4, 32, [3, 32, 32], Precision::F64);
    let params = build(&cfg, 7).unwrap();

    // conv2 weight: fan_in = 3·3·32 = 288, std should be sqrt(2/288).
    let w = &params.group("conv2").unwrap().params[0];
    assert_eq!(w.value.shape(), &[3, 3, 32, 32]);
    let vals = w.value.to_f64_vec();
    let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
    let std: f64 =
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt();
    let want = (2.0 / 288.0f64).sqrt();
    assert!(mean.abs() < 0.02, "conv mean {mean}");
    assert!((std - want).abs() / want < 0.1, "conv std {std} vs {want}");

    // head weight uniform within ±1/sqrt(d), biases and betas zero, gammas one.
    let d = cfg.feature_dim().unwrap() as f64;
    let head_w = &params.head().params[0].value;
    let bound = 1.0 / d.sqrt();
    assert!(head_w.to_f64_vec().iter().all(|v| v.abs() <= bound));
    for g in &params.groups {
        for p in &g.params {
            match p.name.as_str() {
                n if n.starts_with('b') || n.starts_with("beta") => {
                    assert!(p.value.to_f64_vec().iter().all(|&v| v == 0.0), "{}/{}", g.name, p.name)
                }
                n if n.starts_with("gamma") => {
                    assert!(p.value.to_f64_vec().iter().all(|&v| v == 1.0), "{}/{}", g.name, p.name)
                }
                _ => {}
            }
        }
    }
}

#[test]
fn param_kinds_split_scales_from_shifts() {
    let cfg = BackboneConfig {
        family: BackboneFamily::Miniresnet,
        depth: 2,
        base_channels: 4,
        input_shape: [3, 16, 16],
        ..BackboneConfig::default()
    };
    let params = build(&cfg, 1).unwrap();
    for g in &params.groups {
        for p in &g.params {
            let want = if p.name.starts_with('b') || p.name.starts_with("beta") {
                ParamKind::Bias
            } else {
                ParamKind::Weight
            };
            assert_eq!(p.kind, want, "{}/{}", g.name, p.name);
        }
    }
    // skip projection exists exactly where channel counts change
    assert!(params.group("block1").unwrap().params.iter().any(|p| p.name == "skip_w"));
    assert!(params.group("block2").unwrap().params.iter().any(|p| p.name == "skip_w"));
}

// ── forward semantics ──

#[test]
fn forward_shapes_and_captures() {
    let mut rng = crate::seeded_rng(11);
    let cfg = convnet(4, 16, [3, 32, 32], Precision::F32);
    let params = build(&cfg, 3).unwrap();
    let rec = ComputationRecord::new(Precision::F32);
    let bound = params.bind(&rec).unwrap();
    let x = rec.leaf(&rand_batch(&mut rng, 6, cfg.input_shape, Precision::F32), false).unwrap();

    let out = forward(&bound, &x, &["conv1", "conv4"]).unwrap();
    assert_eq!(out.logits.shape(), vec![6, 5]);
    assert_eq!(out.features.shape(), vec![6, 16 * 2 * 2]);
    assert_eq!(out.captures.len(), 2);
    assert_eq!(out.captures[0].0, "conv1");
    assert_eq!(out.captures[0].1.shape(), vec![6, 16 * 16 * 16]);
    assert_eq!(out.captures[1].1.shape(), vec![6, 16 * 2 * 2]);
}

#[test]
fn unknown_capture_lists_valid_layers() {
    let mut rng = crate::seeded_rng(12);
    let cfg = convnet(2, 4, [3, 8, 8], Precision::F32);
    let params = build(&cfg, 3).unwrap();
    let rec = ComputationRecord::new(Precision::F32);
    let bound = params.bind(&rec).unwrap();
    let x = rec.leaf(&rand_batch(&mut rng, 2, cfg.input_shape, Precision::F32), false).unwrap();
    let err = forward(&bound, &x, &["conv9"]).err().unwrap();
    let msg = err.to_string();
    assert!(msg.contains("conv9") && msg.contains("conv1, conv2"), "got: {msg}");
}

#[test]
fn capture_does_not_perturb_logits() {
    let mut rng = crate::seeded_rng(13);
    let cfg = convnet(3, 8, [3, 16, 16], Precision::F32);
    let params = build(&cfg, 5).unwrap();
    let batch = rand_batch(&mut rng, 4, cfg.input_shape, Precision::F32);

    let run = |capture: &[&str]| {
        let rec = ComputationRecord::new(Precision::F32);
        let bound = params.bind(&rec).unwrap();
        let x = rec.leaf(&batch, false).unwrap();
        forward(&bound, &x, capture).unwrap().logits.value()
    };
    assert_eq!(bits_of(&run(&[])), bits_of(&run(&["conv1", "conv2", "conv3"])));
}

#[test]
fn batch_norm_uses_current_batch_statistics() {
    // The same image must produce different logits in different company:
    // normalization statistics come from the batch it arrives in.
    let mut rng = crate::seeded_rng(14);
    let cfg = convnet(2, 4, [3, 8, 8], Precision::F32);
    let params = build(&cfg, 9).unwrap();

    let probe = rand_batch(&mut rng, 1, cfg.input_shape, Precision::F32);
    let mut company_a = probe.to_f64_vec();
    company_a.extend(rand_batch(&mut rng, 3, cfg.input_shape, Precision::F32).to_f64_vec());
    let mut company_b = probe.to_f64_vec();
    company_b.extend(rand_batch(&mut rng, 3, cfg.input_shape, Precision::F32).to_f64_vec());

    let logits_of = |data: &[f64]| {
        let rec = ComputationRecord::new(Precision::F32);
        let bound = params.bind(&rec).unwrap();
        let x = rec
            .leaf(&Array::from_f64_values(Precision::F32, vec![4, 8, 8, 3], data), false)
            .unwrap();
        forward(&bound, &x, &[]).unwrap().logits.value().to_f64_vec()[..5].to_vec()
    };
    assert_ne!(logits_of(&company_a), logits_of(&company_b));
}

#[test]
fn skipless_miniresnet_equals_hand_built_plain_stack() {
    let mut rng = crate::seeded_rng(15);
    let cfg = BackboneConfig {
        family: BackboneFamily::Miniresnet,
        depth: 2,
        base_channels: 8,
        input_shape: [3, 16, 16],
        skip_mode: SkipMode::None,
        ..BackboneConfig::default()
    };
    let params = build(&cfg, 21).unwrap();
    let batch = rand_batch(&mut rng, 3, cfg.input_shape, Precision::F32);

    let rec = ComputationRecord::new(Precision::F32);
    let bound = params.bind(&rec).unwrap();
    let x = rec.leaf(&batch, false).unwrap();
    let via_forward = forward(&bound, &x, &[]).unwrap().logits.value();

    // Same weights, plain conv→bn→lrelu stack written out longhand.
    let rec2 = ComputationRecord::new(Precision::F32);
    let bound2 = params.bind(&rec2).unwrap();
    let mut t = rec2.leaf(&batch, false).unwrap();
    for block in ["block1", "block2"] {
        let g = bound2.group(block).unwrap();
        let get = |n: &str| &g.params.iter().find(|(name, _)| name == n).unwrap().1;
        for j in 1..=3 {
            t = t.conv2d(get(&format!("w{j}")), 1).unwrap();
            t = t.channel_add(get(&format!("b{j}"))).unwrap();
            t = t
                .batch_norm(get(&format!("gamma{j}")), get(&format!("beta{j}")), BN_EPS)
                .unwrap();
            t = t.leaky_relu(cfg.leaky_slope);
        }
        t = t.max_pool2d().unwrap();
    }
    let head = bound2.group(HEAD_GROUP).unwrap();
    let get = |n: &str| &head.params.iter().find(|(name, _)| name == n).unwrap().1;
    let logits = t.flatten().unwrap().matmul_flags(get("w"), false, true).unwrap();
    let longhand = logits.channel_add(get("b")).unwrap().value();

    assert_eq!(bits_of(&via_forward), bits_of(&longhand));
}

#[test]
fn disconnecting_the_last_skip_changes_only_the_last_block() {
    let cfg = BackboneConfig {
        family: BackboneFamily::Miniresnet,
        depth: 3,
        base_channels: 4,
        input_shape: [3, 16, 16],
        skip_mode: SkipMode::DisconnectLast,
        ..BackboneConfig::default()
    };
    let specs = cfg.layer_specs();
    assert_eq!(
        specs.iter().map(|s| s.skip_enabled).collect::<Vec<_>>(),
        vec![true, true, false]
    );

    let mut rng = crate::seeded_rng(16);
    let full = BackboneConfig { skip_mode: SkipMode::Full, ..cfg.clone() };
    let params = build(&full, 2).unwrap();
    let batch = rand_batch(&mut rng, 2, cfg.input_shape, Precision::F32);
    let logits = |config: &BackboneConfig| {
        // Same parameter values; only the skip wiring differs.
        let mut p = params.clone();
        p.config = config.clone();
        let rec = ComputationRecord::new(Precision::F32);
        let bound = p.bind(&rec).unwrap();
        let x = rec.leaf(&batch, false).unwrap();
        forward(&bound, &x, &[]).unwrap().logits.value().to_f64_vec()
    };
    assert_ne!(logits(&full), logits(&cfg));
}

// ── head surgery ──

#[test]
fn orthonormalize_head_yields_orthonormal_rows_and_zero_bias() {
    let cfg = convnet(2, 8, [3, 16, 16], Precision::F64);
    let mut params = build(&cfg, 3).unwrap();
    orthonormalize_head(&mut params, 99).unwrap();

    let w = params.head().params[0].value.to_f64_vec();
    let d = cfg.feature_dim().unwrap();
    for i in 0..5 {
        for j in 0..=i {
            let dot: f64 = (0..d).map(|k| w[i * d + k] * w[j * d + k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-12, "rows {i},{j}: dot {dot}");
        }
    }
    assert!(params.head().params[1].value.to_f64_vec().iter().all(|&b| b == 0.0));
}

#[test]
fn orthonormalize_recovers_from_duplicate_rows() {
    let cfg = convnet(2, 8, [3, 16, 16], Precision::F64);
    let mut params = build(&cfg, 3).unwrap();
    let d = cfg.feature_dim().unwrap();
    {
        let head = params.group_mut(HEAD_GROUP).unwrap();
        let w = &mut head.params[0];
        let mut vals = w.value.to_f64_vec();
        let row0: Vec<f64> = vals[..d].to_vec();
        for r in 1..5 {
            vals[r * d..(r + 1) * d].copy_from_slice(&row0);
        }
        w.value = Array::from_f64(vec![5, d], vals);
    }
    orthonormalize_head(&mut params, 7).unwrap();
    let w = params.head().params[0].value.to_f64_vec();
    for i in 0..5 {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| w[i * d + k] * w[j * d + k]).sum();
            assert!(dot.abs() < 1e-12, "rows {i},{j} still correlated: {dot}");
        }
    }
}

#[test]
fn orthonormalize_rejects_more_classes_than_features() {
    let cfg = BackboneConfig {
        num_classes: 10,
        ..convnet(3, 1, [1, 8, 8], Precision::F32) // feature dim 1·1·1 = 1
    };
    let mut params = build(&cfg, 3).unwrap();
    assert!(matches!(
        orthonormalize_head(&mut params, 0),
        Err(NnError::HeadTooWide { n: 10, d: 1 })
    ));
}

#[test]
fn center_head_preserves_softmax_exactly_in_f64() {
    let mut rng = crate::seeded_rng(17);
    let cfg = convnet(2, 8, [3, 16, 16], Precision::F64);
    let mut params = build(&cfg, 31).unwrap();
    // Train-less but non-trivial: perturb the head away from its symmetric init.
    {
        let head = params.group_mut(HEAD_GROUP).unwrap();
        for p in head.params.iter_mut() {
            let mut vals = p.value.to_f64_vec();
            for v in vals.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
            p.value = Array::from_f64(p.value.shape().to_vec(), vals);
        }
    }
    let batch = rand_batch(&mut rng, 4, cfg.input_shape, Precision::F64);
    let softmax_of = |p: &ParameterSet| {
        let rec = ComputationRecord::new(Precision::F64);
        let bound = p.bind(&rec).unwrap();
        let x = rec.leaf(&batch, false).unwrap();
        forward(&bound, &x, &[]).unwrap().logits.softmax().unwrap().value().to_f64_vec()
    };
    let before = softmax_of(&params);
    center_head(&mut params);
    let after = softmax_of(&params);
    for (b, a) in before.iter().zip(&after) {
        assert!((b - a).abs() < 1e-12, "softmax moved: {b} vs {a}");
    }
    // and the head rows now have zero column means
    let d = cfg.feature_dim().unwrap();
    let w = params.head().params[0].value.to_f64_vec();
    for col in 0..d {
        let mean: f64 = (0..5).map(|r| w[r * d + col]).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
    }
}

// ── checkpoints ──

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = convnet(3, 8, [3, 16, 16], Precision::F32);
    let params = build(&cfg, 77).unwrap();
    let path = dir.path().join("net.mlp");
    save_checkpoint(&path, &params).unwrap();
    let back = load_checkpoint(&path, &cfg).unwrap();
    for (ga, gb) in params.groups.iter().zip(&back.groups) {
        assert_eq!(ga.name, gb.name);
        for (pa, pb) in ga.params.iter().zip(&gb.params) {
            assert_eq!(pa.value.shape(), pb.value.shape());
            assert_eq!(bits_of(&pa.value), bits_of(&pb.value), "{}/{}", ga.name, pa.name);
        }
    }
}

#[test]
fn checkpoint_rejects_mismatched_config_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = convnet(3, 8, [3, 16, 16], Precision::F32);
    let params = build(&cfg, 77).unwrap();
    let path = dir.path().join("net.mlp");
    save_checkpoint(&path, &params).unwrap();

    let deeper = convnet(4, 8, [3, 32, 32], Precision::F32);
    let err = load_checkpoint(&path, &deeper).unwrap_err().to_string();
    assert!(err.contains("conv4"), "should name the missing group: {err}");

    let wider = convnet(3, 16, [3, 16, 16], Precision::F32);
    let err = load_checkpoint(&path, &wider).unwrap_err().to_string();
    assert!(err.contains("shape"), "should complain about shapes: {err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    let broken = dir.path().join("broken.mlp");
    std::fs::write(&broken, &bytes).unwrap();
    assert!(load_checkpoint(&broken, &cfg).is_err());
}
