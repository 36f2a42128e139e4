//! Hand-arithmetic oracles for the similarity primitives, brute-force
//! oracles for NIL assignment and CKA, and end-to-end checks on a tiny
//! backbone.

use crate::meta::{Episode, InnerLoopConfig};
use crate::nn::{build, forward, BackboneConfig};
use crate::tasks::{identity_mix, make_domain, sample_episode, DomainSpec, Split};
use crate::tensor::{read_tensor, Array, ComputationRecord, Precision};
use crate::seeded_rng;

use super::*;

fn arr2(rows: &[&[f64]]) -> Array {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array::from_f64_values(Precision::F64, vec![rows.len(), d], &flat)
}

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        base_channels: 4,
        input_shape: [1, 8, 8],
        num_classes: 2,
        precision: Precision::F32,
        ..BackboneConfig::default()
    }
}

fn tiny_domain_spec() -> DomainSpec {
    DomainSpec {
        seed: 5,
        splits: [4, 0, 0],
        image_shape: [1, 8, 8],
        channel_mix: identity_mix(1),
        jitter_px: 1,
        jitter_phase: 0.3,
        noise_std: 0.05,
        ..DomainSpec::default()
    }
}

fn tiny_episode(seed: u64, n: usize, k: usize, q: usize) -> Episode {
    let domain = make_domain(&tiny_domain_spec()).unwrap();
    let mut rng = seeded_rng(seed);
    sample_episode(&domain, Split::Train, n, k, q, &mut rng).unwrap()
}

// ── cosine ──

#[test]
fn cosine_matches_hand_arithmetic() {
    let x = [0.3, -1.2, 4.0];
    assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let got = cosine(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert!((got - 11.0 / (5.0f64.sqrt() * 25.0f64.sqrt())).abs() < 1e-15);

    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0, "zero-vector convention");
    assert_eq!(cosine(&[1e-13, 0.0], &[1.0, 0.0]).unwrap(), 0.0, "below-threshold norm");
    assert!(matches!(
        cosine(&[1.0], &[1.0, 2.0]),
        Err(AnalysisError::LengthMismatch { a: 1, b: 2 })
    ));
}

// ── linear CKA ──

/// Direct evaluation in feature space: ‖YᵀX‖²_F / (‖XᵀX‖_F·‖YᵀY‖_F) on
/// column-centered copies — independent of the Gram-matrix route.
fn cka_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let center = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (n, d) = (m.len(), m[0].len());
        let mut out = m.to_vec();
        for c in 0..d {
            let mean = m.iter().map(|r| r[c]).sum::<f64>() / n as f64;
            for r in out.iter_mut() {
                r[c] -= mean;
            }
        }
        out
    };
    let (xc, yc) = (center(x), center(y));
    let cross = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        // aᵀb: d_a × d_b
        let (da, db) = (a[0].len(), b[0].len());
        let mut m = vec![vec![0.0; db]; da];
        for r in 0..a.len() {
            for i in 0..da {
                for j in 0..db {
                    m[i][j] += a[r][i] * b[r][j];
                }
            }
        }
        m
    };
    let fro = |m: &[Vec<f64>]| m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let yx = cross(&yc, &xc);
    let num = fro(&yx);
    num * num / (fro(&cross(&xc, &xc)) * fro(&cross(&yc, &yc)))
}

#[test]
fn cka_matches_the_direct_formula_on_hand_matrices() {
    // centered, these two are related by a scaled orthogonal map, so the
    // mathematical value is exactly 1 — rounding may leave it an ulp above
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let y = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![2.0, 0.0]];
    let xa = arr2(&[&x[0], &x[1], &x[2]]);
    let ya = arr2(&[&y[0], &y[1], &y[2]]);
    let got = cka_linear(&xa, &ya).unwrap();
    assert!((got - cka_oracle(&x, &y)).abs() < 1e-12, "got {got}");
    assert!((got - 1.0).abs() < 1e-12, "hand derivation gives 1, got {got}");

    // a pair with no exact linear relation
    let y2 = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![2.0, 1.0]];
    let ya2 = arr2(&[&y2[0], &y2[1], &y2[2]]);
    let got = cka_linear(&xa, &ya2).unwrap();
    assert!((got - cka_oracle(&x, &y2)).abs() < 1e-12, "got {got}");
    assert!(got >= 0.0 && got <= 1.0 + 1e-12);
    assert!(got < 0.999, "should be strictly below 1, got {got}");
}

#[test]
fn cka_invariances_and_symmetry() {
    let x = arr2(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7], &[-0.4, 0.9, 0.1], &[2.2, -1.1, 0.6]]);
    assert_eq!(cka_linear(&x, &x).unwrap(), 1.0, "identical input is exactly 1");

    // rotate features by an orthogonal matrix (Givens on dims 0,2)
    let (c, s) = (0.6f64, 0.8f64);
    let flat = x.to_f64_vec();
    let rotated: Vec<f64> = flat
        .chunks(3)
        .flat_map(|r| [c * r[0] - s * r[2], r[1], s * r[0] + c * r[2]])
        .collect();
    let xr = Array::from_f64_values(Precision::F64, vec![4, 3], &rotated);
    assert!((cka_linear(&x, &xr).unwrap() - 1.0).abs() < 1e-8, "orthogonal invariance");

    let scaled: Vec<f64> = flat.iter().map(|v| v * -3.7).collect();
    let xs = Array::from_f64_values(Precision::F64, vec![4, 3], &scaled);
    assert!((cka_linear(&x, &xs).unwrap() - 1.0).abs() < 1e-8, "scale invariance");

    let y = arr2(&[&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[0.5, 0.5, 0.5]]);
    let (ab, ba) = (cka_linear(&x, &y).unwrap(), cka_linear(&y, &x).unwrap());
    assert!((ab - ba).abs() < 1e-10, "symmetry");
}

#[test]
fn cka_rejects_degenerate_and_mismatched_inputs() {
    let x = arr2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.5]]);
    let constant = arr2(&[&[2.0, 7.0], &[2.0, 7.0], &[2.0, 7.0]]);
    let err = cka_linear(&x, &constant).unwrap_err().to_string();
    assert!(err.contains("degenerate representation"), "{err}");
    let err = cka_linear(&constant, &x).unwrap_err().to_string();
    assert!(err.contains("degenerate representation"), "{err}");

    let short = arr2(&[&[1.0, 2.0]]);
    assert!(matches!(cka_linear(&short, &short), Err(AnalysisError::NotEnoughSamples(_))));
    let other = arr2(&[&[1.0], &[2.0]]);
    assert!(matches!(cka_linear(&x, &other), Err(AnalysisError::LengthMismatch { a: 3, b: 2 })));
}

// ── head gap ──

#[test]
fn head_gap_hits_the_orthonormal_reference_and_degenerate_zero() {
    let eye = arr2(&[
        &[1.0, 0.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0, 0.0],
        &[0.0, 0.0, 1.0, 0.0],
        &[0.0, 0.0, 0.0, 1.0],
    ]);
    assert!((head_gap_cosine(&eye).unwrap() - 0.5).abs() < 1e-12);

    let same = arr2(&[&[0.4, 0.7], &[0.4, 0.7], &[0.4, 0.7]]);
    assert_eq!(head_gap_cosine(&same).unwrap(), 0.0, "equal rows → zero-vector convention");

    assert!(matches!(
        head_gap_cosine(&arr2(&[&[1.0], &[2.0]])),
        Err(AnalysisError::TooFewRows { n: 2 })
    ));
}

#[test]
fn head_gap_matches_triple_enumeration_by_hand() {
    // rows a=(1,0), b=(0,1), c=(1,1): triples with k=c give cosine 0, the
    // other four give 1/√2.
    let w = arr2(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
    let expected = (4.0 / 2.0f64.sqrt()) / 6.0;
    assert!((head_gap_cosine(&w).unwrap() - expected).abs() < 1e-12);
}

// ── pair means and template assignment on hand vectors ──

#[test]
fn pair_means_match_brute_force_enumeration() {
    // one-hot by class
    let one_hot = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ];
    let labels = [0, 0, 1, 1];
    let (intra, inter) = class_pair_means(&one_hot, &labels).unwrap();
    assert_eq!((intra, inter), (1.0, 0.0));

    // all identical → both buckets collapse to 1
    let same = vec![vec![0.3, 0.4]; 4];
    let (intra, inter) = class_pair_means(&same, &labels).unwrap();
    assert!((intra - 1.0).abs() < 1e-15 && (inter - 1.0).abs() < 1e-15);

    // 4 samples, 2 classes, hand vectors vs explicit enumeration
    let vecs = vec![
        vec![1.0, 0.0],
        vec![0.8, 0.6],
        vec![0.0, 1.0],
        vec![-0.6, 0.8],
    ];
    let (intra, inter) = class_pair_means(&vecs, &labels).unwrap();
    let c = |i: usize, j: usize| cosine(&vecs[i], &vecs[j]).unwrap();
    let want_intra = (c(0, 1) + c(2, 3)) / 2.0;
    let want_inter = (c(0, 2) + c(0, 3) + c(1, 2) + c(1, 3)) / 4.0;
    assert!((intra - want_intra).abs() < 1e-15);
    assert!((inter - want_inter).abs() < 1e-15);

    let single_class = class_pair_means(&one_hot, &[0, 0, 0, 0]);
    assert!(matches!(single_class, Err(AnalysisError::NotEnoughSamples(_))));
}

#[test]
fn template_assignment_prefers_cosine_and_breaks_ties_low() {
    // orthonormal templates; query equal to template 2 → class 2
    let support = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let query = vec![vec![0.0, 0.0, 1.0], vec![0.9, 0.1, 0.0]];
    let got = assign_by_templates(&support, &[0, 1, 2], &query, 3).unwrap();
    assert_eq!(got, vec![2, 0]);

    // identical templates for both classes → tie → lowest index
    let support = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    let got = assign_by_templates(&support, &[0, 1], &[vec![1.0, 0.0]].to_vec(), 2).unwrap();
    assert_eq!(got, vec![0]);
}

// ── end-to-end on a tiny backbone ──

#[test]
fn nil_test_equals_a_template_comparison_oracle_on_small_episodes() {
    let params = build(&tiny_config(), 40).unwrap();
    // n·(k+q) ≤ 20 in every case below — exhaustive comparison
    for (seed, n, k, q) in [(1u64, 2, 1, 2), (2, 2, 3, 4), (3, 4, 2, 2), (4, 3, 1, 1)] {
        let ep = tiny_episode(seed, n, k, q);
        for layer in ["conv1", "conv2"] {
            let got = nil_test(&params, &ep, layer, None).unwrap();
            let sup = matrix_rows(&representations(&params, &ep.support_x, &[layer]).unwrap()[0].1);
            let qry = matrix_rows(&representations(&params, &ep.query_x, &[layer]).unwrap()[0].1);
            // oracle: recompute templates and walk every (query, class) pair
            let mut correct = 0;
            for (row, &label) in qry.iter().zip(&ep.query_y) {
                let mut sims = Vec::new();
                for class in 0..n {
                    let members: Vec<&Vec<f64>> = sup
                        .iter()
                        .zip(&ep.support_y)
                        .filter(|(_, &y)| y == class)
                        .map(|(r, _)| r)
                        .collect();
                    let mut mean = vec![0.0; row.len()];
                    for m in &members {
                        for (a, b) in mean.iter_mut().zip(m.iter()) {
                            *a += b / members.len() as f64;
                        }
                    }
                    sims.push(cosine(row, &mean).unwrap());
                }
                let best = sims
                    .iter()
                    .enumerate()
                    .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
                    .unwrap()
                    .0;
                if best == label {
                    correct += 1;
                }
            }
            let want = correct as f64 / qry.len() as f64;
            assert_eq!(got, want, "seed {seed} layer {layer}");
        }
    }
}

#[test]
fn nil_on_identical_support_and_query_is_perfect() {
    // zero noise and jitter: every draw IS the prototype, so each query
    // matches its own class template exactly
    let spec = DomainSpec { jitter_px: 0, jitter_phase: 0.0, noise_std: 0.0, ..tiny_domain_spec() };
    let domain = make_domain(&spec).unwrap();
    let mut rng = seeded_rng(7);
    let ep = sample_episode(&domain, Split::Train, 2, 1, 1, &mut rng).unwrap();
    let params = build(&tiny_config(), 41).unwrap();
    assert_eq!(nil_test(&params, &ep, "conv2", None).unwrap(), 1.0);
}

#[test]
fn anil_adaptation_never_moves_nil_or_body_cka() {
    let params = build(&tiny_config(), 42).unwrap();
    let ep = tiny_episode(8, 2, 3, 5);
    let anil = InnerLoopConfig::anil(&params, 0.4);

    let before = nil_test(&params, &ep, "conv2", None).unwrap();
    let after = nil_test(&params, &ep, "conv2", Some(&anil)).unwrap();
    assert_eq!(before, after, "head-only adaptation cannot change body templates");

    let adapted = crate::meta::inner_adapt(&params, &ep.support_x, &ep.support_y, &anil).unwrap();
    let report = cka_report(&params, &adapted, &ep, &["conv1", "conv2"]).unwrap();
    for row in &report.rows {
        assert_eq!(row.value, 1.0, "{} moved under a frozen body", row.layer);
    }

    let maml = InnerLoopConfig::maml(&params, 0.4);
    let adapted = crate::meta::inner_adapt(&params, &ep.support_x, &ep.support_y, &maml).unwrap();
    let report = cka_report(&params, &adapted, &ep, &["conv1", "conv2"]).unwrap();
    for row in &report.rows {
        assert!(row.value < 1.0, "{} should move under full adaptation", row.layer);
        assert!(row.value > 0.0);
    }
}

#[test]
fn similarity_report_runs_both_states_and_validates_geometry() {
    let params = build(&tiny_config(), 43).unwrap();
    let ep = tiny_episode(9, 2, 2, 3);
    let maml = InnerLoopConfig::maml(&params, 0.4);
    let adapted = crate::meta::inner_adapt(&params, &ep.support_x, &ep.support_y, &maml).unwrap();

    let report = similarity_report(&params, &adapted, &ep, &["conv1", "conv2"]).unwrap();
    assert_eq!(report.rows.len(), 4, "2 layers × 2 states");
    for row in &report.rows {
        assert!((-1.0..=1.0).contains(&row.intra), "{row:?}");
        assert!((-1.0..=1.0).contains(&row.inter), "{row:?}");
    }
    assert_eq!(report.rows[0].state, AdaptState::Before);
    assert_eq!(report.rows[3].state, AdaptState::After);

    // q = 1 leaves no same-class pairs
    let thin = tiny_episode(10, 2, 2, 1);
    assert!(matches!(
        similarity_report(&params, &adapted, &thin, &["conv1"]),
        Err(AnalysisError::NotEnoughSamples(_))
    ));

    // single-class episodes are structurally invalid
    let mut bad = tiny_episode(11, 2, 2, 3);
    bad.n = 1;
    assert!(similarity_report(&params, &adapted, &bad, &["conv1"]).is_err());

    let err = similarity_report(&params, &adapted, &ep, &["conv9"]).unwrap_err().to_string();
    assert!(err.contains("conv1"), "unknown capture lists the valid layers: {err}");
}

#[test]
fn grad_norms_split_weights_from_biases_and_match_an_analytic_head_oracle() {
    let config = BackboneConfig { precision: Precision::F64, ..tiny_config() };
    let params = build(&config, 44).unwrap();
    let ep = tiny_episode(12, 2, 2, 2);

    let report = grad_norm_report(&params, &ep).unwrap();
    assert_eq!(report.rows.len(), params.groups.len());
    for row in &report.rows {
        assert!(row.weight_norm >= 0.0 && row.bias_norm >= 0.0);
    }
    // every group here — body and head — carries nonzero inner-loop signal,
    // whether or not an algorithm chooses to apply it
    for row in &report.rows {
        assert!(row.weight_norm > 0.0, "{} weight grads vanished", row.group);
    }

    // analytic head oracle: ∂CE/∂W = (softmax − onehot)ᵀ·features / batch
    let rec = ComputationRecord::new(config.precision);
    let bound = params.bind(&rec).unwrap();
    let x = rec.leaf(&ep.support_x.cast(config.precision), false).unwrap();
    let out = forward(&bound, &x, &[]).unwrap();
    let logits = matrix_rows(&out.logits.value());
    let feats = matrix_rows(&out.features.value());
    let b = logits.len() as f64;
    let (classes, dim) = (logits[0].len(), feats[0].len());
    let mut gw = vec![vec![0.0f64; dim]; classes];
    let mut gb = vec![0.0f64; classes];
    for (row, (f, &y)) in logits.iter().zip(feats.iter().zip(&ep.support_y)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..classes {
            let delta = exps[c] / z - if c == y { 1.0 } else { 0.0 };
            gb[c] += delta / b;
            for (slot, fv) in gw[c].iter_mut().zip(f) {
                *slot += delta * fv / b;
            }
        }
    }
    let want_w = gw.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let want_b = gb.iter().map(|v| v * v).sum::<f64>().sqrt();
    let head = report.rows.iter().find(|r| r.group == "head").unwrap();
    assert!((head.weight_norm - want_w).abs() < 1e-10 * want_w.max(1.0), "{}", head.weight_norm);
    assert!((head.bias_norm - want_b).abs() < 1e-10 * want_b.max(1.0), "{}", head.bias_norm);
}

#[test]
fn zero_input_kills_first_layer_weight_gradients_only() {
    let mut params = build(&tiny_config(), 45).unwrap();
    // non-uniform logits on dead features, so the head bias keeps a gradient
    let head = params.group_mut("head").unwrap();
    let bias = head.params.iter_mut().find(|p| p.name == "b").unwrap();
    bias.value = Array::from_f64_values(Precision::F32, vec![2], &[0.3, -0.2]);

    let mut ep = tiny_episode(13, 2, 1, 1);
    let zeros = vec![0.0; ep.support_x.shape().iter().product()];
    ep.support_x =
        Array::from_f64_values(Precision::F32, ep.support_x.shape().to_vec(), &zeros);
    let report = grad_norm_report(&params, &ep).unwrap();
    let conv1 = report.rows.iter().find(|r| r.group == "conv1").unwrap();
    assert_eq!(conv1.weight_norm, 0.0, "conv weights only ever multiply zeros");
    // batch norm re-centers the constant conv output, so the conv bias
    // gradient dies here as well
    assert_eq!(conv1.bias_norm, 0.0);
    let head = report.rows.iter().find(|r| r.group == "head").unwrap();
    assert_eq!(head.weight_norm, 0.0, "head weights only ever multiply zero features");
    assert!(head.bias_norm > 0.0, "head bias still shifts the logits");
}

#[test]
fn representation_dumps_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let params = build(&tiny_config(), 46).unwrap();
    let ep = tiny_episode(14, 2, 1, 3);
    let anil = InnerLoopConfig::anil(&params, 0.4);
    let adapted = crate::meta::inner_adapt(&params, &ep.support_x, &ep.support_y, &anil).unwrap();

    let files = dump_representations(&params, &adapted, &ep, &["conv1", "conv2"], dir.path()).unwrap();
    assert_eq!(files.len(), 5, "2 layers × 2 states + labels");

    for (state, p) in [(AdaptState::Before, &params), (AdaptState::After, &adapted)] {
        for layer in ["conv1", "conv2"] {
            let path = dir.path().join(format!("{layer}_{}.mlt", state.as_str()));
            let disk = read_tensor(&path).unwrap();
            assert_eq!(disk.shape()[0], 2 * 3, "row count n·q");
            let want = &representations(p, &ep.query_x, &[layer]).unwrap()[0].1;
            assert_eq!(disk.to_f64_vec(), want.to_f64_vec(), "{}", path.display());
        }
    }
    let labels = read_tensor(&dir.path().join("labels.mlt")).unwrap();
    let got: Vec<usize> = labels.to_f64_vec().iter().map(|&v| v as usize).collect();
    assert_eq!(got, ep.query_y);
}

#[test]
fn csv_serializations_use_the_fixed_columns() {
    let sim = SimilarityReport {
        rows: vec![SimilarityRow {
            layer: "conv1".into(),
            state: AdaptState::Before,
            intra: 0.75,
            inter: 0.25,
        }],
    };
    assert_eq!(
        sim.to_csv(),
        "layer,state,metric,value\nconv1,before,intra_cosine,0.75\nconv1,before,inter_cosine,0.25\n"
    );

    let cka = CkaReport { rows: vec![CkaRow { layer: "conv2".into(), value: 1.0 }] };
    assert_eq!(cka.to_csv(), "layer,state,metric,value\nconv2,before_vs_after,cka_linear,1\n");

    let grads = GradNormReport {
        rows: vec![GradNormRow { group: "head".into(), weight_norm: 0.5, bias_norm: 0.125 }],
    };
    assert_eq!(
        grads.to_csv(),
        "layer,state,metric,value\nhead,support,weight_grad_norm,0.5\nhead,support,bias_grad_norm,0.125\n"
    );
}
