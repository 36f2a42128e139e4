//! Domain determinism, prototype constraints, shift interpolation, episode
//! sampling statistics, and dataset round trips.

use std::collections::BTreeSet;

use crate::seeded_rng;
use crate::tensor::{Array, Precision};

use super::*;

fn bits_of(a: &Array) -> Vec<u64> {
    a.to_f64_vec().iter().map(|v| v.to_bits()).collect()
}

fn small_spec() -> DomainSpec {
    DomainSpec {
        seed: 11,
        splits: [10, 0, 0],
        image_shape: [1, 8, 8],
        channel_mix: identity_mix(1),
        jitter_px: 0,
        jitter_phase: 0.0,
        noise_std: 0.05,
        ..DomainSpec::default()
    }
}

fn centered_cosine(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let na: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ── domain construction ──

#[test]
fn noiseless_jitterless_samples_equal_the_prototype() {
    let spec = DomainSpec {
        jitter_px: 0,
        jitter_phase: 0.0,
        noise_std: 0.0,
        ..DomainSpec::default()
    };
    let domain = make_domain(&spec).unwrap();
    let mut rng = seeded_rng(3);
    let batch = domain.draw(7, 3, &mut rng).unwrap();
    let proto = domain.prototype(7).unwrap().prototype.to_f64_vec();
    let flat = batch.to_f64_vec();
    for i in 0..3 {
        assert_eq!(&flat[i * proto.len()..(i + 1) * proto.len()], &proto[..]);
    }
}

#[test]
fn same_spec_and_rng_reproduce_every_byte() {
    let spec = DomainSpec::default();
    let (a, b) = (make_domain(&spec).unwrap(), make_domain(&spec).unwrap());
    for id in 0..spec.num_classes() {
        assert_eq!(
            bits_of(&a.prototype(id).unwrap().prototype),
            bits_of(&b.prototype(id).unwrap().prototype)
        );
    }
    let (mut r1, mut r2) = (seeded_rng(9), seeded_rng(9));
    let s1 = a.draw(0, 4, &mut r1).unwrap();
    let s2 = b.draw(0, 4, &mut r2).unwrap();
    assert_eq!(bits_of(&s1), bits_of(&s2));

    let mut r3 = seeded_rng(10);
    let s3 = a.draw(0, 4, &mut r3).unwrap();
    assert_ne!(bits_of(&s1), bits_of(&s3), "different rng, different samples");
}

#[test]
fn prototypes_stay_pairwise_distinct() {
    let domain = make_domain(&DomainSpec::default()).unwrap();
    let flats: Vec<Vec<f64>> =
        (0..30).map(|id| domain.prototype(id).unwrap().prototype.to_f64_vec()).collect();
    for i in 0..flats.len() {
        for j in 0..i {
            let dot: f64 = flats[i].iter().zip(&flats[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = flats[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj: f64 = flats[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot / (ni * nj) < 0.9, "classes {i},{j} too similar");
        }
    }
}

#[test]
fn unsatisfiable_similarity_constraint_errors_out() {
    // Near-zero contrast pins every pixel to 0.5: all prototypes collide.
    let spec = DomainSpec {
        splits: [2, 0, 0],
        image_shape: [1, 8, 8],
        channel_mix: identity_mix(1),
        contrast_lo: 0.01,
        contrast_hi: 0.01,
        ..DomainSpec::default()
    };
    assert!(matches!(
        make_domain(&spec),
        Err(TaskError::PrototypeCollision { class: 1, .. })
    ));
}

#[test]
fn channel_mixing_separates_domains_more_than_jitter_separates_samples() {
    let base = DomainSpec {
        splits: [6, 0, 0],
        jitter_px: 1,
        jitter_phase: 0.2,
        noise_std: 0.02,
        ..DomainSpec::default()
    };
    // identical seed and gratings; only the channel mixing differs
    let permuted = DomainSpec {
        channel_mix: vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        ..base.clone()
    };
    let (da, db) = (make_domain(&base).unwrap(), make_domain(&permuted).unwrap());

    let mut rng = seeded_rng(17);
    let (mut cross, mut within) = (0.0, 0.0);
    for id in 0..6 {
        let pa = da.prototype(id).unwrap().prototype.to_f64_vec();
        let pb = db.prototype(id).unwrap().prototype.to_f64_vec();
        let dot: f64 = pa.iter().zip(&pb).map(|(a, b)| a * b).sum();
        let na: f64 = pa.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = pb.iter().map(|v| v * v).sum::<f64>().sqrt();
        cross += dot / (na * nb);

        let two = da.draw(id, 2, &mut rng).unwrap().to_f64_vec();
        let (s1, s2) = two.split_at(pa.len());
        let dot: f64 = s1.iter().zip(s2).map(|(a, b)| a * b).sum();
        let n1: f64 = s1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2: f64 = s2.iter().map(|v| v * v).sum::<f64>().sqrt();
        within += dot / (n1 * n2);
    }
    assert!(
        cross / 6.0 < within / 6.0,
        "mixing should separate domains beyond sample noise: cross {cross} vs within {within}"
    );
}

// ── domain shift ──

#[test]
fn severity_zero_is_identity_and_one_is_a_fresh_family() {
    let spec = DomainSpec::default();
    assert_eq!(shift_domain(&spec, 0.0), spec);

    let far = shift_domain(&spec, 1.0);
    assert_ne!(far.seed, spec.seed, "full shift must re-seed class draws");
    assert_ne!(far.channel_mix, spec.channel_mix);
    assert!(far.validate().is_ok());

    let half = shift_domain(&spec, 0.5);
    assert_eq!(half.seed, spec.seed, "partial shift keeps the class streams");
    assert!(half.validate().is_ok());
    // interpolation sits strictly between source and target
    assert!((half.freq_lo - spec.freq_lo).abs() < (far.freq_lo - spec.freq_lo).abs());
}

#[test]
fn partial_shift_stays_more_correlated_with_the_source_than_full_shift() {
    let (mut corr_half, mut corr_full) = (0.0, 0.0);
    for seed in 0..5 {
        let spec = DomainSpec {
            seed,
            splits: [4, 0, 0],
            image_shape: [1, 12, 12],
            channel_mix: identity_mix(1),
            ..DomainSpec::default()
        };
        let source = make_domain(&spec).unwrap();
        let half = make_domain(&shift_domain(&spec, 0.5)).unwrap();
        let full = make_domain(&shift_domain(&spec, 1.0)).unwrap();
        for id in 0..4 {
            let s = source.prototype(id).unwrap().prototype.to_f64_vec();
            let h = half.prototype(id).unwrap().prototype.to_f64_vec();
            let f = full.prototype(id).unwrap().prototype.to_f64_vec();
            corr_half += centered_cosine(&s, &h).abs();
            corr_full += centered_cosine(&s, &f).abs();
        }
    }
    assert!(
        corr_half > corr_full,
        "severity 0.5 should correlate with the source more than severity 1.0 \
         ({corr_half:.3} vs {corr_full:.3} summed over 5 seeds)"
    );
}

// ── episode sampling ──

#[test]
fn episode_geometry_and_label_bijection_hold() {
    let domain = make_domain(&DomainSpec::default()).unwrap();
    let mut rng = seeded_rng(21);
    let ep = sample_episode(&domain, Split::Train, 5, 1, 15, &mut rng).unwrap();
    assert_eq!(ep.support_x.shape(), &[5, 32, 32, 3]);
    assert_eq!(ep.query_x.shape(), &[75, 32, 32, 3]);
    assert_eq!(ep.support_y.len(), 5);
    assert_eq!(ep.query_y.len(), 75);

    let labels: BTreeSet<usize> = ep.label_map.values().copied().collect();
    assert_eq!(labels, (0..5).collect::<BTreeSet<_>>(), "labels must form a bijection");
    for (&class_id, _) in &ep.label_map {
        assert!(domain.splits().train.contains(&class_id));
    }

    let two = sample_episode(&domain, Split::Val, 2, 1, 1, &mut rng).unwrap();
    let mut support_labels = two.support_y.clone();
    support_labels.sort_unstable();
    assert_eq!(support_labels, vec![0, 1], "both classes exactly once in support");
}

#[test]
fn support_and_query_instances_are_disjoint() {
    let domain = make_domain(&small_spec()).unwrap();
    let mut rng = seeded_rng(22);
    for _ in 0..20 {
        let ep = sample_episode(&domain, Split::Train, 5, 2, 3, &mut rng).unwrap();
        let row = |a: &Array, i: usize| -> Vec<u64> {
            let flat = a.to_f64_vec();
            let len = flat.len() / a.shape()[0];
            flat[i * len..(i + 1) * len].iter().map(|v| v.to_bits()).collect()
        };
        let support: BTreeSet<Vec<u64>> =
            (0..ep.support_x.shape()[0]).map(|i| row(&ep.support_x, i)).collect();
        for i in 0..ep.query_x.shape()[0] {
            assert!(!support.contains(&row(&ep.query_x, i)), "query sample {i} also in support");
        }
    }
}

#[test]
fn five_way_episodes_use_each_of_ten_classes_half_the_time() {
    let domain = make_domain(&small_spec()).unwrap();
    let mut rng = seeded_rng(23);
    let mut counts = vec![0usize; 10];
    let episodes = 1000;
    for _ in 0..episodes {
        let ep = sample_episode(&domain, Split::Train, 5, 1, 1, &mut rng).unwrap();
        for &class_id in ep.label_map.keys() {
            counts[class_id] += 1;
        }
    }
    for (id, &c) in counts.iter().enumerate() {
        let freq = c as f64 / episodes as f64;
        assert!((freq - 0.5).abs() < 0.05, "class {id} frequency {freq}");
    }
}

#[test]
fn sampler_rejects_oversized_ways_and_replays_exactly() {
    let domain = make_domain(&small_spec()).unwrap();
    let mut rng = seeded_rng(24);
    assert!(matches!(
        sample_episode(&domain, Split::Train, 11, 1, 1, &mut rng),
        Err(TaskError::NotEnoughClasses { want: 11, have: 10 })
    ));

    let mut r1 = seeded_rng(25);
    let mut r2 = seeded_rng(25);
    let e1 = sample_episode(&domain, Split::Train, 5, 2, 2, &mut r1).unwrap();
    let e2 = sample_episode(&domain, Split::Train, 5, 2, 2, &mut r2).unwrap();
    assert_eq!(bits_of(&e1.support_x), bits_of(&e2.support_x));
    assert_eq!(bits_of(&e1.query_x), bits_of(&e2.query_x));
    assert_eq!(e1.support_y, e2.support_y);
    assert_eq!(e1.label_map, e2.label_map);
}

// ── datasets on disk ──

#[test]
fn export_then_load_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainSpec {
        splits: [4, 2, 2],
        image_shape: [3, 8, 8],
        ..DomainSpec::default()
    };
    let domain = make_domain(&spec).unwrap();
    let mut rng = seeded_rng(31);
    export_dataset(&domain, 6, dir.path(), &mut rng).unwrap();

    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.splits(), domain.splits());
    assert_eq!(loaded.image_shape(), [3, 8, 8]);

    // replay the export's draw order: split order, class-id order within
    let mut replay = seeded_rng(31);
    for split in [Split::Train, Split::Val, Split::Test] {
        for &class_id in domain.classes(split) {
            let want = domain.draw(class_id, 6, &mut replay).unwrap();
            let got = loaded.class_samples(class_id).unwrap();
            assert_eq!(bits_of(&want), bits_of(&got), "class {class_id}");
        }
    }
}

#[test]
fn dataset_episodes_reuse_stored_bytes_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainSpec {
        splits: [3, 0, 2],
        image_shape: [1, 8, 8],
        channel_mix: identity_mix(1),
        ..DomainSpec::default()
    };
    let domain = make_domain(&spec).unwrap();
    export_dataset(&domain, 5, dir.path(), &mut seeded_rng(32)).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();

    let mut rng = seeded_rng(33);
    let ep = sample_episode(&loaded, Split::Train, 2, 1, 2, &mut rng).unwrap();
    let by_label: std::collections::BTreeMap<usize, usize> =
        ep.label_map.iter().map(|(&class, &label)| (label, class)).collect();
    let sample_len = 8 * 8;
    let check_rows = |x: &Array, y: &[usize]| {
        let flat = x.to_f64_vec();
        for (i, &label) in y.iter().enumerate() {
            let class_id = by_label[&label];
            let stored = loaded.class_samples(class_id).unwrap().to_f64_vec();
            let sample = &flat[i * sample_len..(i + 1) * sample_len];
            let found = stored.chunks(sample_len).any(|row| row == sample);
            assert!(found, "episode sample {i} not among class {class_id} rows");
        }
    };
    check_rows(&ep.support_x, &ep.support_y);
    check_rows(&ep.query_x, &ep.query_y);

    // asking for more instances than stored must fail
    assert!(matches!(
        sample_episode(&loaded, Split::Train, 2, 3, 3, &mut rng),
        Err(TaskError::NotEnoughSamples { .. })
    ));
}

#[test]
fn loader_rejects_broken_layouts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(TaskError::Io { .. })), "missing manifest");

    // zero-sample class
    let root = dir.path();
    crate::tensor::write_tensor(
        &root.join("empty.mlt"),
        &Array::from_f64_values(Precision::F32, vec![0, 1, 4, 4], &[]),
    )
    .unwrap();
    std::fs::write(root.join("manifest"), "train\t0\tempty.mlt\n").unwrap();
    let err = load_dataset(root).unwrap_err().to_string();
    assert!(err.contains("zero samples"), "{err}");

    // shape mismatch between classes
    let a = Array::from_f64_values(Precision::F32, vec![2, 1, 4, 4], &vec![0.0; 32]);
    let b = Array::from_f64_values(Precision::F32, vec![2, 1, 5, 5], &vec![0.0; 50]);
    crate::tensor::write_tensor(&root.join("a.mlt"), &a).unwrap();
    crate::tensor::write_tensor(&root.join("b.mlt"), &b).unwrap();
    std::fs::write(root.join("manifest"), "train\t0\ta.mlt\ntest\t1\tb.mlt\n").unwrap();
    let err = load_dataset(root).unwrap_err().to_string();
    assert!(err.contains("differs"), "{err}");

    // duplicate class id across splits
    std::fs::write(root.join("manifest"), "train\t0\ta.mlt\ntest\t0\ta.mlt\n").unwrap();
    let err = load_dataset(root).unwrap_err().to_string();
    assert!(err.contains("listed twice"), "{err}");

    // malformed line and unknown split tag
    std::fs::write(root.join("manifest"), "train 0 a.mlt\n").unwrap();
    assert!(load_dataset(root).is_err());
    std::fs::write(root.join("manifest"), "dev\t0\ta.mlt\n").unwrap();
    let err = load_dataset(root).unwrap_err().to_string();
    assert!(err.contains("unknown split"), "{err}");
}

#[test]
fn split_sets_must_be_disjoint() {
    let bad = SplitDataset { train: vec![0, 1], val: vec![1], test: vec![2] };
    assert!(bad.validate().is_err());
    let good = SplitDataset { train: vec![0, 1], val: vec![2], test: vec![3] };
    assert!(good.validate().is_ok());
}

#[test]
fn spec_validation_rejects_nonsense() {
    let ok = DomainSpec::default();
    assert!(ok.validate().is_ok());
    let cases: Vec<DomainSpec> = vec![
        DomainSpec { freq_lo: 3.0, freq_hi: 2.0, ..ok.clone() },
        DomainSpec { contrast_lo: 0.0, ..ok.clone() },
        DomainSpec { channel_mix: vec![1.0; 4], ..ok.clone() },
        DomainSpec { noise_std: -0.5, ..ok.clone() },
        DomainSpec { jitter_px: 40, ..ok.clone() },
        DomainSpec { splits: [0, 0, 0], ..ok.clone() },
    ];
    for (i, spec) in cases.iter().enumerate() {
        assert!(matches!(make_domain(spec), Err(TaskError::InvalidSpec(_))), "case {i}");
    }
}
