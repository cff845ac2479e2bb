//! Clip files, manifests, episode sampling and the synthetic generator.

mod common;

use std::collections::HashMap;
use std::fs;

use common::{clip_from, random_clip, rng};
use proptest::prelude::*;
use strm_core::autodiff::Tensor;
use strm_core::episodes::{
    decode_clip, encode_clip, generate_synthetic, load_dataset, mean_pool_predictions, sample_episode, save_dataset,
    ClipRecord, Dataset, EpisodeSpec, FeatureClip, SyntheticGenerator, SyntheticSpec, CLIP_MAGIC, MANIFEST_NAME,
};
use strm_core::Error;

fn tiny_dataset(classes: u32, per_class: usize) -> Dataset {
    let clips = (0..classes)
        .flat_map(|l| {
            (0..per_class).map(move |i| clip_from(&format!("k{l:02}_{i}"), l, 2, 1, 1, vec![l as f64, i as f64]))
        })
        .collect();
    Dataset::new(clips).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clip_round_trip_is_exact_on_f32_values(
        label in any::<u32>(),
        frames in 1usize..4,
        patches in 1usize..4,
        dim in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let values: Vec<f64> = (0..frames * patches * dim)
            .map(|_| f64::from(r.random_range(-1e6f32..1e6)))
            .collect();
        let clip = clip_from("x", label, frames, patches, dim, values);
        let back = decode_clip(&encode_clip(&clip), "x").unwrap();
        prop_assert_eq!(back, clip);
    }
}

#[test]
fn damaged_clip_files_fail_distinctly() {
    let clip = random_clip(&mut rng(0), "x", 3, 2, 2, 2);
    let bytes = encode_clip(&clip);

    assert!(matches!(decode_clip(&bytes[..10], "x"), Err(Error::Truncated { .. })));
    assert!(matches!(
        decode_clip(&bytes[..bytes.len() - 4], "x"),
        Err(Error::Truncated { expected: 32, found: 28 })
    ));

    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(matches!(decode_clip(&extra, "x"), Err(Error::TrailingBytes(4))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_clip(&magic, "x"), Err(Error::BadMagic { expected, .. }) if expected == CLIP_MAGIC));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_clip(&version, "x"), Err(Error::UnsupportedVersion { found: 9, .. })));

    let mut huge = bytes.clone();
    huge[12..24].fill(0xff);
    assert!(matches!(decode_clip(&huge, "x"), Err(Error::ExtentOverflow { .. })));
}

#[test]
fn dataset_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let clips: Vec<ClipRecord> = (0..6)
        .map(|i| {
            let c = random_clip(&mut r, &format!("clip{i}"), i % 3, 3, 2, 2);
            decode_clip(&encode_clip(&c), &c.clip_id).unwrap()
        })
        .collect();
    save_dataset(&clips, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.clips(), Dataset::new(clips.clone()).unwrap().clips());
    let via_file = load_dataset(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(via_file.clips(), loaded.clips());
}

#[test]
fn manifest_label_mismatch_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let clips = vec![random_clip(&mut rng(1), "a", 0, 2, 1, 1), random_clip(&mut rng(2), "b", 1, 2, 1, 1)];
    let manifest = save_dataset(&clips, dir.path()).unwrap();
    fs::write(&manifest, "a.stfb\t0\nb.stfb\t7\n").unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected manifest error, got {other:?}"),
    }
    fs::write(&manifest, "a.stfb 0\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest { line: 1, .. })));
    fs::write(&manifest, "missing.stfb\t0\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn dataset_order_does_not_depend_on_input_order() {
    let mut r = rng(5);
    let clips: Vec<ClipRecord> = (0..12).map(|i| random_clip(&mut r, &format!("{i:02}"), i % 4, 2, 1, 2)).collect();
    let mut reversed = clips.clone();
    reversed.reverse();
    let (a, b) = (Dataset::new(clips).unwrap(), Dataset::new(reversed).unwrap());
    let spec = EpisodeSpec { ways: 3, shots: 1, queries_per_class: 1, seed: 9 };
    for n in 0..20 {
        let (ea, eb) = (sample_episode(&a, &spec, n).unwrap(), sample_episode(&b, &spec, n).unwrap());
        assert_eq!(ea.classes, eb.classes);
        let ids = |e: &strm_core::episodes::Episode<'_>| {
            e.support.iter().flatten().chain(e.queries.iter().map(|q| &q.clip)).map(|c| c.clip_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&ea), ids(&eb));
    }
}

#[test]
fn class_frequencies_are_uniform() {
    let data = tiny_dataset(24, 2);
    let spec = EpisodeSpec { ways: 5, shots: 1, queries_per_class: 1, seed: 11 };
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let n = 10_000;
    for i in 0..n {
        for c in sample_episode(&data, &spec, i).unwrap().classes {
            *counts.entry(c).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 24);
    for (class, count) in counts {
        let freq = count as f64 / n as f64;
        assert!((freq - 5.0 / 24.0).abs() <= 0.02, "class {class}: {freq}");
    }
}

#[test]
fn episodes_have_distinct_classes_and_disjoint_clips() {
    let data = tiny_dataset(8, 6);
    let spec = EpisodeSpec { ways: 5, shots: 3, queries_per_class: 2, seed: 1 };
    for i in 0..200 {
        let e = sample_episode(&data, &spec, i).unwrap();
        let mut classes = e.classes.clone();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), 5);
        let mut ids: Vec<&str> = e.support.iter().flatten().map(|c| c.clip_id.as_str()).collect();
        ids.extend(e.queries.iter().map(|q| q.clip.clip_id.as_str()));
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        for q in &e.queries {
            assert_eq!(q.clip.label, e.classes[q.target]);
        }
        for (way, s) in e.support.iter().enumerate() {
            assert!(s.iter().all(|c| c.label == e.classes[way]));
        }
    }
}

#[test]
fn sampling_errors_name_the_problem() {
    let data = tiny_dataset(4, 3);
    let too_many_ways = EpisodeSpec { ways: 5, shots: 1, queries_per_class: 1, seed: 0 };
    assert!(matches!(
        sample_episode(&data, &too_many_ways, 0),
        Err(Error::InsufficientClasses { available: 4, needed: 5 })
    ));
    let too_many_shots = EpisodeSpec { ways: 2, shots: 3, queries_per_class: 1, seed: 0 };
    assert!(matches!(
        sample_episode(&data, &too_many_shots, 0),
        Err(Error::InsufficientClips { available: 3, needed: 4, .. })
    ));
    let one_way = EpisodeSpec { ways: 1, shots: 1, queries_per_class: 1, seed: 0 };
    assert!(sample_episode(&data, &one_way, 0).is_err());
}

fn mean_feature(c: &ClipRecord) -> Vec<f64> {
    let f = &c.features;
    let rows = (f.frames * f.patches) as f64;
    (0..f.dim)
        .map(|d| f.values.data().iter().skip(d).step_by(f.dim).sum::<f64>() / rows)
        .collect()
}

fn mean_pool_oracle(e: &strm_core::episodes::Episode<'_>) -> Vec<usize> {
    let centers: Vec<Vec<f64>> = e
        .support
        .iter()
        .map(|s| {
            let vs: Vec<Vec<f64>> = s.iter().map(|c| mean_feature(c)).collect();
            (0..vs[0].len()).map(|d| vs.iter().map(|v| v[d]).sum::<f64>() / vs.len() as f64).collect()
        })
        .collect();
    e.queries
        .iter()
        .map(|q| {
            let m = mean_feature(q.clip);
            let dist = |c: &Vec<f64>| c.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            for (i, c) in centers.iter().enumerate() {
                if dist(c) < dist(&centers[best]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn mean_pool_accuracy(data: &Dataset, episodes: u64) -> f64 {
    let spec = EpisodeSpec { ways: 5, shots: 5, queries_per_class: 1, seed: 21 };
    let (mut right, mut total) = (0usize, 0usize);
    for i in 0..episodes {
        let e = sample_episode(data, &spec, i).unwrap();
        let preds = mean_pool_predictions(&e);
        assert_eq!(preds, mean_pool_oracle(&e));
        right += preds.iter().zip(&e.queries).filter(|(p, q)| **p == q.target).count();
        total += preds.len();
    }
    right as f64 / total as f64
}

#[test]
fn mean_features_carry_no_class_signal() {
    let spec = SyntheticSpec { num_classes: 5, ..SyntheticSpec::default() };
    let data = Dataset::new(generate_synthetic(&spec).unwrap()).unwrap();
    let acc = mean_pool_accuracy(&data, 1000);
    assert!((acc - 0.2).abs() <= 0.05, "mean-pool accuracy {acc}");
}

#[test]
fn identical_orders_make_classes_indistinguishable() {
    let spec = SyntheticSpec {
        num_classes: 5,
        permutation_seeds: Some(vec![3; 5]),
        ..SyntheticSpec::default()
    };
    let g = SyntheticGenerator::new(spec).unwrap();
    for c in 1..5 {
        assert_eq!(g.prototype_sequence(c), g.prototype_sequence(0));
    }
    let data = Dataset::new(g.generate()).unwrap();
    let acc = mean_pool_accuracy(&data, 1000);
    assert!((acc - 0.2).abs() <= 0.05, "mean-pool accuracy {acc}");
}

#[test]
fn synthetic_classes_share_frames_in_different_orders() {
    let g = SyntheticGenerator::new(SyntheticSpec::default()).unwrap();
    let frames = g.spec().frames;
    let sorted_rows = |c: usize| {
        let seq = g.prototype_sequence(c);
        let mut rows: Vec<Vec<f64>> = (0..frames).map(|r| seq.row(r).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    };
    let reference = sorted_rows(0);
    let mut orders = Vec::new();
    for c in 0..g.spec().num_classes {
        assert_eq!(sorted_rows(c), reference);
        orders.push(g.permutation(c));
    }
    orders.sort();
    orders.dedup();
    assert_eq!(orders.len(), g.spec().num_classes);
}

#[test]
fn synthetic_marginals_match_spec() {
    let spec = SyntheticSpec::default();
    let g = SyntheticGenerator::new(spec.clone()).unwrap();
    let bank: Vec<f64> = g.bank().iter().flatten().copied().collect();
    let bank_std = (bank.iter().map(|v| v * v).sum::<f64>() / bank.len() as f64).sqrt();
    assert!((bank_std - spec.motif_strength).abs() < 0.03, "bank std {bank_std}");

    let mut residuals = Vec::new();
    for c in 0..spec.num_classes {
        let proto = g.prototype_sequence(c);
        for i in 0..spec.clips_per_class {
            let clip = g.clip(c, i);
            let f = &clip.features;
            for t in 0..f.frames {
                for (k, v) in f.frame(t).iter().enumerate() {
                    residuals.push(v - proto.row(t)[k % f.dim]);
                }
            }
        }
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.005, "noise mean {mean}");
    assert!((std - spec.noise_sigma).abs() < 0.005, "noise std {std}");
}

#[test]
fn synthetic_generation_is_deterministic_and_f32_exact() {
    let spec = SyntheticSpec { num_classes: 3, clips_per_class: 2, ..SyntheticSpec::default() };
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    for c in &a {
        assert_eq!(decode_clip(&encode_clip(c), &c.clip_id).unwrap(), *c);
    }
    let other = SyntheticSpec { seed: spec.seed + 1, ..spec.clone() };
    assert_ne!(a, generate_synthetic(&other).unwrap());
    assert!(generate_synthetic(&SyntheticSpec { frames: 1, ..spec }).is_err());
}

#[test]
fn feature_clip_requires_rank_three() {
    assert!(FeatureClip::new(Tensor::zeros(&[2, 3])).is_err());
}
