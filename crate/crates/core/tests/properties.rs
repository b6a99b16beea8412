mod common;

use balancegen::classifier::{
    choose_mixup_source, mix_with, sigma_schedule, Batch, Direction, MixupSource, TrainingSchedule,
};
use balancegen::datasets::{
    class_histogram, split, stratified_subsample, DatasetManifest, Keypoint, SampleRecord, Split,
    NUM_KEYPOINTS,
};
use balancegen::experiments::ExperimentConfig;
use balancegen::gan::{d2dce_loss, D2dceParams};
use balancegen::metrics::{density_coverage, fid, inception_score, FeatureMatrix};
use balancegen::pose::{render_bones, render_joints, HandPose, HandSkeleton};
use balancegen::synthesis::{filter_topk, keep_count};
use proptest::prelude::*;
use rand::Rng;
use tch::{Kind, Tensor};

use common::*;

fn manifest_with_counts(counts: &[usize]) -> DatasetManifest {
    let mut m = DatasetManifest::new(counts.len(), (8, 8));
    for (label, &n) in counts.iter().enumerate() {
        for i in 0..n {
            m.records.push(SampleRecord {
                sample_id: format!("c{label}_{i}"),
                image_path: format!("img/{label}_{i}.png").into(),
                label,
                split: Split::Train,
                keypoints: None,
            });
        }
    }
    m
}

fn tensor_rows(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len() as i64;
    Tensor::from_slice(&rows.concat()).view([-1, d]).to_kind(Kind::Float)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sigma_moves_monotonically(alpha in 0.0f64..=1.0, beta in 0.0f64..=2.0, e in 0u32..200, step in 1u32..50) {
        let up = TrainingSchedule::new(Direction::Increasing, alpha, beta).unwrap();
        let down = TrainingSchedule::new(Direction::Decreasing, alpha, beta).unwrap();
        let (a, b) = (e as f64, (e + step) as f64);
        prop_assert!(sigma_schedule(b, &up) >= sigma_schedule(a, &up));
        prop_assert!(sigma_schedule(b, &down) <= sigma_schedule(a, &down));
        for s in [&up, &down] {
            let v = sigma_schedule(a, s);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(sigma_schedule(0.0, &up), alpha);
        prop_assert_eq!(sigma_schedule(0.0, &down), alpha);
    }

    #[test]
    fn mixup_targets_stay_distributions(seed in any::<u64>(), n in 1usize..16, c in 2usize..8) {
        let mut r = rng(seed);
        let la: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let lb: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let lambdas: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
        let xa = Tensor::rand([n as i64, 3, 2, 2], (Kind::Float, tch::Device::Cpu));
        let xb = Tensor::rand([n as i64, 3, 2, 2], (Kind::Float, tch::Device::Cpu));
        let a = Batch::one_hot(xa, &la, c);
        let b = Batch::one_hot(xb, &lb, c);
        let mixed = mix_with(&a, &b, &lambdas).unwrap();
        let sums = Vec::<f64>::try_from(mixed.targets.sum_dim_intlist([1i64].as_slice(), false, Kind::Double)).unwrap();
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        prop_assert!(mix_with(&a, &b, &ones).unwrap().images.equal(&a.images));
        prop_assert!(mix_with(&a, &b, &zeros).unwrap().targets.equal(&b.targets));
    }

    #[test]
    fn filter_matches_sort_reference(seed in any::<u64>(), num in 1u64..=20, c in 1usize..6) {
        let den = 20;
        let mut r = rng(seed);
        let items = random_scored(&mut r, 300, c);
        let ds = scored_dataset(&items, c);
        let fraction = num as f64 / den as f64;
        let out = filter_topk(&ds, fraction).unwrap();
        prop_assert_eq!(kept_indices(&out), filter_reference(&items, c, num, den));
        let again = filter_topk(&ds, fraction).unwrap();
        prop_assert_eq!(kept_indices(&again), kept_indices(&out));
        prop_assert_eq!(filter_topk(&ds, 1.0).unwrap().samples, ds.samples.clone());
    }

    #[test]
    fn keep_count_is_integer_ceiling(num in 1u64..=100, den in 1u64..=100, n in 1usize..2000) {
        prop_assume!(num <= den);
        let expected = ((num * n as u64).div_ceil(den) as usize).max(1);
        prop_assert_eq!(keep_count(num as f64 / den as f64, n), expected);
    }

    #[test]
    fn d2dce_matches_pairwise_reference(seed in any::<u64>(), n in 1usize..=16, k in 1usize..5, d in 2usize..8) {
        let mut r = rng(seed);
        let emb = unit_vectors(&mut r, n, d);
        let proxies = unit_vectors(&mut r, k, d);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let params = D2dceParams::default();
        let expected = d2dce_reference(&emb, &labels, &proxies, params.temperature, params.margin_positive, params.margin_negative);
        let lt = Tensor::from_slice(&labels.iter().map(|&l| l as i64).collect::<Vec<_>>());
        let got = d2dce_loss(
            &tensor_rows(&emb),
            &lt,
            &tensor_rows(&proxies),
            &params,
        ).unwrap().double_value(&[]);
        prop_assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn inception_score_matches_definition(seed in any::<u64>(), n in 2usize..40, c in 2usize..8) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..c).map(|_| r.gen::<f64>().powi(3)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let (mean, _) = inception_score(&rows, 1).unwrap();
        prop_assert!((mean - inception_reference(&rows)).abs() < 1e-9);
        prop_assert!(mean >= 1.0 && mean <= c as f64);
    }

    #[test]
    fn density_coverage_counts_match(seed in any::<u64>(), n in 6usize..60, m in 1usize..60, k in 1usize..=5, d in 1usize..4) {
        let mut r = rng(seed);
        let real = gaussian_rows(&mut r, n, d, &[]);
        let gen = gaussian_rows(&mut r, m, d, &[0.3]);
        let (density, coverage) = density_coverage(
            &FeatureMatrix::from_rows(&real, "e").unwrap(),
            &FeatureMatrix::from_rows(&gen, "e").unwrap(),
            k,
        ).unwrap();
        let (inside, covered) = density_coverage_counts(&real, &gen, k);
        prop_assert_eq!((density * (k * m) as f64).round() as usize, inside);
        prop_assert_eq!((coverage * n as f64).round() as usize, covered);
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_itself(seed in any::<u64>(), n in 20usize..80, d in 1usize..5) {
        let mut r = rng(seed);
        let a = FeatureMatrix::from_rows(&gaussian_rows(&mut r, n, d, &[]), "e").unwrap();
        let b = FeatureMatrix::from_rows(&gaussian_rows(&mut r, n, d, &[0.5]), "e").unwrap();
        prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
        prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn subsample_caps_and_nests(counts in prop::collection::vec(0usize..30, 1..6), k1 in 1usize..10, extra in 0usize..10, seed in any::<u64>()) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let m = manifest_with_counts(&counts);
        let k2 = k1 + extra;
        let small = stratified_subsample(&m, k1, seed).unwrap();
        let large = stratified_subsample(&m, k2, seed).unwrap();
        let hist = class_histogram(&small, Split::Train).unwrap();
        let expected: Vec<usize> = counts.iter().map(|&c| c.min(k1)).collect();
        prop_assert_eq!(hist.counts, expected);
        let large_ids: std::collections::HashSet<_> = large.records.iter().map(|r| r.sample_id.clone()).collect();
        prop_assert!(small.records.iter().all(|r| large_ids.contains(&r.sample_id)));
    }

    #[test]
    fn split_partitions_every_class(counts in prop::collection::vec(1usize..40, 1..6), seed in any::<u64>()) {
        let m = manifest_with_counts(&counts);
        let out = split(&m, (0.7, 0.15, 0.15), seed).unwrap();
        prop_assert_eq!(out.records.len(), m.records.len());
        let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| out.count(s)).sum();
        prop_assert_eq!(total, m.records.len());
        let train = class_histogram(&out, Split::Train).unwrap();
        prop_assert!(train.counts.iter().all(|&c| c >= 1));
        prop_assert_eq!(split(&m, (0.7, 0.15, 0.15), seed).unwrap(), out);
    }

    #[test]
    fn flipped_pose_renders_mirrored_map(seed in any::<u64>(), half in 4usize..20, sigma in 0.5f64..3.0) {
        let width = 2 * half + 1;
        let mut r = rng(seed);
        let kps: [(f64, f64); NUM_KEYPOINTS] = std::array::from_fn(|_| (r.gen(), r.gen()));
        let conf: [f64; NUM_KEYPOINTS] = std::array::from_fn(|_| r.gen_range(0.0..1.0));
        let pose = HandPose::new(kps, conf);
        let flipped = pose.flipped_horizontal();
        let j = render_joints(&pose, 17, width, sigma).unwrap();
        prop_assert_eq!(render_joints(&flipped, 17, width, sigma).unwrap(), j.mirrored());
        let b = render_bones(&pose, &HandSkeleton::default(), 17, width, 1.0 + sigma).unwrap();
        prop_assert_eq!(render_bones(&flipped, &HandSkeleton::default(), 17, width, 1.0 + sigma).unwrap(), b.mirrored());
    }
}

#[test]
fn mixup_branch_frequency_follows_sigma() {
    let schedule = TrainingSchedule::constant(0.3).unwrap();
    let mut r = rng(11);
    let n = 10_000;
    let real = (0..n)
        .filter(|_| choose_mixup_source(0, &schedule, r.gen()) == MixupSource::RealReal)
        .count();
    assert!((real as f64 / n as f64 - 0.3).abs() <= 0.02);
}

#[test]
fn keypoint_records_survive_split() {
    let mut m = manifest_with_counts(&[5, 5]);
    let kp = Keypoint { x: 0.25, y: 0.75, confidence: 0.5 };
    m.records[0].keypoints = Some([kp; NUM_KEYPOINTS]);
    let out = split(&m, (0.6, 0.2, 0.2), 3).unwrap();
    assert_eq!(out.records[0].keypoints, m.records[0].keypoints);
}

#[test]
fn config_round_trips_through_toml() {
    let mut config = ExperimentConfig::default();
    config.seed = 42;
    config.dataset.subsample_k = Some(10);
    config.synthesis.filter_fraction = Some(0.25);
    config.gan.train.lr_g = 1.5e-4;
    let text = config.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), config);
}
