use super::*;
use crate::oracle;
use proptest::prelude::*;
use rand::Rng;

fn hist(v: &[f64]) -> GlobalHistogram {
    GlobalHistogram { bins: v.to_vec() }
}

#[test]
fn kmeans_single_cluster_is_mean() {
    let points = vec![hist(&[0.0, 1.0]), hist(&[1.0, 0.0]), hist(&[0.5, 0.5]), hist(&[0.1, 0.9])];
    let fit = kmeans_fit(&points, 1, 7, 50).unwrap();
    let mean = [0.4, 0.6];
    for (c, m) in fit.model.centroids[0].iter().zip(mean) {
        assert!((c - m).abs() < 1e-12);
    }
    assert!(fit.assignments.iter().all(|&a| a == 0));
}

#[test]
fn kmeans_k_equals_n() {
    let points: Vec<GlobalHistogram> =
        (0..5).map(|i| hist(&[i as f64, (5 - i) as f64])).collect();
    let fit = kmeans_fit(&points, 5, 3, 50).unwrap();
    assert_eq!(*fit.distortion_trace.last().unwrap(), 0.0);
    let mut seen = fit.assignments.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 5, "each point must own a centroid");
}

#[test]
fn kmeans_too_few_points() {
    let points = vec![hist(&[1.0])];
    assert!(matches!(kmeans_fit(&points, 2, 0, 10), Err(Error::TooFewPoints { .. })));
}

#[test]
fn kmeans_matches_bruteforce_two_groups() {
    // Two well-separated tint groups of 5 points each: the k-means partition
    // must match the exhaustively optimal 2-partition.
    let mut points = Vec::new();
    for i in 0..5 {
        points.push(hist(&[0.1 + 0.01 * i as f64, 0.9 - 0.01 * i as f64, 0.0]));
    }
    for i in 0..5 {
        points.push(hist(&[0.9 - 0.01 * i as f64, 0.0, 0.1 + 0.01 * i as f64]));
    }
    let raw: Vec<Vec<f64>> = points.iter().map(|p| p.bins.clone()).collect();
    let (oracle_assign, _) = oracle::optimal_two_partition(&raw);

    let fit = kmeans_fit(&points, 2, 11, 100).unwrap();
    // Compare partitions up to label swap.
    let direct = fit.assignments == oracle_assign;
    let swapped: Vec<usize> = fit.assignments.iter().map(|&a| 1 - a).collect();
    assert!(direct || swapped == oracle_assign, "partition differs from brute-force optimum");
}

proptest! {
    #[test]
    fn kmeans_distortion_non_increasing(seed in 0u64..200, k in 1usize..5) {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let points: Vec<GlobalHistogram> =
            (0..12).map(|_| hist(&[next(), next(), next()])).collect();
        let fit = kmeans_fit(&points, k, seed, 50).unwrap();
        for w in fit.distortion_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "trace {:?}", fit.distortion_trace);
        }
    }

    #[test]
    fn forest_predictions_within_target_range(seed in 0u64..50) {
        let mut s = seed.wrapping_add(1);
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let samples: Vec<Vec<f64>> = (0..40).map(|_| vec![next(), next(), next()]).collect();
        let targets: Vec<f64> = (0..40).map(|_| if next() > 0.5 { 1.0 } else { 0.0 }).collect();
        let lo = targets.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let params = ForestParams { trees: 5, max_depth: 4, min_leaf: 2, features_per_split: None };
        let forest = forest_train(&samples, &targets, &params, seed).unwrap();
        for _ in 0..20 {
            let probe = vec![next(), next(), next()];
            let p = forest.predict(&probe);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}

#[test]
fn forest_constant_targets() {
    let samples: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let ones = vec![1.0; 20];
    let zeros = vec![0.0; 20];
    let params = ForestParams::default();
    let f1 = forest_train(&samples, &ones, &params, 0).unwrap();
    let f0 = forest_train(&samples, &zeros, &params, 0).unwrap();
    for i in 0..20 {
        assert_eq!(f1.predict(&samples[i]), 1.0);
        assert_eq!(f0.predict(&samples[i]), 0.0);
    }
}

#[test]
fn forest_empty_samples_error() {
    assert!(forest_train(&[], &[], &ForestParams::default(), 0).is_err());
}

#[test]
fn forest_separable_blobs_high_auc() {
    // Two Gaussian-ish color blobs, labels by blob: training AUC >= 0.99
    // verified with the exact pair-counting AUC.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut samples = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..120 {
        let skin = rng.gen_bool(0.5);
        let center: [f64; 3] = if skin { [0.8, 0.55, 0.45] } else { [0.3, 0.4, 0.7] };
        let jitter = 0.06;
        samples.push(vec![
            center[0] + (rng.gen::<f64>() - 0.5) * jitter,
            center[1] + (rng.gen::<f64>() - 0.5) * jitter,
            center[2] + (rng.gen::<f64>() - 0.5) * jitter,
        ]);
        targets.push(if skin { 1.0 } else { 0.0 });
    }
    let params = ForestParams { trees: 10, max_depth: 6, min_leaf: 2, features_per_split: None };
    let forest = forest_train(&samples, &targets, &params, 9).unwrap();
    let scores: Vec<f64> = samples.iter().map(|s| forest.predict(s)).collect();
    let labels: Vec<bool> = targets.iter().map(|&t| t == 1.0).collect();
    let auc = oracle::exact_auc(&scores, &labels);
    assert!(auc >= 0.99, "training AUC {auc}");
}

// --- bank helpers -----------------------------------------------------------

fn skin_rgb() -> [u8; 3] {
    [205, 150, 125]
}

fn bg_rgb() -> [u8; 3] {
    [60, 90, 160]
}

/// 40x40 scene with a centered skin square on a plain background, optionally
/// channel-tinted.
fn blob_scene(tint: [f64; 3]) -> (ImageRGB, BinaryMask) {
    let apply = |rgb: [u8; 3]| -> [u8; 3] {
        [
            (rgb[0] as f64 * tint[0]).clamp(0.0, 255.0) as u8,
            (rgb[1] as f64 * tint[1]).clamp(0.0, 255.0) as u8,
            (rgb[2] as f64 * tint[2]).clamp(0.0, 255.0) as u8,
        ]
    };
    let in_blob = |x: usize, y: usize| (12..28).contains(&x) && (12..28).contains(&y);
    let img = ImageRGB::from_fn(40, 40, |x, y| {
        if in_blob(x, y) {
            apply(skin_rgb())
        } else {
            apply(bg_rgb())
        }
    });
    let mask = BinaryMask::from_fn(40, 40, |x, y| in_blob(x, y));
    (img, mask)
}

fn tiny_corpus() -> Vec<(ImageRGB, BinaryMask)> {
    (0..6).map(|i| blob_scene([1.0 - 0.02 * i as f64, 1.0, 1.0])).collect()
}

fn quick_params(k: usize) -> BankTrainParams {
    BankTrainParams {
        k,
        kmeans_max_iters: 50,
        forest: ForestParams { trees: 8, max_depth: 8, min_leaf: 2, features_per_split: None },
        samples_per_image: 120,
    }
}

#[test]
fn bank_single_image_k1_centroid_is_histogram() {
    let corpus = vec![blob_scene([1.0, 1.0, 1.0])];
    let feature = FeatureConfig::default();
    let bank = bank_train(&corpus, &quick_params(1), &feature, 5).unwrap();
    let expected = global_hsv_histogram(&corpus[0].0, feature.hist_bins);
    assert_eq!(bank.kmeans.centroids[0], expected.bins);
}

#[test]
fn bank_forest_count_equals_k() {
    let corpus = tiny_corpus();
    let bank = bank_train(&corpus, &quick_params(3), &FeatureConfig::default(), 1).unwrap();
    assert_eq!(bank.forests.len(), 3);
    assert_eq!(bank.cluster_sizes.iter().sum::<usize>(), corpus.len());
}

#[test]
fn bank_two_tints_split_clusters() {
    // Warm and cool tinted copies of one scene: the two tint groups must
    // land in different clusters.
    let mut corpus = Vec::new();
    for i in 0..4 {
        corpus.push(blob_scene([1.3 - 0.01 * i as f64, 1.0, 0.55]));
    }
    for i in 0..4 {
        corpus.push(blob_scene([0.45 + 0.01 * i as f64, 0.9, 1.4]));
    }
    let feature = FeatureConfig::default();
    let hists: Vec<GlobalHistogram> =
        corpus.iter().map(|(img, _)| global_hsv_histogram(img, feature.hist_bins)).collect();
    let fit = kmeans_fit(&hists, 2, 2, 100).unwrap();
    let warm = fit.assignments[0];
    assert!(fit.assignments[..4].iter().all(|&a| a == warm));
    assert!(fit.assignments[4..].iter().all(|&a| a != warm));
}

#[test]
fn bank_errors() {
    assert!(matches!(
        bank_train(&[], &quick_params(1), &FeatureConfig::default(), 0),
        Err(Error::InvalidInput(_))
    ));
    let img = ImageRGB::from_fn(20, 20, |_, _| bg_rgb());
    let empty = BinaryMask::new(20, 20);
    assert!(matches!(
        bank_train(&[(img, empty)], &quick_params(1), &FeatureConfig::default(), 0),
        Err(Error::NoPositivePixels)
    ));
}

#[test]
fn bank_k1_reduces_to_single_global_forest() {
    // Regression test guarding the clustering layer: with K = 1 the bank's
    // only forest must be exactly the forest trained on the concatenated
    // per-image samples.
    let corpus = tiny_corpus();
    let feature = FeatureConfig::default();
    let params = quick_params(1);
    let seed = 33u64;
    let bank = bank_train(&corpus, &params, &feature, seed).unwrap();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (img, mask)) in corpus.iter().enumerate() {
        let (x, y) =
            image_training_samples(img, mask, &feature, params.samples_per_image, seed.wrapping_add(i as u64));
        xs.extend(x);
        ys.extend(y);
    }
    let manual = forest_train(&xs, &ys, &params.forest, seed).unwrap();
    assert_eq!(bank.forests[0], manual);
}

#[test]
fn predict_skin_in_unit_interval_and_blob_separation() {
    let corpus = tiny_corpus();
    let feature = FeatureConfig::default();
    let bank = bank_train(&corpus, &quick_params(2), &feature, 17).unwrap();
    let (img, mask) = blob_scene([0.99, 1.0, 1.0]);
    let map = predict_skin(&img, &bank, 1);
    assert!(!map.color_only);
    assert!(map.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));

    // Thresholds frozen after empirical verification on this corpus.
    let mut on = (0.0, 0usize);
    let mut off = (0.0, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                on = (on.0 + map.get(x, y), on.1 + 1);
            } else {
                off = (off.0 + map.get(x, y), off.1 + 1);
            }
        }
    }
    let mean_on = on.0 / on.1 as f64;
    let mean_off = off.0 / off.1 as f64;
    assert!(mean_on >= 0.8, "mean prob on blob {mean_on}");
    assert!(mean_off <= 0.2, "mean prob off blob {mean_off}");
}

#[test]
fn predict_skin_identical_forests_ignore_histogram() {
    // With every cluster holding the same forest, blending degenerates and
    // the output cannot depend on which centroid is nearest.
    let corpus = tiny_corpus();
    let feature = FeatureConfig::default();
    let mut bank = bank_train(&corpus, &quick_params(2), &feature, 3).unwrap();
    bank.forests[1] = bank.forests[0].clone();
    let mut moved = bank.clone();
    // Swap centroids so the nearest cluster flips for any query.
    moved.kmeans.centroids.swap(0, 1);

    let (img, _) = blob_scene([1.0, 0.97, 1.02]);
    let a = predict_skin(&img, &bank, 1);
    let b = predict_skin(&img, &moved, 1);
    assert_eq!(a.probs, b.probs);
}

#[test]
fn predict_skin_small_region_color_only() {
    let corpus = tiny_corpus();
    let bank = bank_train(&corpus, &quick_params(1), &FeatureConfig::default(), 3).unwrap();
    let small = ImageRGB::from_fn(8, 8, |_, _| skin_rgb());
    let map = predict_skin(&small, &bank, 1);
    assert!(map.color_only);
    assert_eq!(map.probs.len(), 64);
    assert!(map.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn threshold_mask_conventions() {
    let map = SkinProbabilityMap { width: 3, height: 1, probs: vec![0.2, 0.7, 0.5], color_only: false };
    let at_half = threshold_mask(&map, 0.5);
    assert_eq!(at_half.bits(), &[false, true, true]);
    let at_zero = threshold_mask(&map, 0.0);
    assert!(at_zero.bits().iter().all(|&b| b));
    let at_one = threshold_mask(&map, 1.0);
    assert!(at_one.bits().iter().all(|&b| !b));
}

#[test]
fn bank_serialization_bit_exact_round_trip() {
    let corpus = tiny_corpus();
    let bank = bank_train(&corpus, &quick_params(2), &FeatureConfig::default(), 8).unwrap();
    let bytes = bank.to_json().unwrap();
    let reloaded = IlluminationModelBank::from_json(&bytes).unwrap();
    let bytes2 = reloaded.to_json().unwrap();
    assert_eq!(bytes, bytes2, "serialize -> deserialize -> serialize must be byte-identical");
    assert_eq!(bank, reloaded);
}

#[test]
fn bank_training_is_deterministic() {
    let corpus = tiny_corpus();
    let a = bank_train(&corpus, &quick_params(2), &FeatureConfig::default(), 21).unwrap();
    let b = bank_train(&corpus, &quick_params(2), &FeatureConfig::default(), 21).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let (img, _) = blob_scene([1.0, 1.0, 1.0]);
    assert_eq!(predict_skin(&img, &a, 1).probs, predict_skin(&img, &b, 1).probs);
}

#[test]
fn bank_rejects_wrong_magic() {
    let corpus = vec![blob_scene([1.0, 1.0, 1.0])];
    let bank = bank_train(&corpus, &quick_params(1), &FeatureConfig::default(), 0).unwrap();
    let mut json: serde_json::Value = serde_json::from_slice(&bank.to_json().unwrap()).unwrap();
    json["magic"] = serde_json::Value::String("something.else".into());
    let bytes = serde_json::to_vec(&json).unwrap();
    assert!(matches!(IlluminationModelBank::from_json(&bytes), Err(Error::ModelFormat(_))));
}
