//! Global appearance modeling: k-means over global HSV histograms groups
//! training images into illumination clusters, and a separate random-forest
//! skin regressor is learned per cluster. At inference the region's
//! histogram selects the nearest cluster(s) and the forest ensemble emits a
//! per-pixel skin probability map.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imagecore::{BinaryMask, ImageRGB};
use crate::pixelfeat::{
    global_hsv_histogram, pixel_descriptors, pixel_descriptors_color_only, DescriptorGrid,
    FeatureConfig, GlobalHistogram,
};
use crate::{Error, Result};

pub const BANK_MAGIC: &str = "handscan.bank";
pub const BANK_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
}

impl KMeansModel {
    /// Index of the nearest centroid (squared Euclidean).
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest_centroid(&self.centroids, point).0
    }

    /// Centroid indices sorted by distance ascending, with distances.
    pub fn ranked(&self, point: &[f64]) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> =
            self.centroids.iter().enumerate().map(|(i, c)| (i, dist_sq(c, point))).collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        ranked
    }
}

/// Result of a k-means fit: the model, the final hard assignments, and the
/// distortion measured after every assignment step (non-increasing).
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub assignments: Vec<usize>,
    pub distortion_trace: Vec<f64>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist_sq(c, point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ initialization. Empty clusters are
/// repaired by stealing the point farthest from its current centroid.
pub fn kmeans_fit(
    points: &[GlobalHistogram],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansFit> {
    assert!(max_iters >= 1, "max_iters must be >= 1");
    assert!(k >= 1, "k must be >= 1");
    let n = points.len();
    if n < k {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let dim = points[0].bins.len();
    for p in points {
        if p.bins.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.bins.len() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].bins.clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(&p.bins, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // All remaining mass at distance zero (duplicate points).
            rng.gen_range(0..n)
        };
        centroids.push(points[next].bins.clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist_sq(&p.bins, centroids.last().unwrap()));
        }
    }

    let assign_all = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut assignments = vec![0usize; n];
        let mut distortion = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(centroids, &p.bins);
            assignments[i] = c;
            distortion += d;
        }
        (assignments, distortion)
    };

    let (mut assignments, initial_distortion) = assign_all(&centroids);
    let mut trace = vec![initial_distortion];

    for _ in 0..max_iters {
        // Means of the current assignment; empty clusters keep their
        // previous centroid until repaired below.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&points[i].bins) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }

        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point whose donor cluster keeps at least one member.
            let mut far: Option<(usize, f64)> = None;
            for (i, &a) in assignments.iter().enumerate() {
                if counts[a] < 2 {
                    continue;
                }
                let d = dist_sq(&points[i].bins, &centroids[a]);
                if far.map_or(true, |(_, fd)| d > fd) {
                    far = Some((i, d));
                }
            }
            if let Some((i, _)) = far {
                counts[assignments[i]] -= 1;
                centroids[c] = points[i].bins.clone();
                assignments[i] = c;
                counts[c] = 1;
            }
        }

        let (new_assignments, new_distortion) = assign_all(&centroids);
        trace.push(new_distortion);
        let stable = new_assignments == assignments;
        assignments = new_assignments;
        if stable || new_distortion <= 1e-30 {
            break;
        }
    }

    Ok(KMeansFit {
        model: KMeansModel { k, centroids, seed },
        assignments,
        distortion_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Random-forest regressor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; None selects ceil(sqrt(d)).
    pub features_per_split: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { trees: 30, max_depth: 12, min_leaf: 5, features_per_split: None }
    }
}

/// Binary decision tree as parallel arrays; `feature[i] < 0` marks a leaf
/// whose prediction is `value[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let f = self.feature[i];
            if f < 0 {
                return self.value[i];
            }
            i = if x[f as usize] < self.threshold[i] {
                self.left[i] as usize
            } else {
                self.right[i] as usize
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestRegressor {
    pub params: ForestParams,
    pub seed: u64,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
}

impl RandomForestRegressor {
    /// Mean prediction over all trees; in [0, 1] for {0, 1} targets.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }
}

/// Trains a regression forest: each tree fits a bootstrap resample, choosing
/// at every node the best variance-reducing axis-aligned split among a
/// random feature subset. Tree i is seeded with `seed + i`, so the result is
/// independent of tree-training order.
pub fn forest_train(
    samples: &[Vec<f64>],
    targets: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<RandomForestRegressor> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if samples.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: samples.len(), got: targets.len() });
    }
    let d = samples[0].len();
    let m = params.features_per_split.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);

    let trees: Vec<DecisionTree> = (0..params.trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut idx: Vec<usize> =
                (0..samples.len()).map(|_| rng.gen_range(0..samples.len())).collect();
            let mut builder = TreeBuilder {
                x: samples,
                y: targets,
                params,
                m,
                rng,
                tree: DecisionTree {
                    feature: Vec::new(),
                    threshold: Vec::new(),
                    left: Vec::new(),
                    right: Vec::new(),
                    value: Vec::new(),
                },
            };
            builder.build(&mut idx, 0);
            builder.tree
        })
        .collect();

    Ok(RandomForestRegressor { params: *params, seed, n_features: d, trees })
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    m: usize,
    rng: ChaCha8Rng,
    tree: DecisionTree,
}

impl TreeBuilder<'_> {
    fn push_node(&mut self) -> usize {
        self.tree.feature.push(-1);
        self.tree.threshold.push(0.0);
        self.tree.left.push(0);
        self.tree.right.push(0);
        self.tree.value.push(0.0);
        self.tree.feature.len() - 1
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> u32 {
        let node = self.push_node();
        let n = idx.len() as f64;
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let sum2: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let mean = sum / n;
        let sse = sum2 - sum * sum / n;
        self.tree.value[node] = mean;

        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf || sse <= 1e-12 {
            return node as u32;
        }

        let d = self.x[0].len();
        let feats = rand::seq::index::sample(&mut self.rng, d, self.m.min(d));
        let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, sse)
        let mut order: Vec<usize> = Vec::with_capacity(idx.len());
        for f in feats.iter() {
            order.clear();
            order.extend_from_slice(idx);
            order.sort_unstable_by(|&a, &b| self.x[a][f].partial_cmp(&self.x[b][f]).unwrap());
            let mut sum_l = 0.0;
            let mut sum2_l = 0.0;
            for i in 0..order.len() - 1 {
                let yi = self.y[order[i]];
                sum_l += yi;
                sum2_l += yi * yi;
                let k = (i + 1) as f64;
                let va = self.x[order[i]][f];
                let vb = self.x[order[i + 1]][f];
                if va >= vb || i + 1 < self.params.min_leaf || order.len() - i - 1 < self.params.min_leaf
                {
                    continue;
                }
                let sse_l = sum2_l - sum_l * sum_l / k;
                let sse_r = (sum2 - sum2_l) - (sum - sum_l) * (sum - sum_l) / (n - k);
                let total = sse_l + sse_r;
                if best.map_or(true, |(_, _, b)| total < b) {
                    best = Some((f, (va + vb) / 2.0, total));
                }
            }
        }

        let Some((f, threshold, _)) = best else {
            return node as u32;
        };
        let split = partition(idx, |i| self.x[i][f] < threshold);
        let (left_idx, right_idx) = idx.split_at_mut(split);
        // Placeholder order: children appended after this node.
        self.tree.feature[node] = f as i32;
        self.tree.threshold[node] = threshold;
        let l = {
            let mut li = left_idx.to_vec();
            self.build(&mut li, depth + 1)
        };
        let r = {
            let mut ri = right_idx.to_vec();
            self.build(&mut ri, depth + 1)
        };
        self.tree.left[node] = l;
        self.tree.right[node] = r;
        node as u32
    }
}

/// Stable partition: predicate-true elements first; returns the boundary.
fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut out: Vec<usize> = Vec::with_capacity(idx.len());
    out.extend(idx.iter().copied().filter(|&i| pred(i)));
    let split = out.len();
    out.extend(idx.iter().copied().filter(|&i| !pred(i)));
    idx.copy_from_slice(&out);
    split
}

// ---------------------------------------------------------------------------
// Illumination model bank
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankTrainParams {
    pub k: usize,
    pub kmeans_max_iters: usize,
    pub forest: ForestParams,
    /// Cap on positive and (separately) negative samples per image.
    pub samples_per_image: usize,
}

impl Default for BankTrainParams {
    fn default() -> Self {
        Self { k: 10, kmeans_max_iters: 300, forest: ForestParams::default(), samples_per_image: 2000 }
    }
}

/// The trained global-appearance model: K histogram centroids plus one skin
/// regressor per cluster. Serialized as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationModelBank {
    pub magic: String,
    pub version: u32,
    pub feature: FeatureConfig,
    pub train_params: BankTrainParams,
    pub seed: u64,
    pub kmeans: KMeansModel,
    pub forests: Vec<RandomForestRegressor>,
    /// Images per cluster at training time, for the training log.
    pub cluster_sizes: Vec<usize>,
}

impl IlluminationModelBank {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let bank: IlluminationModelBank = serde_json::from_slice(bytes)?;
        if bank.magic != BANK_MAGIC {
            return Err(Error::ModelFormat(format!("bad magic {:?}", bank.magic)));
        }
        if bank.version != BANK_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {}", bank.version)));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }
}

/// Descriptor grid for an image, falling back to color-only descriptors
/// (SIFT block zeroed) when the image is smaller than the SIFT patch.
/// Returns the grid and whether the fallback was taken.
pub(crate) fn descriptor_grid_or_fallback(
    img: &ImageRGB,
    feature: &FeatureConfig,
) -> (DescriptorGrid, bool) {
    if img.width() < feature.patch || img.height() < feature.patch {
        (pixel_descriptors_color_only(img, feature), true)
    } else {
        (pixel_descriptors(img, feature).expect("patch fits"), false)
    }
}

/// Balanced per-image sampling of grid descriptors: up to `cap` positive and
/// `cap` negative grid points, chosen by seeded shuffle.
pub(crate) fn image_training_samples(
    img: &ImageRGB,
    mask: &BinaryMask,
    feature: &FeatureConfig,
    cap: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (grid, _) = descriptor_grid_or_fallback(img, feature);
    let mut pos: Vec<(usize, usize)> = Vec::new();
    let mut neg: Vec<(usize, usize)> = Vec::new();
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let (px, py) = grid.center(gx, gy);
            let px = px.min(img.width() - 1);
            let py = py.min(img.height() - 1);
            if mask.get(px, py) {
                pos.push((gx, gy));
            } else {
                neg.push((gx, gy));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subsample(&mut pos, cap, &mut rng);
    subsample(&mut neg, cap, &mut rng);

    let mut samples = Vec::with_capacity(pos.len() + neg.len());
    let mut targets = Vec::with_capacity(pos.len() + neg.len());
    for &(gx, gy) in &pos {
        samples.push(grid.descriptor(gx, gy).to_vec());
        targets.push(1.0);
    }
    for &(gx, gy) in &neg {
        samples.push(grid.descriptor(gx, gy).to_vec());
        targets.push(0.0);
    }
    (samples, targets)
}

fn subsample<T>(items: &mut Vec<T>, cap: usize, rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    if items.len() > cap {
        items.shuffle(rng);
        items.truncate(cap);
    }
}

/// Trains the full bank: global histograms, k-means into `params.k`
/// illumination clusters, and one forest per cluster on balanced pixel
/// samples. Clusters that receive no images get a forest trained on the
/// whole corpus.
pub fn bank_train(
    corpus: &[(ImageRGB, BinaryMask)],
    params: &BankTrainParams,
    feature: &FeatureConfig,
    seed: u64,
) -> Result<IlluminationModelBank> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    for (img, mask) in corpus {
        if img.width() != mask.width() || img.height() != mask.height() {
            return Err(Error::DimensionMismatch {
                expected: img.width() * img.height(),
                got: mask.width() * mask.height(),
            });
        }
    }
    if corpus.iter().all(|(_, m)| m.count_ones() == 0) {
        return Err(Error::NoPositivePixels);
    }

    let hists: Vec<GlobalHistogram> =
        corpus.par_iter().map(|(img, _)| global_hsv_histogram(img, feature.hist_bins)).collect();
    let km = kmeans_fit(&hists, params.k, seed, params.kmeans_max_iters)?;

    let per_image: Vec<(Vec<Vec<f64>>, Vec<f64>)> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, (img, mask))| {
            image_training_samples(img, mask, feature, params.samples_per_image, seed.wrapping_add(i as u64))
        })
        .collect();

    let mut cluster_images: Vec<Vec<usize>> = vec![Vec::new(); params.k];
    for (i, &c) in km.assignments.iter().enumerate() {
        cluster_images[c].push(i);
    }
    let cluster_sizes: Vec<usize> = cluster_images.iter().map(|v| v.len()).collect();

    let gather = |indices: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in indices {
            xs.extend_from_slice(&per_image[i].0);
            ys.extend_from_slice(&per_image[i].1);
        }
        (xs, ys)
    };
    let all_indices: Vec<usize> = (0..corpus.len()).collect();

    let forests: Result<Vec<RandomForestRegressor>> = (0..params.k)
        .map(|c| {
            let (xs, ys) = if cluster_images[c].is_empty() {
                gather(&all_indices)
            } else {
                gather(&cluster_images[c])
            };
            forest_train(&xs, &ys, &params.forest, seed.wrapping_add(c as u64))
        })
        .collect();

    Ok(IlluminationModelBank {
        magic: BANK_MAGIC.to_string(),
        version: BANK_VERSION,
        feature: feature.clone(),
        train_params: *params,
        seed,
        kmeans: km.model,
        forests: forests?,
        cluster_sizes,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Per-pixel skin probability for one image region.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
    /// Region was smaller than the SIFT patch; SIFT channels were zeroed.
    pub color_only: bool,
}

impl SkinProbabilityMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[y * self.width + x]
    }
}

/// Skin probability over `region`. The region's global histogram selects
/// the `blend_n` nearest clusters; grid predictions are an inverse-distance
/// weighted mean of the selected forests and are upsampled to pixels by
/// nearest assignment.
pub fn predict_skin(
    region: &ImageRGB,
    bank: &IlluminationModelBank,
    blend_n: usize,
) -> SkinProbabilityMap {
    let blend_n = blend_n.clamp(1, bank.kmeans.k);
    let hist = global_hsv_histogram(region, bank.feature.hist_bins);
    let ranked = bank.kmeans.ranked(&hist.bins);
    let selected = &ranked[..blend_n];
    let raw: Vec<f64> = selected.iter().map(|&(_, d)| 1.0 / (d + 1e-12)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let (grid, color_only) = descriptor_grid_or_fallback(region, &bank.feature);

    let grid_probs: Vec<f64> = (0..grid.grid_h * grid.grid_w)
        .into_par_iter()
        .map(|gi| {
            let desc = grid.descriptor(gi % grid.grid_w, gi / grid.grid_w);
            selected
                .iter()
                .zip(&weights)
                .map(|(&(c, _), w)| w * bank.forests[c].predict(desc))
                .sum()
        })
        .collect();

    let mut probs = vec![0.0f64; region.width() * region.height()];
    for y in 0..region.height() {
        for x in 0..region.width() {
            let (gx, gy) = grid.nearest_cell(x, y);
            probs[y * region.width() + x] = grid_probs[gy * grid.grid_w + gx];
        }
    }

    SkinProbabilityMap { width: region.width(), height: region.height(), probs, color_only }
}

/// Binarize a probability map: bit set iff probability >= tau.
pub fn threshold_mask(map: &SkinProbabilityMap, tau: f64) -> BinaryMask {
    assert!((0.0..=1.0).contains(&tau), "tau must be in [0, 1]");
    BinaryMask::from_fn(map.width, map.height, |x, y| map.get(x, y) >= tau)
}

#[cfg(test)]
mod tests;
