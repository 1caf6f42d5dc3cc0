//! Grasp classification: a linear SVM over PCA-reduced HOG features, as a
//! binary wheel-grasp/no-wheel-grasp task or a 3-class one-vs-all task, with
//! cross-validated choice of the regularization constant.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalkit::{eval_grasp, GraspReport};
use crate::graspfeat::{chip_hog, jitter, pca_fit, pca_transform, HOGParams, JitterParams, PCAModel};
use crate::imagecore::ImageRGB;
use crate::refine::HandInstance;
use crate::{Error, Result};

pub const GRASP_MAGIC: &str = "handscan.grasp";
pub const GRASP_VERSION: u32 = 1;

/// Grasp state of a hand instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraspLabel {
    WheelGrasp,
    PhoneGrasp,
    NoGrasp,
}

impl GraspLabel {
    pub const ALL: [GraspLabel; 3] = [GraspLabel::WheelGrasp, GraspLabel::PhoneGrasp, GraspLabel::NoGrasp];

    pub fn as_str(self) -> &'static str {
        match self {
            GraspLabel::WheelGrasp => "wheel",
            GraspLabel::PhoneGrasp => "phone",
            GraspLabel::NoGrasp => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wheel" => Ok(GraspLabel::WheelGrasp),
            "phone" => Ok(GraspLabel::PhoneGrasp),
            "none" => Ok(GraspLabel::NoGrasp),
            other => Err(Error::InvalidInput(format!("unknown grasp label {other:?}"))),
        }
    }

    /// Binary task polarity: wheel grasp is the positive class.
    pub fn binary_sign(self) -> f64 {
        if self == GraspLabel::WheelGrasp {
            1.0
        } else {
            -1.0
        }
    }
}

impl fmt::Display for GraspLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// SVM training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmTrainConfig {
    /// Candidate regularization constants; ties resolve to the smaller C.
    pub c_grid: Vec<f64>,
    pub folds: usize,
    /// Passes over the training set per fit.
    pub epochs: usize,
    /// Weight hinge terms inversely to class frequency (one-vs-all only).
    pub class_weight: bool,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self { c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0], folds: 10, epochs: 10, class_weight: true }
    }
}

/// One trained hyperplane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Regularization constant chosen by cross-validation.
    pub c: f64,
    /// (C, mean CV accuracy) per grid candidate.
    pub cv_scores: Vec<(f64, f64)>,
    /// Full objective of the averaged iterate after each refit epoch.
    pub objective_trace: Vec<f64>,
}

impl SvmHead {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvmKind {
    Binary,
    OneVsRest,
}

/// Linear SVM model: a single head for the binary task, or one head per
/// class for one-vs-all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSVMModel {
    pub kind: SvmKind,
    /// One-vs-all class list in enum order; empty for the binary task.
    pub classes: Vec<GraspLabel>,
    /// Training-set frequency per head (binary: positive then negative).
    pub class_counts: Vec<usize>,
    pub heads: Vec<SvmHead>,
}

/// Prediction output: a signed decision for the binary task, an argmax
/// label for one-vs-all.
#[derive(Debug, Clone, PartialEq)]
pub enum GraspPrediction {
    Binary { positive: bool, score: f64 },
    Multi { label: GraspLabel, scores: Vec<f64> },
}

/// Applies the model. Binary ties (score exactly 0) go positive; one-vs-all
/// ties go to the class with the larger training frequency, then enum order.
pub fn svm_predict(model: &LinearSVMModel, x: &[f64]) -> Result<GraspPrediction> {
    let dim = model.heads[0].weights.len();
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    match model.kind {
        SvmKind::Binary => {
            let score = model.heads[0].score(x);
            Ok(GraspPrediction::Binary { positive: score >= 0.0, score })
        }
        SvmKind::OneVsRest => {
            let scores: Vec<f64> = model.heads.iter().map(|h| h.score(x)).collect();
            let mut best = 0usize;
            for i in 1..scores.len() {
                let better = scores[i] > scores[best]
                    || (scores[i] == scores[best] && model.class_counts[i] > model.class_counts[best]);
                if better {
                    best = i;
                }
            }
            Ok(GraspPrediction::Multi { label: model.classes[best], scores })
        }
    }
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

/// Deterministic cyclic sub-gradient descent on the soft-margin primal
/// objective 1/2 ||w||^2 + C sum_i s_i * hinge_i, with step 1/(lambda t)
/// (lambda = 1/(nC)) and Polyak averaging. Returns the averaged iterate and
/// the full objective of the running average after every epoch.
fn solve_hinge(
    x: &[Vec<f64>],
    y: &[f64],
    sample_weight: &[f64],
    c: f64,
    epochs: usize,
) -> (Vec<f64>, f64, Vec<f64>) {
    let n = x.len();
    let dim = x[0].len();
    let lambda = 1.0 / (n as f64 * c);
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut w_sum = vec![0.0f64; dim];
    let mut b_sum = 0.0f64;
    let mut t = 0u64;
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        for i in 0..n {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let margin = y[i] * (w.iter().zip(&x[i]).map(|(a, v)| a * v).sum::<f64>() + b);
            let shrink = 1.0 - eta * lambda;
            for v in &mut w {
                *v *= shrink;
            }
            if margin < 1.0 {
                let g = eta * sample_weight[i] * y[i];
                for (v, xi) in w.iter_mut().zip(&x[i]) {
                    *v += g * xi;
                }
                b += g;
            }
            for (s, v) in w_sum.iter_mut().zip(&w) {
                *s += v;
            }
            b_sum += b;
        }
        let inv_t = 1.0 / t as f64;
        let w_avg: Vec<f64> = w_sum.iter().map(|s| s * inv_t).collect();
        trace.push(objective(x, y, sample_weight, c, &w_avg, b_sum * inv_t));
    }
    let inv_t = 1.0 / t as f64;
    (w_sum.iter().map(|s| s * inv_t).collect(), b_sum * inv_t, trace)
}

/// Full primal objective 1/2 ||w||^2 + C sum_i s_i hinge_i.
pub fn objective(x: &[Vec<f64>], y: &[f64], sample_weight: &[f64], c: f64, w: &[f64], b: f64) -> f64 {
    let reg: f64 = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = x
        .iter()
        .zip(y)
        .zip(sample_weight)
        .map(|((xi, &yi), &si)| {
            let m = yi * (w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>() + b);
            si * (1.0 - m).max(0.0)
        })
        .sum();
    reg + c * hinge
}

/// Stratified fold ids: per-class seeded shuffle dealt round-robin, keeping
/// every fold's class proportions within one sample of the global ones.
fn stratified_folds(y: &[f64], folds: usize, seed: u64) -> Vec<usize> {
    let mut fold_of = vec![0usize; y.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<u64> = y.iter().map(|&v| v.to_bits()).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let mut idx: Vec<usize> =
            (0..y.len()).filter(|&i| y[i].to_bits() == class).collect();
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    fold_of
}

fn balanced_weights(y: &[f64], enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; y.len()];
    }
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let neg = n - pos;
    y.iter().map(|&v| if v > 0.0 { n / (2.0 * pos) } else { n / (2.0 * neg) }).collect()
}

/// Binary soft-margin training with C chosen by stratified k-fold
/// cross-validation accuracy (ties to the smaller C), refit on all data.
pub fn svm_train_binary(
    x: &[Vec<f64>],
    y: &[f64],
    cfg: &SvmTrainConfig,
    seed: u64,
) -> Result<LinearSVMModel> {
    let head = train_head(x, y, cfg, false, seed)?;
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    Ok(LinearSVMModel {
        kind: SvmKind::Binary,
        classes: Vec::new(),
        class_counts: vec![pos, y.len() - pos],
        heads: vec![head],
    })
}

fn train_head(
    x: &[Vec<f64>],
    y: &[f64],
    cfg: &SvmTrainConfig,
    class_weight: bool,
    seed: u64,
) -> Result<SvmHead> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == n {
        return Err(Error::DegenerateLabels);
    }
    if cfg.folds < 2 || n < cfg.folds {
        return Err(Error::InvalidInput(format!("need folds >= 2 and at least {} samples", cfg.folds)));
    }

    let mut grid = cfg.c_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let fold_of = stratified_folds(y, cfg.folds, seed);

    let cv_scores: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&c| {
            let mut correct = 0usize;
            let mut total = 0usize;
            for fold in 0..cfg.folds {
                let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
                let test_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
                if test_idx.is_empty() {
                    continue;
                }
                let xs: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
                let ys: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
                if ys.iter().all(|&v| v > 0.0) || ys.iter().all(|&v| v <= 0.0) {
                    continue;
                }
                let sw = balanced_weights(&ys, class_weight);
                let (w, b, _) = solve_hinge(&xs, &ys, &sw, c, cfg.epochs);
                for &i in &test_idx {
                    let score: f64 = w.iter().zip(&x[i]).map(|(a, v)| a * v).sum::<f64>() + b;
                    let pred = if score >= 0.0 { 1.0 } else { -1.0 };
                    correct += usize::from(pred == y[i].signum());
                    total += 1;
                }
            }
            (c, if total == 0 { 0.0 } else { correct as f64 / total as f64 })
        })
        .collect();

    // Ascending grid: strict improvement required, so ties pick the
    // smaller C.
    let mut best = 0usize;
    for i in 1..cv_scores.len() {
        if cv_scores[i].1 > cv_scores[best].1 {
            best = i;
        }
    }
    let c = cv_scores[best].0;
    let sw = balanced_weights(y, class_weight);
    let (weights, bias, objective_trace) = solve_hinge(x, y, &sw, c, cfg.epochs);
    Ok(SvmHead { weights, bias, c, cv_scores, objective_trace })
}

/// One-vs-all training: one cross-validated binary head per class present,
/// in enum order, each seeded with `seed + class index`. Per-class hinge
/// weighting follows `cfg.class_weight`.
pub fn svm_train_ovr(
    x: &[Vec<f64>],
    labels: &[GraspLabel],
    cfg: &SvmTrainConfig,
    seed: u64,
) -> Result<LinearSVMModel> {
    if x.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: labels.len() });
    }
    let classes: Vec<GraspLabel> =
        GraspLabel::ALL.iter().copied().filter(|c| labels.contains(c)).collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let class_counts: Vec<usize> =
        classes.iter().map(|c| labels.iter().filter(|&l| l == c).count()).collect();
    let heads: Result<Vec<SvmHead>> = classes
        .iter()
        .enumerate()
        .map(|(ci, &class)| {
            let ys: Vec<f64> =
                labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            train_head(x, &ys, cfg, cfg.class_weight, seed.wrapping_add(ci as u64))
        })
        .collect();
    Ok(LinearSVMModel { kind: SvmKind::OneVsRest, classes, class_counts, heads: heads? })
}

// ---------------------------------------------------------------------------
// End-to-end grasp model
// ---------------------------------------------------------------------------

/// Configuration of the grasp training pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspTrainConfig {
    /// false: binary wheel / no-wheel; true: 3-class one-vs-all.
    pub multiclass: bool,
    pub hog: HOGParams,
    pub pca_dim: usize,
    pub svm: SvmTrainConfig,
    /// Instances produced per training instance (1 = no augmentation).
    pub jitter_n: usize,
    pub jitter: JitterParams,
    /// Training share of the stratified split.
    pub train_frac: f64,
}

impl Default for GraspTrainConfig {
    fn default() -> Self {
        Self {
            multiclass: false,
            hog: HOGParams::default(),
            pca_dim: 30,
            svm: SvmTrainConfig::default(),
            jitter_n: 5,
            jitter: JitterParams::default(),
            train_frac: 0.8,
        }
    }
}

/// The full grasp classifier: HOG geometry, PCA projection and SVM heads,
/// serialized as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspModel {
    pub magic: String,
    pub version: u32,
    pub config: GraspTrainConfig,
    pub seed: u64,
    pub pca: PCAModel,
    pub svm: LinearSVMModel,
}

impl GraspModel {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let model: GraspModel = serde_json::from_slice(bytes)?;
        if model.magic != GRASP_MAGIC {
            return Err(Error::ModelFormat(format!("bad magic {:?}", model.magic)));
        }
        if model.version != GRASP_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {}", model.version)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// Chip -> HOG -> PCA -> SVM.
    pub fn classify_chip(&self, chip: &ImageRGB) -> Result<GraspPrediction> {
        let feats = chip_hog(chip, &self.config.hog)?;
        let z = pca_transform(&self.pca, &feats)?;
        svm_predict(&self.svm, &z)
    }
}

/// Binary report classes.
pub fn binary_class_names() -> Vec<String> {
    vec!["wheel".into(), "no-wheel".into()]
}

/// Trains the grasp pipeline: stratified 80-20 split (before jittering,
/// augmentation touches only the training side), HOG on chip luminance, PCA
/// fit on the training features, SVM training, and a held-out evaluation
/// report in the per-class + overall accuracy layout.
pub fn train_grasp_pipeline(
    images: &BTreeMap<String, ImageRGB>,
    samples: &[(HandInstance, GraspLabel)],
    cfg: &GraspTrainConfig,
    seed: u64,
) -> Result<(GraspModel, GraspReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training instances".into()));
    }
    for (inst, _) in samples {
        if !images.contains_key(&inst.image_id) {
            return Err(Error::InvalidInput(format!("missing source image {:?}", inst.image_id)));
        }
    }

    // Stratified split by class, seeded.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();
    for class in GraspLabel::ALL {
        let mut idx: Vec<usize> =
            (0..samples.len()).filter(|&i| samples[i].1 == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = if idx.len() == 1 {
            1
        } else {
            ((idx.len() as f64 * cfg.train_frac).round() as usize).clamp(1, idx.len() - 1)
        };
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    // Jitter augmentation on the training side only.
    let augmented: Vec<(HandInstance, GraspLabel)> = train_idx
        .par_iter()
        .flat_map_iter(|&i| {
            let (inst, label) = &samples[i];
            let img = &images[&inst.image_id];
            jitter(img, inst, cfg.jitter_n, &cfg.jitter, seed.wrapping_add(i as u64))
                .into_iter()
                .map(move |j| (j, *label))
        })
        .collect();

    let train_feats: Vec<Vec<f64>> = augmented
        .par_iter()
        .map(|(inst, _)| chip_hog(&inst.chip, &cfg.hog))
        .collect::<Result<_>>()?;
    let pca = pca_fit(&train_feats, cfg.pca_dim)?;
    let train_z: Vec<Vec<f64>> =
        train_feats.par_iter().map(|f| pca_transform(&pca, f)).collect::<Result<_>>()?;
    let train_labels: Vec<GraspLabel> = augmented.iter().map(|(_, l)| *l).collect();

    let svm = if cfg.multiclass {
        svm_train_ovr(&train_z, &train_labels, &cfg.svm, seed)?
    } else {
        let ys: Vec<f64> = train_labels.iter().map(|l| l.binary_sign()).collect();
        svm_train_binary(&train_z, &ys, &cfg.svm, seed)?
    };

    let model = GraspModel {
        magic: GRASP_MAGIC.to_string(),
        version: GRASP_VERSION,
        config: cfg.clone(),
        seed,
        pca,
        svm,
    };

    // Held-out evaluation on the untouched test split.
    let report = if test_idx.is_empty() {
        eval_grasp(&[0], &[0], &vec!["empty".to_string()])?
    } else {
        let mut preds = Vec::with_capacity(test_idx.len());
        let mut truths = Vec::with_capacity(test_idx.len());
        let class_names: Vec<String>;
        match model.svm.kind {
            SvmKind::Binary => {
                class_names = binary_class_names();
                for &i in &test_idx {
                    let (inst, label) = &samples[i];
                    match model.classify_chip(&inst.chip)? {
                        GraspPrediction::Binary { positive, .. } => {
                            preds.push(usize::from(!positive));
                        }
                        GraspPrediction::Multi { .. } => unreachable!(),
                    }
                    truths.push(usize::from(*label != GraspLabel::WheelGrasp));
                }
            }
            SvmKind::OneVsRest => {
                class_names = model.svm.classes.iter().map(|c| c.as_str().to_string()).collect();
                for &i in &test_idx {
                    let (inst, label) = &samples[i];
                    match model.classify_chip(&inst.chip)? {
                        GraspPrediction::Multi { label: pred, .. } => {
                            let pi = model.svm.classes.iter().position(|&c| c == pred).unwrap();
                            preds.push(pi);
                        }
                        GraspPrediction::Binary { .. } => unreachable!(),
                    }
                    let ti = model
                        .svm
                        .classes
                        .iter()
                        .position(|c| c == label)
                        .ok_or_else(|| Error::InvalidInput("test label missing from training classes".into()))?;
                    truths.push(ti);
                }
            }
        }
        eval_grasp(&preds, &truths, &class_names)?
    };

    Ok((model, report))
}
