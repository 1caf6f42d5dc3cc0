//! Evaluation: detection PR/AP at an IoU overlap criterion with L1/L2 hand
//! size filters, pixel-level skin metrics, and grasp classification reports.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::illumskin::SkinProbabilityMap;
use crate::imagecore::{iou, BinaryMask, ScoredBox};
use crate::{Error, Result};

/// Hand-size evaluation levels: L1 keeps instances at least 70 px tall,
/// L2 at least 25 px.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    L1,
    L2,
    All,
}

impl Level {
    pub fn min_height(self) -> f64 {
        match self {
            Level::L1 => 70.0,
            Level::L2 => 25.0,
            Level::All => 0.0,
        }
    }
}

/// Ground-truth boxes per image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub by_image: BTreeMap<String, Vec<ScoredBox>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRecord {
    image: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl GroundTruthSet {
    /// Parses a JSON-lines ground-truth file `{"image","x","y","w","h"}`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut set = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GtRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            let bx = ScoredBox::new(rec.x, rec.y, rec.w, rec.h, 1.0);
            if !bx.is_valid() {
                return Err(Error::Parse { line: i + 1, msg: "invalid box geometry".into() });
            }
            set.by_image.entry(rec.image).or_default().push(bx);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (image, boxes) in &self.by_image {
            for b in boxes {
                let rec = GtRecord { image: image.clone(), x: b.x, y: b.y, w: b.w, h: b.h };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Keeps only instances tall enough for `level`.
    pub fn filter_level(&self, level: Level) -> Self {
        let min_h = level.min_height();
        let mut out = Self::default();
        for (image, boxes) in &self.by_image {
            let kept: Vec<ScoredBox> = boxes.iter().filter(|b| b.h >= min_h).copied().collect();
            if !kept.is_empty() {
                out.by_image.insert(image.clone(), kept);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of greedy detection/ground-truth matching for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// True-positive flag per detection, in input order.
    pub tp: Vec<bool>,
    /// Ground-truth boxes left unmatched.
    pub fn_count: usize,
}

/// Greedy matching in detection-score order: each detection takes the
/// highest-IoU unmatched ground truth with IoU >= `iou_min`, otherwise it is
/// a false positive. Each ground truth matches at most once.
pub fn match_detections(dets: &[ScoredBox], gts: &[ScoredBox], iou_min: f64) -> MatchResult {
    assert!(iou_min > 0.0 && iou_min <= 1.0, "iou_min must be in (0, 1]");
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&dets[i], gt);
            if v >= iou_min && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp[i] = true;
        }
    }
    MatchResult { tp, fn_count: used.iter().filter(|&&u| !u).count() }
}

/// AP integration rule: the all-points precision envelope, or the 11-point
/// interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    AllPoints,
    ElevenPoint,
}

/// Average precision (in percent) from scored TP/FP decisions against
/// `total_gt` ground truths. Detections are ranked by score descending,
/// ties by input order.
pub fn average_precision(decisions: &[(f64, bool)], total_gt: usize, method: ApMethod) -> f64 {
    assert!(total_gt >= 1, "total_gt must be >= 1");
    let mut order: Vec<usize> = (0..decisions.len()).collect();
    order.sort_by(|&a, &b| decisions[b].0.partial_cmp(&decisions[a].0).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(decisions.len()); // (recall, precision)
    for &i in &order {
        if decisions[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    ap_from_points(&points, method) * 100.0
}

fn ap_from_points(points: &[(f64, f64)], method: ApMethod) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // Precision envelope: max precision at recall >= r.
    let mut env: Vec<(f64, f64)> = points.to_vec();
    let mut best = 0.0f64;
    for p in env.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    match method {
        ApMethod::AllPoints => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for &(r, p) in &env {
                if r > prev_r {
                    ap += (r - prev_r) * p;
                    prev_r = r;
                }
            }
            ap
        }
        ApMethod::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let p = env.iter().filter(|&&(pr, _)| pr >= r - 1e-12).map(|&(_, pp)| pp).next();
                total += p.unwrap_or(0.0);
            }
            total / 11.0
        }
    }
}

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Detection evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_percent: f64,
    pub max_recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub total_gt: usize,
    pub iou_min: f64,
    pub level: Level,
    pub method: ApMethod,
    pub pr_curve: Vec<PrPoint>,
}

/// Matches detections to ground truth per image and aggregates a PR curve
/// and AP over the whole set.
pub fn eval_detections(
    dets: &BTreeMap<String, Vec<ScoredBox>>,
    gts: &GroundTruthSet,
    iou_min: f64,
    level: Level,
    method: ApMethod,
) -> Result<EvalReport> {
    let gts = gts.filter_level(level);
    let total_gt = gts.len();
    if total_gt == 0 {
        return Err(Error::InvalidInput("no ground-truth instances at this level".into()));
    }
    let empty: Vec<ScoredBox> = Vec::new();
    let mut decisions: Vec<(f64, bool)> = Vec::new();
    let mut fn_count = 0usize;
    let mut images: Vec<&String> = dets.keys().collect();
    for id in gts.by_image.keys() {
        if !dets.contains_key(id) {
            fn_count += gts.by_image[id].len();
        }
    }
    images.sort();
    for id in images {
        let d = &dets[id];
        let g = gts.by_image.get(id).unwrap_or(&empty);
        let m = match_detections(d, g, iou_min);
        fn_count += m.fn_count;
        decisions.extend(d.iter().zip(&m.tp).map(|(b, &t)| (b.score, t)));
    }

    let mut order: Vec<usize> = (0..decisions.len()).collect();
    order.sort_by(|&a, &b| decisions[b].0.partial_cmp(&decisions[a].0).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr_curve = Vec::with_capacity(order.len());
    for &i in &order {
        if decisions[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        pr_curve.push(PrPoint {
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }

    Ok(EvalReport {
        ap_percent: average_precision(&decisions, total_gt, method),
        max_recall: pr_curve.last().map_or(0.0, |p| p.recall),
        tp,
        fp,
        fn_count,
        total_gt,
        iou_min,
        level,
        method,
        pr_curve,
    })
}

/// Writes `recall,precision` CSV rows for external plotting.
pub fn write_pr_csv(path: &Path, curve: &[PrPoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "recall,precision")?;
    for p in curve {
        writeln!(out, "{},{}", p.recall, p.precision)?;
    }
    Ok(())
}

/// Pixel-level skin metrics at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Aggregates pixel TP/FP/FN over all (probability map, ground truth) pairs
/// for each threshold in `taus`.
pub fn eval_pixels(
    pairs: &[(&SkinProbabilityMap, &BinaryMask)],
    taus: &[f64],
) -> Result<Vec<PixelPrPoint>> {
    for (map, gt) in pairs {
        if map.width != gt.width() || map.height != gt.height() {
            return Err(Error::DimensionMismatch {
                expected: map.width * map.height,
                got: gt.width() * gt.height(),
            });
        }
    }
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (map, gt) in pairs {
            for (p, m) in map.probs.iter().zip(gt.bits()) {
                let pred = *p >= tau;
                match (pred, *m) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        out.push(PixelPrPoint { tau, precision, recall, f1 });
    }
    Ok(out)
}

/// Per-class and overall classification accuracy with a confusion matrix.
/// Rows are truth, columns are predictions, indexed like `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspReport {
    pub classes: Vec<String>,
    /// None when the class has no ground-truth samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl GraspReport {
    /// Plain-text table: one row per class plus the overall accuracy.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self.classes.iter().map(|c| c.len()).max().unwrap_or(5).max(7);
        s.push_str(&format!("{:<width$}  accuracy  support\n", "class"));
        for (i, class) in self.classes.iter().enumerate() {
            let support: usize = self.confusion[i].iter().sum();
            match self.per_class_accuracy[i] {
                Some(acc) => s.push_str(&format!("{class:<width$}  {acc:>8.3}  {support:>7}\n")),
                None => s.push_str(&format!("{class:<width$}  {:>8}  {support:>7}\n", "n/a")),
            }
        }
        s.push_str(&format!("{:<width$}  {:>8.3}  {:>7}\n", "overall", self.overall_accuracy, self.total));
        s
    }
}

/// Classification report over class indices into `classes`.
pub fn eval_grasp(preds: &[usize], truth: &[usize], classes: &[String]) -> Result<GraspReport> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(Error::InvalidInput("predictions and truth must be equal-length and non-empty".into()));
    }
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::InvalidInput(format!("class index out of range: pred {p}, truth {t}")));
        }
        confusion[t][p] += 1;
        correct += usize::from(p == t);
    }
    let per_class_accuracy = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            (total > 0).then(|| confusion[c][c] as f64 / total as f64)
        })
        .collect();
    Ok(GraspReport {
        classes: classes.to_vec(),
        per_class_accuracy,
        overall_accuracy: correct as f64 / preds.len() as f64,
        confusion,
        total: preds.len(),
    })
}
