//! Detection proposal handling: ingesting external detector output from
//! JSON-lines files, confidence thresholding plus NMS, and a self-contained
//! fallback proposer driven by the skin model. The fallback exists so the
//! pipeline runs end-to-end with zero external dependencies; it is much
//! weaker than a learned detector.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::illumskin::{predict_skin, threshold_mask, IlluminationModelBank};
use crate::imagecore::{connected_components_labeled, nms, ImageRGB, ScoredBox};
use crate::{Error, Result};

/// One proposal-file line. The same record, with optional extra fields,
/// is used for pipeline detection output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    image: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Proposals grouped per image id; per-image order preserved from the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalSet {
    pub by_image: BTreeMap<String, Vec<ScoredBox>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }

    pub fn insert(&mut self, image: &str, bx: ScoredBox) {
        self.by_image.entry(image.to_string()).or_default().push(bx);
    }
}

/// Parses a proposal file: UTF-8, one JSON object per line
/// `{"image", "x", "y", "w", "h", "score"}`. Boxes for a repeated image id
/// are concatenated in file order. Blank lines are allowed.
pub fn load_proposals(path: &Path) -> Result<ProposalSet> {
    let file = std::fs::File::open(path)?;
    let mut set = ProposalSet::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        parse_proposal_line(&line, i + 1, &mut set)?;
    }
    Ok(set)
}

fn parse_proposal_line(line: &str, line_no: usize, set: &mut ProposalSet) -> Result<()> {
    if line.trim().is_empty() {
        return Ok(());
    }
    let rec: ProposalRecord = serde_json::from_str(line)
        .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
    if rec.image.is_empty() {
        return Err(Error::Parse { line: line_no, msg: "empty image id".into() });
    }
    if !(0.0..=1.0).contains(&rec.score) {
        return Err(Error::Parse { line: line_no, msg: format!("score {} outside [0, 1]", rec.score) });
    }
    let bx = ScoredBox::new(rec.x, rec.y, rec.w, rec.h, rec.score);
    if !bx.is_valid() {
        return Err(Error::Parse { line: line_no, msg: "invalid box geometry".into() });
    }
    set.insert(&rec.image, bx);
    Ok(())
}

/// Writes a proposal set in the file format of [`load_proposals`]; images in
/// id order, boxes in stored order.
pub fn save_proposals(path: &Path, set: &ProposalSet) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (image, boxes) in &set.by_image {
        for b in boxes {
            let rec = ProposalRecord { image: image.clone(), x: b.x, y: b.y, w: b.w, h: b.h, score: b.score };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Drops boxes scoring below `conf_thresh`, then applies greedy NMS at
/// `nms_iou`. Output sorted by score descending.
pub fn filter_proposals(boxes: &[ScoredBox], conf_thresh: f64, nms_iou: f64) -> Vec<ScoredBox> {
    assert!((0.0..=1.0).contains(&conf_thresh), "conf_thresh must be in [0, 1]");
    assert!((0.0..=1.0).contains(&nms_iou), "nms_iou must be in [0, 1]");
    let kept: Vec<ScoredBox> = boxes.iter().filter(|b| b.score >= conf_thresh).copied().collect();
    nms(&kept, nms_iou)
}

/// Tunables for the fallback proposer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FallbackParams {
    /// Longest image side after downsampling.
    pub max_side: usize,
    /// Skin-mask threshold applied to the downsampled probability map.
    pub tau: f64,
    /// Minimum component area, in downsampled pixels.
    pub min_area: usize,
    /// Margin ratio added on every side of an emitted box.
    pub pad: f64,
}

impl Default for FallbackParams {
    fn default() -> Self {
        Self { max_side: 160, tau: 0.5, min_area: 20, pad: 0.2 }
    }
}

/// Proposes boxes from the skin model alone: downsample, predict skin over
/// the whole frame, threshold, and emit one padded box per connected
/// component above the area floor. Score is the component's mean skin
/// probability.
pub fn fallback_propose(
    img: &ImageRGB,
    bank: &IlluminationModelBank,
    params: &FallbackParams,
) -> Vec<ScoredBox> {
    let (w, h) = (img.width(), img.height());
    let scale = (params.max_side as f64 / w.max(h) as f64).min(1.0);
    let (dw, dh) = (((w as f64 * scale).round() as usize).max(1), ((h as f64 * scale).round() as usize).max(1));
    let small = if (dw, dh) == (w, h) { img.clone() } else { img.resize_bilinear(dw, dh) };

    let map = predict_skin(&small, bank, 1);
    let mask = threshold_mask(&map, params.tau);
    let labeled = connected_components_labeled(&mask);

    let sx = w as f64 / dw as f64;
    let sy = h as f64 / dh as f64;
    let mut out = Vec::new();
    for comp in &labeled.components {
        if comp.area < params.min_area {
            continue;
        }
        let mut prob_sum = 0.0;
        for y in comp.min_y..=comp.max_y {
            for x in comp.min_x..=comp.max_x {
                if labeled.labels[y * dw + x] == comp.id {
                    prob_sum += map.get(x, y);
                }
            }
        }
        let score = (prob_sum / comp.area as f64).clamp(0.0, 1.0);
        let small_box = comp.bounding_box();
        let full = ScoredBox::new(small_box.x * sx, small_box.y * sy, small_box.w * sx, small_box.h * sy, score);
        if let Some(b) = full.expanded(params.pad).clamped(w, h) {
            out.push(b);
        }
    }
    out
}
