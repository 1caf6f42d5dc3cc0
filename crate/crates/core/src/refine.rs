//! Detection refinement: the skin classifier runs only inside proposal
//! boxes. Proposals with no skin support are rejected outright; surviving
//! boxes are tightened to the largest connected skin component and exported
//! as background-zeroed 128x128 hand chips.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::illumskin::{predict_skin, threshold_mask, IlluminationModelBank};
use crate::imagecore::{connected_components_labeled, io, BinaryMask, ImageRGB, ScoredBox};
use crate::{Error, Result};

pub const CHIP_SIZE: usize = 128;

/// Geometry knobs for [`refine_detection`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    /// Margin ratio m: each side of the proposal grows by m before the skin
    /// classifier runs.
    pub margin: f64,
    /// Reject when largest-component pixels / expanded-box area < f_min.
    pub min_skin_frac: f64,
    /// Re-pad ratio p applied to the tightened box.
    pub pad: f64,
    /// Skin-mask threshold.
    pub tau: f64,
    /// Clusters blended at inference.
    pub blend_n: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self { margin: 0.15, min_skin_frac: 0.02, pad: 0.05, tau: 0.5, blend_n: 1 }
    }
}

/// A proposal that survived refinement: the tightened box, the hand mask
/// over the box raster, and the mean skin probability over the mask.
#[derive(Debug, Clone)]
pub struct RefinedDetection {
    pub bbox: ScoredBox,
    pub mask: BinaryMask,
    pub mean_skin_prob: f64,
}

/// A refined detection packaged for grasp analysis: background-zeroed
/// 128x128 chip plus the mask it was cut with.
#[derive(Debug, Clone)]
pub struct HandInstance {
    pub image_id: String,
    pub bbox: ScoredBox,
    /// Hand mask over the rasterized box.
    pub mask: BinaryMask,
    /// 128x128 crop with non-mask pixels zeroed.
    pub chip: ImageRGB,
    /// Mask resized to chip resolution; chip pixels outside it are (0,0,0).
    pub chip_mask: BinaryMask,
    pub mean_skin_prob: f64,
}

/// Runs the skin classifier inside the margin-expanded proposal box.
/// Returns None when the largest skin component covers less than
/// `min_skin_frac` of the expanded box (false-positive removal); otherwise
/// the component's tight bounding box, re-padded by `pad` and clamped.
/// The input score is preserved.
pub fn refine_detection(
    img: &ImageRGB,
    bbox: &ScoredBox,
    bank: &IlluminationModelBank,
    params: &RefineParams,
) -> Result<Option<RefinedDetection>> {
    if !bbox.is_valid() {
        return Err(Error::InvalidInput("degenerate box".into()));
    }
    let expanded = bbox.expanded(params.margin);
    let region_rect = expanded
        .raster_in(img.width(), img.height())
        .ok_or_else(|| Error::InvalidInput("box does not intersect image".into()))?;
    let region = img.crop(&expanded)?;

    let map = predict_skin(&region, bank, params.blend_n);
    let skin = threshold_mask(&map, params.tau);
    let labeled = connected_components_labeled(&skin);
    let Some(comp) = labeled.components.first() else {
        return Ok(None);
    };
    let frac = comp.area as f64 / (region.width() * region.height()) as f64;
    if frac < params.min_skin_frac {
        return Ok(None);
    }

    let mut prob_sum = 0.0;
    for y in comp.min_y..=comp.max_y {
        for x in comp.min_x..=comp.max_x {
            if labeled.labels[y * region.width() + x] == comp.id {
                prob_sum += map.get(x, y);
            }
        }
    }
    let mean_skin_prob = prob_sum / comp.area as f64;

    // Component bounds in full-image coordinates, re-padded and clamped to
    // the expanded search region.
    let tight = ScoredBox::new(
        (region_rect.x + comp.min_x) as f64,
        (region_rect.y + comp.min_y) as f64,
        (comp.max_x - comp.min_x + 1) as f64,
        (comp.max_y - comp.min_y + 1) as f64,
        bbox.score,
    );
    let mut padded = tight.expanded(params.pad);
    padded = intersect(&padded, &expanded).unwrap_or(tight);
    let refined = padded
        .clamped(img.width(), img.height())
        .expect("tight box lies inside the image");

    // Hand mask over the refined raster: bits of the winning component.
    let out_rect = refined.raster_in(img.width(), img.height()).expect("refined box intersects");
    let mut mask = BinaryMask::new(out_rect.w, out_rect.h);
    for y in comp.min_y..=comp.max_y {
        for x in comp.min_x..=comp.max_x {
            if labeled.labels[y * region.width() + x] != comp.id {
                continue;
            }
            let fx = region_rect.x + x;
            let fy = region_rect.y + y;
            if fx >= out_rect.x && fx < out_rect.x + out_rect.w && fy >= out_rect.y && fy < out_rect.y + out_rect.h
            {
                mask.set(fx - out_rect.x, fy - out_rect.y, true);
            }
        }
    }

    Ok(Some(RefinedDetection { bbox: refined, mask, mean_skin_prob }))
}

fn intersect(a: &ScoredBox, b: &ScoredBox) -> Option<ScoredBox> {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(ScoredBox::new(x0, y0, x1 - x0, y1 - y0, a.score))
}

/// Crops the refined box, zeroes non-mask pixels, and resizes to 128x128.
/// The mask travels by nearest-neighbor and is re-applied after the resize
/// so the zeroed background stays exactly (0,0,0).
pub fn extract_hand_instance(
    img: &ImageRGB,
    refined: &ScoredBox,
    mask: &BinaryMask,
) -> Result<HandInstance> {
    let rect = refined.raster_in(img.width(), img.height()).ok_or(Error::EmptyCrop)?;
    if mask.width() != rect.w || mask.height() != rect.h {
        return Err(Error::DimensionMismatch { expected: rect.w * rect.h, got: mask.width() * mask.height() });
    }
    if mask.count_ones() == 0 {
        return Err(Error::EmptyHandMask);
    }

    let mut crop = img.crop(refined)?;
    for y in 0..rect.h {
        for x in 0..rect.w {
            if !mask.get(x, y) {
                crop.set_pixel(x, y, [0, 0, 0]);
            }
        }
    }
    let mut chip = crop.resize_bilinear(CHIP_SIZE, CHIP_SIZE);
    let chip_mask = mask.resize_nearest(CHIP_SIZE, CHIP_SIZE);
    for y in 0..CHIP_SIZE {
        for x in 0..CHIP_SIZE {
            if !chip_mask.get(x, y) {
                chip.set_pixel(x, y, [0, 0, 0]);
            }
        }
    }

    Ok(HandInstance {
        image_id: String::new(),
        bbox: *refined,
        mask: mask.clone(),
        chip,
        chip_mask,
        mean_skin_prob: 0.0,
    })
}

/// Sidecar metadata written next to exported chip/mask images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceSidecar {
    pub image: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub mean_skin_prob: f64,
}

/// Writes `<stem>_chip.png`, `<stem>_mask.png` and `<stem>.json` under `dir`.
pub fn export_instance(dir: &Path, stem: &str, inst: &HandInstance) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_image(&dir.join(format!("{stem}_chip.png")), &inst.chip)?;
    io::write_mask_png(&dir.join(format!("{stem}_mask.png")), &inst.chip_mask)?;
    let sidecar = InstanceSidecar {
        image: inst.image_id.clone(),
        x: inst.bbox.x,
        y: inst.bbox.y,
        w: inst.bbox.w,
        h: inst.bbox.h,
        score: inst.bbox.score,
        mean_skin_prob: inst.mean_skin_prob,
    };
    let mut json = serde_json::to_vec(&sidecar)?;
    json.push(b'\n');
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::illumskin::{bank_train, BankTrainParams, ForestParams};
    use crate::imagecore::iou;
    use crate::pixelfeat::FeatureConfig;

    const SKIN: [u8; 3] = [205, 150, 125];
    const BG: [u8; 3] = [60, 90, 160];

    fn scene(blob: (usize, usize, usize, usize)) -> (ImageRGB, BinaryMask) {
        let (bx, by, bw, bh) = blob;
        let in_blob = move |x: usize, y: usize| (bx..bx + bw).contains(&x) && (by..by + bh).contains(&y);
        let img = ImageRGB::from_fn(96, 72, |x, y| if in_blob(x, y) { SKIN } else { BG });
        (img, BinaryMask::from_fn(96, 72, in_blob))
    }

    fn trained_bank() -> IlluminationModelBank {
        let corpus: Vec<(ImageRGB, BinaryMask)> =
            vec![scene((20, 16, 24, 24)), scene((50, 30, 20, 24)), scene((10, 40, 28, 20))];
        let params = BankTrainParams {
            k: 1,
            kmeans_max_iters: 20,
            forest: ForestParams { trees: 8, max_depth: 8, min_leaf: 2, features_per_split: None },
            samples_per_image: 200,
        };
        bank_train(&corpus, &params, &FeatureConfig::default(), 6).unwrap()
    }

    #[test]
    fn rejects_background_box() {
        let bank = trained_bank();
        let (img, _) = scene((20, 16, 24, 24));
        // A proposal sitting entirely on background.
        let bbox = ScoredBox::new(60.0, 45.0, 24.0, 20.0, 0.9);
        let refined = refine_detection(&img, &bbox, &bank, &RefineParams::default()).unwrap();
        assert!(refined.is_none(), "no-skin proposal must be rejected");
    }

    #[test]
    fn refined_box_contains_blob_within_expansion() {
        let bank = trained_bank();
        let (img, _) = scene((30, 24, 24, 24));
        let bbox = ScoredBox::new(30.0, 24.0, 24.0, 24.0, 0.7);
        let refined = refine_detection(&img, &bbox, &bank, &RefineParams::default())
            .unwrap()
            .expect("solid blob must survive");
        let expanded = bbox.expanded(0.15);
        // Refinement never grows the search region beyond the expanded box.
        assert!(refined.bbox.x >= expanded.x - 1.0 && refined.bbox.y >= expanded.y - 1.0);
        assert!(refined.bbox.x + refined.bbox.w <= expanded.x + expanded.w + 1.0);
        assert!(refined.bbox.y + refined.bbox.h <= expanded.y + expanded.h + 1.0);
        assert_eq!(refined.bbox.score, 0.7);
        assert!(refined.mean_skin_prob > 0.5);
    }

    #[test]
    fn loose_box_improves_iou() {
        let bank = trained_bank();
        // Blob occupies roughly a quarter of the loose proposal's corner.
        let (img, _) = scene((24, 20, 20, 20));
        let truth = ScoredBox::new(24.0, 20.0, 20.0, 20.0, 1.0);
        let loose = ScoredBox::new(20.0, 16.0, 44.0, 42.0, 0.8);
        let before = iou(&loose, &truth);
        let refined = refine_detection(&img, &loose, &bank, &RefineParams::default())
            .unwrap()
            .expect("blob inside proposal");
        let after = iou(&refined.bbox, &truth);
        assert!(after > before, "refinement must tighten: {before} -> {after}");
    }

    #[test]
    fn rejection_monotone_in_min_skin_frac() {
        let bank = trained_bank();
        let (img, _) = scene((30, 24, 12, 12));
        let bbox = ScoredBox::new(22.0, 16.0, 36.0, 36.0, 0.9);
        let mut prev_accepted = true;
        for f_min in [0.0, 0.02, 0.05, 0.1, 0.3, 0.8] {
            let params = RefineParams { min_skin_frac: f_min, ..RefineParams::default() };
            let accepted = refine_detection(&img, &bbox, &bank, &params).unwrap().is_some();
            assert!(
                prev_accepted || !accepted,
                "raising f_min to {f_min} resurrected a rejected box"
            );
            prev_accepted = accepted;
        }
    }

    #[test]
    fn degenerate_box_errors() {
        let bank = trained_bank();
        let (img, _) = scene((30, 24, 12, 12));
        let bad = ScoredBox::new(10.0, 10.0, 0.0, 5.0, 0.5);
        assert!(refine_detection(&img, &bad, &bank, &RefineParams::default()).is_err());
        let outside = ScoredBox::new(500.0, 500.0, 10.0, 10.0, 0.5);
        assert!(refine_detection(&img, &outside, &bank, &RefineParams::default()).is_err());
    }

    #[test]
    fn extract_full_mask_is_plain_resize() {
        let img = ImageRGB::from_fn(64, 48, |x, y| [(x * 3) as u8, (y * 4) as u8, 33]);
        let bbox = ScoredBox::new(8.0, 8.0, 32.0, 24.0, 0.9);
        let rect = bbox.raster_in(64, 48).unwrap();
        let mask = BinaryMask::from_fn(rect.w, rect.h, |_, _| true);
        let inst = extract_hand_instance(&img, &bbox, &mask).unwrap();
        let expected = img.crop(&bbox).unwrap().resize_bilinear(CHIP_SIZE, CHIP_SIZE);
        assert_eq!(inst.chip, expected);
        assert_eq!(inst.chip.width(), CHIP_SIZE);
        assert_eq!(inst.chip.height(), CHIP_SIZE);
    }

    #[test]
    fn extract_half_mask_zeroes_other_half() {
        let img = ImageRGB::from_fn(64, 64, |_, _| [200, 180, 170]);
        let bbox = ScoredBox::new(0.0, 0.0, 64.0, 64.0, 1.0);
        let mask = BinaryMask::from_fn(64, 64, |x, _| x < 32);
        let inst = extract_hand_instance(&img, &bbox, &mask).unwrap();
        let mut nonzero_left = 0;
        let mut nonzero_right = 0;
        for y in 0..CHIP_SIZE {
            for x in 0..CHIP_SIZE {
                let p = inst.chip.pixel(x, y);
                let nz = p != [0, 0, 0];
                // Non-mask chip pixels must be exactly zero.
                assert!(inst.chip_mask.get(x, y) || !nz);
                if x < CHIP_SIZE / 2 {
                    nonzero_left += usize::from(nz);
                } else {
                    nonzero_right += usize::from(nz);
                }
            }
        }
        // Up to a boundary column, the masked half is lit and the rest dark.
        assert!(nonzero_left >= CHIP_SIZE * (CHIP_SIZE / 2 - 2));
        assert!(nonzero_right <= CHIP_SIZE * 2);
    }

    #[test]
    fn extract_empty_mask_errors() {
        let img = ImageRGB::new(32, 32);
        let bbox = ScoredBox::new(0.0, 0.0, 32.0, 32.0, 1.0);
        let mask = BinaryMask::new(32, 32);
        let err = extract_hand_instance(&img, &bbox, &mask).unwrap_err();
        assert_eq!(err.to_string(), "empty hand mask");
    }

    #[test]
    fn extract_dimension_mismatch_errors() {
        let img = ImageRGB::new(32, 32);
        let bbox = ScoredBox::new(0.0, 0.0, 32.0, 32.0, 1.0);
        let mask = BinaryMask::from_fn(10, 10, |_, _| true);
        assert!(matches!(
            extract_hand_instance(&img, &bbox, &mask),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn export_writes_three_files() {
        let img = ImageRGB::from_fn(40, 40, |_, _| [150, 120, 100]);
        let bbox = ScoredBox::new(4.0, 4.0, 24.0, 24.0, 0.66);
        let rect = bbox.raster_in(40, 40).unwrap();
        let mask = BinaryMask::from_fn(rect.w, rect.h, |x, y| x + y > 4);
        let mut inst = extract_hand_instance(&img, &bbox, &mask).unwrap();
        inst.image_id = "frame_7".into();
        inst.mean_skin_prob = 0.83;
        let dir = tempfile::tempdir().unwrap();
        export_instance(dir.path(), "det_000", &inst).unwrap();
        assert!(dir.path().join("det_000_chip.png").exists());
        assert!(dir.path().join("det_000_mask.png").exists());
        let sidecar: InstanceSidecar =
            serde_json::from_slice(&std::fs::read(dir.path().join("det_000.json")).unwrap()).unwrap();
        assert_eq!(sidecar.image, "frame_7");
        assert_eq!(sidecar.mean_skin_prob, 0.83);
    }
}
