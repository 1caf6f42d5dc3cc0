//! Per-pixel local appearance descriptors (scaled RGB + HSV + 128-d dense
//! SIFT, optional LAB) and per-image global HSV histograms. These are the
//! inputs for both the illumination clustering and the skin regressors.

use serde::{Deserialize, Serialize};

use crate::imagecore::{rgb_to_hsv, rgb_to_lab, GrayImage, ImageRGB};
use crate::{Error, Result};

pub const SIFT_DIM: usize = 128;

/// Layout of a pixel descriptor and the histogram geometry, shared by
/// training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Grid spacing in pixels for dense descriptors.
    pub stride: usize,
    /// SIFT window side in pixels.
    pub patch: usize,
    /// Append L/a/b channels after the SIFT block.
    pub use_lab: bool,
    /// Global histogram bin counts over (h, s, v).
    pub hist_bins: (usize, usize, usize),
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { stride: 2, patch: 16, use_lab: false, hist_bins: (8, 8, 8) }
    }
}

impl FeatureConfig {
    /// Descriptor length: [R,G,B, H/360,S,V, SIFTx128] plus optional Lab.
    pub fn descriptor_len(&self) -> usize {
        6 + SIFT_DIM + if self.use_lab { 3 } else { 0 }
    }
}

/// L1-normalized joint HSV histogram of a whole image or region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalHistogram {
    pub bins: Vec<f64>,
}

/// Each pixel votes once into its (h, s, v) cell; the result is
/// L1-normalized.
pub fn global_hsv_histogram(img: &ImageRGB, bins: (usize, usize, usize)) -> GlobalHistogram {
    let (hb, sb, vb) = bins;
    assert!(hb >= 1 && sb >= 1 && vb >= 1, "bin counts must be >= 1");
    let mut hist = vec![0.0f64; hb * sb * vb];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (h, s, v) = rgb_to_hsv(img.pixel(x, y));
            let hi = ((h / 360.0 * hb as f64) as usize).min(hb - 1);
            let si = ((s * sb as f64) as usize).min(sb - 1);
            let vi = ((v * vb as f64) as usize).min(vb - 1);
            hist[(hi * sb + si) * vb + vi] += 1.0;
        }
    }
    let total = (img.width() * img.height()) as f64;
    for w in &mut hist {
        *w /= total;
    }
    GlobalHistogram { bins: hist }
}

/// Squared Euclidean distance between two histograms.
pub fn histogram_dist_sq(a: &GlobalHistogram, b: &GlobalHistogram) -> f64 {
    debug_assert_eq!(a.bins.len(), b.bins.len());
    a.bins.iter().zip(&b.bins).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Descriptors sampled on a regular grid. `dim` consecutive values per grid
/// point, row-major over grid cells. Grid centers sit at
/// `(margin + i * stride)` in image pixels.
#[derive(Debug, Clone)]
pub struct DescriptorGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub stride: usize,
    pub margin_x: usize,
    pub margin_y: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorGrid {
    pub fn descriptor(&self, gx: usize, gy: usize) -> &[f64] {
        let i = (gy * self.grid_w + gx) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Image pixel coordinates of a grid point.
    pub fn center(&self, gx: usize, gy: usize) -> (usize, usize) {
        (self.margin_x + gx * self.stride, self.margin_y + gy * self.stride)
    }

    /// Nearest grid cell for an image pixel.
    pub fn nearest_cell(&self, px: usize, py: usize) -> (usize, usize) {
        let fx = (px as f64 - self.margin_x as f64) / self.stride as f64;
        let fy = (py as f64 - self.margin_y as f64) / self.stride as f64;
        let gx = (fx.round().max(0.0) as usize).min(self.grid_w - 1);
        let gy = (fy.round().max(0.0) as usize).min(self.grid_h - 1);
        (gx, gy)
    }
}

/// Dense SIFT over a fixed-scale, unrotated window at every grid point.
///
/// Each `patch`x`patch` window is split into 4x4 spatial cells with 8
/// orientation bins; gradient magnitudes vote with bilinear interpolation
/// across space and orientation. Descriptors are L2-normalized (zero vector
/// when the norm falls below 1e-8), clamped at 0.2 and renormalized.
pub fn dense_sift(gray: &GrayImage, stride: usize, patch: usize) -> Result<DescriptorGrid> {
    assert!(stride >= 1, "stride must be >= 1");
    assert!(patch >= 4 && patch % 4 == 0, "patch must be a positive multiple of 4");
    let (w, h) = (gray.width(), gray.height());
    if patch > w || patch > h {
        return Err(Error::PatchExceedsImage);
    }
    let grid_w = (w - patch) / stride + 1;
    let grid_h = (h - patch) / stride + 1;

    // Centered-difference gradients with clamped borders, computed once.
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx[y * w + x] = gray.get(xp, y) - gray.get(xm, y);
            gy[y * w + x] = gray.get(x, yp) - gray.get(x, ym);
        }
    }

    let mut data = vec![0.0f64; grid_w * grid_h * SIFT_DIM];
    let cell = patch / 4;
    for gyi in 0..grid_h {
        for gxi in 0..grid_w {
            let ox = gxi * stride;
            let oy = gyi * stride;
            let desc = &mut data[(gyi * grid_w + gxi) * SIFT_DIM..][..SIFT_DIM];
            for v in 0..patch {
                for u in 0..patch {
                    let dx = gx[(oy + v) * w + ox + u];
                    let dy = gy[(oy + v) * w + ox + u];
                    let mag = (dx * dx + dy * dy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    // Orientation bin centers sit at k * 45 degrees; votes
                    // split linearly between the two nearest centers.
                    let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
                    let ob = theta / (std::f64::consts::TAU / 8.0);
                    let o0 = ob.floor();
                    let of = ob - o0;
                    let o0 = (o0 as i64).rem_euclid(8) as usize;
                    let o1 = (o0 + 1) % 8;

                    let cx = (u as f64 + 0.5) / cell as f64 - 0.5;
                    let cy = (v as f64 + 0.5) / cell as f64 - 0.5;
                    let cx0 = cx.floor();
                    let cy0 = cy.floor();
                    let fx = cx - cx0;
                    let fy = cy - cy0;
                    for (ci, wx) in [(cx0 as i64, 1.0 - fx), (cx0 as i64 + 1, fx)] {
                        if !(0..4).contains(&ci) || wx == 0.0 {
                            continue;
                        }
                        for (cj, wy) in [(cy0 as i64, 1.0 - fy), (cy0 as i64 + 1, fy)] {
                            if !(0..4).contains(&cj) || wy == 0.0 {
                                continue;
                            }
                            let base = (cj as usize * 4 + ci as usize) * 8;
                            desc[base + o0] += mag * wx * wy * (1.0 - of);
                            desc[base + o1] += mag * wx * wy * of;
                        }
                    }
                }
            }
            normalize_sift(desc);
        }
    }

    Ok(DescriptorGrid {
        grid_w,
        grid_h,
        stride,
        margin_x: patch / 2,
        margin_y: patch / 2,
        dim: SIFT_DIM,
        data,
    })
}

fn normalize_sift(desc: &mut [f64]) {
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        desc.fill(0.0);
        return;
    }
    for v in desc.iter_mut() {
        *v = (*v / norm).min(0.2);
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in desc.iter_mut() {
        *v /= norm;
    }
}

/// Full per-pixel descriptors on a grid: scaled RGB, scaled HSV, dense SIFT
/// and optional Lab, concatenated in that order.
pub fn pixel_descriptors(img: &ImageRGB, config: &FeatureConfig) -> Result<DescriptorGrid> {
    let sift = dense_sift(&img.to_gray(), config.stride, config.patch)?;
    Ok(assemble_descriptors(img, config, Some(sift)))
}

/// Like [`pixel_descriptors`] but with the SIFT block zeroed; used when the
/// region is smaller than the SIFT patch. The grid then starts at the image
/// origin with no margin.
pub fn pixel_descriptors_color_only(img: &ImageRGB, config: &FeatureConfig) -> DescriptorGrid {
    assemble_descriptors(img, config, None)
}

fn assemble_descriptors(
    img: &ImageRGB,
    config: &FeatureConfig,
    sift: Option<DescriptorGrid>,
) -> DescriptorGrid {
    let dim = config.descriptor_len();
    let (grid_w, grid_h, margin_x, margin_y) = match &sift {
        Some(g) => (g.grid_w, g.grid_h, g.margin_x, g.margin_y),
        None => (
            (img.width() - 1) / config.stride + 1,
            (img.height() - 1) / config.stride + 1,
            0,
            0,
        ),
    };
    let mut data = vec![0.0f64; grid_w * grid_h * dim];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let px = (margin_x + gx * config.stride).min(img.width() - 1);
            let py = (margin_y + gy * config.stride).min(img.height() - 1);
            let out = &mut data[(gy * grid_w + gx) * dim..][..dim];
            write_color_channels(img.pixel(px, py), config.use_lab, out);
            if let Some(g) = &sift {
                out[6..6 + SIFT_DIM].copy_from_slice(g.descriptor(gx, gy));
            }
        }
    }
    DescriptorGrid { grid_w, grid_h, stride: config.stride, margin_x, margin_y, dim, data }
}

/// Color channels of the descriptor layout: RGB/255, then (H/360, S, V),
/// then optionally (L/100, a/128, b/128) after the SIFT block.
fn write_color_channels(rgb: [u8; 3], use_lab: bool, out: &mut [f64]) {
    out[0] = rgb[0] as f64 / 255.0;
    out[1] = rgb[1] as f64 / 255.0;
    out[2] = rgb[2] as f64 / 255.0;
    let (h, s, v) = rgb_to_hsv(rgb);
    out[3] = h / 360.0;
    out[4] = s;
    out[5] = v;
    if use_lab {
        let (l, a, b) = rgb_to_lab(rgb);
        let base = 6 + SIFT_DIM;
        out[base] = l / 100.0;
        out[base + 1] = a / 128.0;
        out[base + 2] = b / 128.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn histogram_constant_color_single_bin() {
        let img = ImageRGB::from_fn(6, 4, |_, _| [255, 0, 0]);
        let hist = global_hsv_histogram(&img, (8, 8, 8));
        let nonzero: Vec<_> = hist.bins.iter().enumerate().filter(|(_, &w)| w > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(*nonzero[0].1, 1.0);
    }

    #[test]
    fn histogram_sums_to_one() {
        let img = ImageRGB::from_fn(9, 7, |x, y| [(x * 29) as u8, (y * 37) as u8, 130]);
        let hist = global_hsv_histogram(&img, (8, 8, 8));
        let sum: f64 = hist.bins.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_red_green_split() {
        // Pure red lands in flat bin 63, pure green in 191 (frozen from the
        // bin-index arithmetic for 8x8x8 bins).
        let img = ImageRGB::from_fn(4, 2, |_, y| if y == 0 { [255, 0, 0] } else { [0, 255, 0] });
        let hist = global_hsv_histogram(&img, (8, 8, 8));
        assert_eq!(hist.bins[63], 0.5);
        assert_eq!(hist.bins[191], 0.5);
        assert_eq!(hist.bins.iter().filter(|&&w| w > 0.0).count(), 2);
    }

    #[test]
    fn sift_constant_image_zero_descriptors() {
        let gray = GrayImage::from_fn(20, 20, |_, _| 0.6);
        let grid = dense_sift(&gray, 2, 16).unwrap();
        assert!(grid.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sift_norm_is_zero_or_one() {
        let gray = GrayImage::from_fn(24, 24, |x, y| ((x * 7 + y * 13) % 10) as f64 / 10.0);
        let grid = dense_sift(&gray, 4, 16).unwrap();
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                let n = grid.descriptor(gx, gy).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-6, "norm {n}");
            }
        }
    }

    #[test]
    fn sift_patch_exceeds_image() {
        let gray = GrayImage::new(10, 10);
        assert!(matches!(dense_sift(&gray, 1, 16), Err(Error::PatchExceedsImage)));
    }

    #[test]
    fn sift_vertical_step_edge_orientation() {
        // Left half dark, right half bright: gradient points along +x.
        let gray = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 1.0 });
        let grid = dense_sift(&gray, 1, 16).unwrap();
        let desc = grid.descriptor(0, 0);

        // Independent check: the dominant gradient direction over the patch,
        // computed directly from centered differences.
        let mut fx = 0.0;
        let mut fy = 0.0;
        for y in 0..16usize {
            for x in 1..15usize {
                fx += gray.get(x + 1, y) - gray.get(x - 1, y);
                fy += 0.0;
            }
        }
        let theta = f64::atan2(fy, fx).rem_euclid(std::f64::consts::TAU);
        let expected_bin = ((theta / (std::f64::consts::TAU / 8.0)) as usize) % 8;

        let mut per_bin = [0.0f64; 8];
        for c in 0..16 {
            for b in 0..8 {
                per_bin[b] += desc[c * 8 + b];
            }
        }
        let argmax = (0..8).max_by(|&a, &b| per_bin[a].partial_cmp(&per_bin[b]).unwrap()).unwrap();
        assert_eq!(argmax, expected_bin);
        // Mass concentrated in the bins adjacent to the gradient direction.
        let adjacent =
            per_bin[expected_bin] + per_bin[(expected_bin + 1) % 8] + per_bin[(expected_bin + 7) % 8];
        let total: f64 = per_bin.iter().sum();
        assert!(adjacent / total > 0.999);
    }

    #[test]
    fn descriptor_length_defaults_and_lab() {
        let img = ImageRGB::from_fn(20, 20, |x, y| [(x * 12) as u8, (y * 12) as u8, 90]);
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.descriptor_len(), 134);
        let grid = pixel_descriptors(&img, &cfg).unwrap();
        assert_eq!(grid.dim, 134);

        let lab_cfg = FeatureConfig { use_lab: true, ..FeatureConfig::default() };
        assert_eq!(lab_cfg.descriptor_len(), 137);
        let grid = pixel_descriptors(&img, &lab_cfg).unwrap();
        assert_eq!(grid.dim, 137);
    }

    #[test]
    fn descriptors_constant_image_identical() {
        let img = ImageRGB::from_fn(24, 20, |_, _| [205, 150, 125]);
        let grid = pixel_descriptors(&img, &FeatureConfig::default()).unwrap();
        let first = grid.descriptor(0, 0).to_vec();
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                assert_eq!(grid.descriptor(gx, gy), &first[..]);
            }
        }
    }

    #[test]
    fn descriptor_grid_count_matches_margin_arithmetic() {
        // stride 1, patch 16 on a WxH image: (W - 16 + 1) x (H - 16 + 1)
        // interior grid points.
        let img = ImageRGB::from_fn(25, 21, |x, y| [x as u8, y as u8, 0]);
        let cfg = FeatureConfig { stride: 1, ..FeatureConfig::default() };
        let grid = pixel_descriptors(&img, &cfg).unwrap();
        assert_eq!(grid.grid_w, 25 - 16 + 1);
        assert_eq!(grid.grid_h, 21 - 16 + 1);
        assert_eq!(grid.data.len(), grid.grid_w * grid.grid_h * 134);
    }

    #[test]
    fn color_channels_match_conversions() {
        let img = ImageRGB::from_fn(20, 20, |x, y| [(x * 11 + 3) as u8, (y * 9 + 40) as u8, 210]);
        let cfg = FeatureConfig { use_lab: true, ..FeatureConfig::default() };
        let grid = pixel_descriptors(&img, &cfg).unwrap();
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                let (px, py) = grid.center(gx, gy);
                let rgb = img.pixel(px, py);
                let d = grid.descriptor(gx, gy);
                let (h, s, v) = rgb_to_hsv(rgb);
                assert_eq!(d[0], rgb[0] as f64 / 255.0);
                assert_eq!(d[3], h / 360.0);
                assert_eq!(d[4], s);
                assert_eq!(d[5], v);
                let (l, a, b) = rgb_to_lab(rgb);
                assert_eq!(d[134], l / 100.0);
                assert_eq!(d[135], a / 128.0);
                assert_eq!(d[136], b / 128.0);
            }
        }
    }

    #[test]
    fn sift_luminance_shift_and_scale_invariance() {
        let gray = GrayImage::from_fn(24, 24, |x, y| ((x * 5 + y * 3) % 13) as f64 / 26.0);
        let transformed = GrayImage::from_fn(24, 24, |x, y| 0.5 * gray.get(x, y) + 0.25);
        let a = dense_sift(&gray, 4, 16).unwrap();
        let b = dense_sift(&transformed, 4, 16).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn histogram_permutation_invariant(seed in 0u64..500) {
            let mut s = seed;
            let mut next = move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 33) as u8
            };
            let pixels: Vec<[u8; 3]> = (0..24).map(|_| [next(), next(), next()]).collect();
            let img = ImageRGB::from_fn(6, 4, |x, y| pixels[y * 6 + x]);
            // Reverse the pixel order: histogram must not change.
            let img_rev = ImageRGB::from_fn(6, 4, |x, y| pixels[23 - (y * 6 + x)]);
            let a = global_hsv_histogram(&img, (8, 8, 8));
            let b = global_hsv_histogram(&img_rev, (8, 8, 8));
            prop_assert_eq!(a, b);
        }
    }
}
