//! Grasp feature stage: HOG on masked chips, jitter augmentation, and PCA
//! down to a compact descriptor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imagecore::{BinaryMask, GrayImage, ImageRGB, ScoredBox};
use crate::refine::{extract_hand_instance, HandInstance};
use crate::{Error, Result};

/// HOG template geometry, in pixels. Orientation histograms use gradient
/// angle with bin centers at k * (range / bins); unsigned mode folds angles
/// into [0, 180).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HOGParams {
    pub cell: usize,
    pub block: usize,
    pub stride: usize,
    pub bins: usize,
    pub signed: bool,
}

impl Default for HOGParams {
    fn default() -> Self {
        Self { cell: 8, block: 16, stride: 8, bins: 9, signed: false }
    }
}

impl HOGParams {
    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.bins == 0 {
            return Err(Error::InvalidInput("cell and bins must be positive".into()));
        }
        if self.block % self.cell != 0 || self.stride % self.cell != 0 || self.stride > self.block {
            return Err(Error::InvalidInput(
                "block and stride must be cell multiples with stride <= block".into(),
            ));
        }
        Ok(())
    }

    /// Descriptor length for a `w`x`h` input.
    pub fn feature_len(&self, w: usize, h: usize) -> Result<usize> {
        self.validate()?;
        if w % self.cell != 0 || h % self.cell != 0 || w < self.block || h < self.block {
            return Err(Error::InvalidInput(format!(
                "chip {w}x{h} incompatible with cell {} / block {}",
                self.cell, self.block
            )));
        }
        let bx = (w - self.block) / self.stride + 1;
        let by = (h - self.block) / self.stride + 1;
        let cpb = self.block / self.cell;
        Ok(bx * by * cpb * cpb * self.bins)
    }
}

/// Block-normalized histogram-of-oriented-gradients descriptor.
///
/// Centered [-1, 0, 1] gradients (borders clamped), linear orientation
/// interpolation into the cell histograms, 2x2-cell blocks L2-normalized
/// with epsilon 1e-6 and concatenated row-major.
pub fn hog(chip: &GrayImage, params: &HOGParams) -> Result<Vec<f64>> {
    let (w, h) = (chip.width(), chip.height());
    let expected_len = params.feature_len(w, h)?;

    let range = if params.signed { std::f64::consts::TAU } else { std::f64::consts::PI };
    let bin_width = range / params.bins as f64;
    let cells_x = w / params.cell;
    let cells_y = h / params.cell;
    let mut cells = vec![0.0f64; cells_x * cells_y * params.bins];

    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let dx = chip.get(xp, y) - chip.get(xm, y);
            let dy = chip.get(x, yp) - chip.get(x, ym);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = dy.atan2(dx);
            if params.signed {
                theta = theta.rem_euclid(std::f64::consts::TAU);
            } else {
                theta = theta.rem_euclid(std::f64::consts::PI);
            }
            let ob = theta / bin_width;
            let o0 = ob.floor();
            let of = ob - o0;
            let o0 = (o0 as usize) % params.bins;
            let o1 = (o0 + 1) % params.bins;
            let c = (y / params.cell) * cells_x + x / params.cell;
            cells[c * params.bins + o0] += mag * (1.0 - of);
            cells[c * params.bins + o1] += mag * of;
        }
    }

    let cpb = params.block / params.cell;
    let stride_cells = params.stride / params.cell;
    let blocks_x = (w - params.block) / params.stride + 1;
    let blocks_y = (h - params.block) / params.stride + 1;
    let block_len = cpb * cpb * params.bins;
    let mut out = Vec::with_capacity(expected_len);
    const EPS: f64 = 1e-6;
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let start = out.len();
            for cj in 0..cpb {
                for ci in 0..cpb {
                    let cy = by * stride_cells + cj;
                    let cx = bx * stride_cells + ci;
                    let c = cy * cells_x + cx;
                    out.extend_from_slice(&cells[c * params.bins..(c + 1) * params.bins]);
                }
            }
            let block = &mut out[start..start + block_len];
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
            for v in block {
                *v /= norm;
            }
        }
    }
    debug_assert_eq!(out.len(), expected_len);
    Ok(out)
}

/// HOG of a hand chip's luminance.
pub fn chip_hog(chip: &ImageRGB, params: &HOGParams) -> Result<Vec<f64>> {
    hog(&chip.to_gray(), params)
}

/// Jitter augmentation ranges. Scale is sampled uniformly from `scale`,
/// shifts from `shift` as a fraction of the box extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub scale: (f64, f64),
    pub shift: (f64, f64),
}

impl Default for JitterParams {
    fn default() -> Self {
        Self { scale: (0.9, 1.1), shift: (-0.1, 0.1) }
    }
}

/// Produces `n` instances: the original followed by n-1 re-extractions from
/// randomly scaled and shifted boxes. The hand mask travels with the box by
/// nearest-neighbor lookup. A draw whose box leaves the image (or loses the
/// mask entirely) is re-sampled up to 10 times, then clamped; if extraction
/// still fails the original is substituted. Deterministic per seed.
pub fn jitter(
    img: &ImageRGB,
    inst: &HandInstance,
    n: usize,
    params: &JitterParams,
    seed: u64,
) -> Vec<HandInstance> {
    assert!(n >= 1, "n must be >= 1");
    let mut out = Vec::with_capacity(n);
    out.push(inst.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 1..n {
        let mut produced = None;
        for attempt in 0..10 {
            let s = sample_range(&mut rng, params.scale);
            let dx = sample_range(&mut rng, params.shift) * inst.bbox.w;
            let dy = sample_range(&mut rng, params.shift) * inst.bbox.h;
            let new_w = inst.bbox.w * s;
            let new_h = inst.bbox.h * s;
            let mut bx = ScoredBox::new(
                inst.bbox.x + (inst.bbox.w - new_w) / 2.0 + dx,
                inst.bbox.y + (inst.bbox.h - new_h) / 2.0 + dy,
                new_w,
                new_h,
                inst.bbox.score,
            );
            if attempt == 9 {
                bx = match bx.clamped(img.width(), img.height()) {
                    Some(c) => c,
                    None => break,
                };
            }
            if let Some(j) = reextract(img, inst, &bx) {
                produced = Some(j);
                break;
            }
        }
        out.push(produced.unwrap_or_else(|| inst.clone()));
    }
    out
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn reextract(img: &ImageRGB, inst: &HandInstance, bx: &ScoredBox) -> Option<HandInstance> {
    let src_rect = inst.bbox.raster_in(img.width(), img.height())?;
    let dst_rect = bx.raster_in(img.width(), img.height())?;
    let mut mask = BinaryMask::new(dst_rect.w, dst_rect.h);
    for y in 0..dst_rect.h {
        for x in 0..dst_rect.w {
            // Pixel center in the jittered box -> source box -> source mask.
            let u = (dst_rect.x as f64 + x as f64 + 0.5 - bx.x) / bx.w;
            let v = (dst_rect.y as f64 + y as f64 + 0.5 - bx.y) / bx.h;
            let sx = (inst.bbox.x + u * inst.bbox.w - 0.5).round();
            let sy = (inst.bbox.y + v * inst.bbox.h - 0.5).round();
            if sx < src_rect.x as f64 || sy < src_rect.y as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            if sx >= src_rect.x + src_rect.w || sy >= src_rect.y + src_rect.h {
                continue;
            }
            if inst.mask.get(sx - src_rect.x, sy - src_rect.y) {
                mask.set(x, y, true);
            }
        }
    }
    let mut new_inst = extract_hand_instance(img, bx, &mask).ok()?;
    new_inst.image_id = inst.image_id.clone();
    new_inst.mean_skin_prob = inst.mean_skin_prob;
    Some(new_inst)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Linear projection onto the top principal components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCAModel {
    pub mean: Vec<f64>,
    /// Row-orthonormal, one row per component, variance order.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// Fits PCA via eigendecomposition of whichever of the Gram or covariance
/// matrix is smaller. Deterministic sign convention: the largest-magnitude
/// entry of every component is positive.
pub fn pca_fit(x: &[Vec<f64>], d: usize) -> Result<PCAModel> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidInput("pca needs at least 2 samples".into()));
    }
    let dim = x[0].len();
    for row in x {
        if row.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
        }
    }
    if d == 0 || d > (n - 1).min(dim) {
        return Err(Error::InvalidInput(format!(
            "d = {d} too large for {n} samples of dimension {dim}"
        )));
    }

    let mut mean = vec![0.0f64; dim];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let centered = nalgebra::DMatrix::from_fn(n, dim, |i, j| x[i][j] - mean[j]);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut variances: Vec<f64> = Vec::with_capacity(d);

    if n <= dim {
        // Gram trick: eigenvectors of X Xt lift to feature space.
        let gram = &centered * centered.transpose();
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let tol = eig.eigenvalues[order[0]].max(0.0) * 1e-12 + 1e-300;
        for &i in order.iter().take(d) {
            let lambda = eig.eigenvalues[i];
            if lambda > tol {
                let u = eig.eigenvectors.column(i);
                let v = centered.transpose() * u / lambda.sqrt();
                components.push(v.iter().copied().collect());
                variances.push(lambda / (n - 1) as f64);
            } else {
                components.push(orthonormal_complement(&components, dim));
                variances.push(0.0);
            }
        }
    } else {
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        for &i in order.iter().take(d) {
            components.push(eig.eigenvectors.column(i).iter().copied().collect());
            variances.push(eig.eigenvalues[i].max(0.0));
        }
    }

    for comp in &mut components {
        fix_sign(comp);
    }

    Ok(PCAModel { mean, components, explained_variance: variances })
}

/// Deterministic unit vector orthogonal to all rows in `components`:
/// Gram-Schmidt over the standard basis, first direction that survives.
fn orthonormal_complement(components: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for basis in 0..dim {
        let mut v = vec![0.0f64; dim];
        v[basis] = 1.0;
        for c in components {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            for vi in &mut v {
                *vi /= norm;
            }
            return v;
        }
    }
    unreachable!("fewer than dim orthonormal components exist")
}

fn fix_sign(comp: &mut [f64]) {
    let mut max_i = 0;
    for (i, v) in comp.iter().enumerate() {
        if v.abs() > comp[max_i].abs() {
            max_i = i;
        }
    }
    if comp[max_i] < 0.0 {
        for v in comp.iter_mut() {
            *v = -*v;
        }
    }
}

/// Projects `x` onto the components: `components . (x - mean)`.
pub fn pca_transform(model: &PCAModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.mean.len() {
        return Err(Error::DimensionMismatch { expected: model.mean.len(), got: x.len() });
    }
    Ok(model
        .components
        .iter()
        .map(|c| c.iter().zip(x).zip(&model.mean).map(|((ci, xi), mi)| ci * (xi - mi)).sum())
        .collect())
}

/// Reconstruction from the projected coordinates, for verification.
pub fn pca_reconstruct(model: &PCAModel, z: &[f64]) -> Vec<f64> {
    let mut out = model.mean.clone();
    for (c, &zi) in model.components.iter().zip(z) {
        for (o, ci) in out.iter_mut().zip(c) {
            *o += zi * ci;
        }
    }
    out
}
