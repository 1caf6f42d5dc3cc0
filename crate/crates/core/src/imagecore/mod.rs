//! Image containers, color conversions, box geometry, NMS, resizing and
//! connected components. Everything here is a pure function over immutable
//! inputs and safe to call from any number of workers.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRGB {
    /// All-black image. Panics on zero dimensions.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be >= 1".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch { expected: width * height * 3, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Rec. 601 luminance, scaled to [0, 1].
    pub fn to_gray(&self) -> GrayImage {
        let values = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        GrayImage { width: self.width, height: self.height, values }
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Self {
        assert!(out_w >= 1 && out_h >= 1, "output dimensions must be >= 1");
        let mut out = Self::new(out_w, out_h);
        for oy in 0..out_h {
            let sy = src_coord(oy, out_h, self.height);
            for ox in 0..out_w {
                let sx = src_coord(ox, out_w, self.width);
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let v = bilinear_sample(sx, sy, self.width, |x, y| {
                        self.data[(y * self.width + x) * 3 + c] as f64
                    });
                    rgb[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                out.set_pixel(ox, oy, rgb);
            }
        }
        out
    }

    /// Crop to `bx`, clamped to the image and rasterized with floor origin /
    /// ceil extent. Errors if the box is fully outside the image.
    pub fn crop(&self, bx: &ScoredBox) -> Result<ImageRGB> {
        let r = bx.raster_in(self.width, self.height).ok_or(Error::EmptyCrop)?;
        let mut out = ImageRGB::new(r.w, r.h);
        for y in 0..r.h {
            let src = ((r.y + y) * self.width + r.x) * 3;
            let dst = y * r.w * 3;
            out.data[dst..dst + r.w * 3].copy_from_slice(&self.data[src..src + r.w * 3]);
        }
        Ok(out)
    }
}

/// Grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.values[y * width + x] = f(x, y);
            }
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be >= 1".into()));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, got: values.len() });
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Self {
        assert!(out_w >= 1 && out_h >= 1, "output dimensions must be >= 1");
        let mut out = Self::new(out_w, out_h);
        for oy in 0..out_h {
            let sy = src_coord(oy, out_h, self.height);
            for ox in 0..out_w {
                let sx = src_coord(ox, out_w, self.width);
                let v = bilinear_sample(sx, sy, self.width, |x, y| self.values[y * self.width + x]);
                out.values[oy * out_w + ox] = v;
            }
        }
        out
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask dimensions must be >= 1");
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn from_raw(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("mask dimensions must be >= 1".into()));
        }
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, got: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbor resize, corner-aligned like the bilinear resizers.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Self {
        assert!(out_w >= 1 && out_h >= 1, "output dimensions must be >= 1");
        let mut out = Self::new(out_w, out_h);
        for oy in 0..out_h {
            let sy = src_coord(oy, out_h, self.height).round() as usize;
            let sy = sy.min(self.height - 1);
            for ox in 0..out_w {
                let sx = src_coord(ox, out_w, self.width).round() as usize;
                let sx = sx.min(self.width - 1);
                out.bits[oy * out_w + ox] = self.bits[sy * self.width + sx];
            }
        }
        out
    }
}

/// Output pixel -> source coordinate under corner-aligned sampling.
#[inline]
fn src_coord(out_i: usize, out_n: usize, in_n: usize) -> f64 {
    if out_n == 1 {
        (in_n - 1) as f64 / 2.0
    } else {
        out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
    }
}

#[inline]
fn bilinear_sample(sx: f64, sy: f64, _w: usize, get: impl Fn(usize, usize) -> f64) -> f64 {
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let v00 = get(x0, y0);
    let v10 = get(x1, y0);
    let v01 = get(x0, y1);
    let v11 = get(x1, y1);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Detection box with a confidence score. Coordinates are real-valued;
/// rasterization happens only at crop/mask boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

/// Integer pixel rectangle produced by rasterizing a box inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl ScoredBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, score: f64) -> Self {
        Self { x, y, w, h, score }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && (0.0..=1.0).contains(&self.score)
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Grow every side by `margin` times the corresponding extent.
    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            x: self.x - margin * self.w,
            y: self.y - margin * self.h,
            w: self.w * (1.0 + 2.0 * margin),
            h: self.h * (1.0 + 2.0 * margin),
            score: self.score,
        }
    }

    /// Clamp the box to image bounds; None when fully outside.
    pub fn clamped(&self, img_w: usize, img_h: usize) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(img_w as f64);
        let y1 = (self.y + self.h).min(img_h as f64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0, score: self.score })
    }

    /// Floor-origin / ceil-extent integer rectangle after clamping to the
    /// image. None when the box misses the image entirely.
    pub fn raster_in(&self, img_w: usize, img_h: usize) -> Option<RasterRect> {
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = (self.x + self.w).ceil().min(img_w as f64);
        let y1 = (self.y + self.h).ceil().min(img_h as f64);
        if x1 <= x0 as f64 || y1 <= y0 as f64 {
            return None;
        }
        let x1 = x1 as usize;
        let y1 = y1 as usize;
        if x0 >= img_w || y0 >= img_h {
            return None;
        }
        Some(RasterRect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &ScoredBox, b: &ScoredBox) -> f64 {
    let ix0 = a.x.max(b.x);
    let iy0 = a.y.max(b.y);
    let ix1 = (a.x + a.w).min(b.x + b.w);
    let iy1 = (a.y + a.h).min(b.y + b.h);
    if ix1 <= ix0 || iy1 <= iy0 {
        return 0.0;
    }
    let inter = (ix1 - ix0) * (iy1 - iy0);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Greedy non-maximum suppression. Boxes are taken in descending score
/// order (ties broken by input order); a box is kept iff its IoU with every
/// already-kept box is <= `iou_thresh`. Output is sorted by score descending.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| iou(k, &boxes[i]) <= iou_thresh) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// RGB -> HSV hexcone. Hue in degrees [0, 360), defined as 0 when the
/// saturation is 0 (black, grays, white).
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let r = rgb[0] as f64 / 255.0;
    let g = rgb[1] as f64 / 255.0;
    let b = rgb[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else {
        let h = if max == r {
            60.0 * ((g - b) / delta)
        } else if max == g {
            60.0 * (2.0 + (b - r) / delta)
        } else {
            60.0 * (4.0 + (r - g) / delta)
        };
        let h = if h < 0.0 { h + 360.0 } else { h };
        if h >= 360.0 {
            h - 360.0
        } else {
            h
        }
    };
    (h, s, v)
}

/// sRGB -> CIE L*a*b* under the D65 white point.
pub fn rgb_to_lab(rgb: [u8; 3]) -> (f64, f64, f64) {
    fn linearize(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let r = linearize(rgb[0]);
    let g = linearize(rgb[1]);
    let b = linearize(rgb[2]);
    let x = 0.4124 * r + 0.3576 * g + 0.1805 * b;
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    let z = 0.0193 * r + 0.1192 * g + 0.9505 * b;
    const XN: f64 = 0.95047;
    const YN: f64 = 1.0;
    const ZN: f64 = 1.08883;
    fn f(t: f64) -> f64 {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    }
    let (fx, fy, fz) = (f(x / XN), f(y / YN), f(z / ZN));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// One 8-connected foreground region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    /// Discovery id, 1-based in row-major scan order.
    pub id: u32,
    pub area: usize,
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl Component {
    pub fn bounding_box(&self) -> ScoredBox {
        ScoredBox::new(
            self.min_x as f64,
            self.min_y as f64,
            (self.max_x - self.min_x + 1) as f64,
            (self.max_y - self.min_y + 1) as f64,
            0.0,
        )
    }
}

/// Per-pixel component labels (0 = background) plus the component list
/// sorted by pixel count descending, ties by discovery id.
#[derive(Debug, Clone)]
pub struct ComponentLabels {
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

/// 8-connected components of a mask, sorted by pixel count descending.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    connected_components_labeled(mask).components
}

pub fn connected_components_labeled(mask: &BinaryMask) -> ComponentLabels {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    let mut next_id = 1u32;
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let id = next_id;
        next_id += 1;
        let mut comp = Component {
            id,
            area: 0,
            min_x: usize::MAX,
            min_y: usize::MAX,
            max_x: 0,
            max_y: 0,
        };
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            comp.area += 1;
            comp.min_x = comp.min_x.min(x);
            comp.min_y = comp.min_y.min(y);
            comp.max_x = comp.max_x.max(x);
            comp.max_y = comp.max_y.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let np = ny as usize * w + nx as usize;
                    if mask.bits[np] && labels[np] == 0 {
                        labels[np] = id;
                        stack.push(np);
                    }
                }
            }
        }
        components.push(comp);
    }
    components.sort_by(|a, b| b.area.cmp(&a.area).then(a.id.cmp(&b.id)));
    ComponentLabels { labels, components }
}
