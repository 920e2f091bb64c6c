//! Hand presence and bounding box from a predicted skeleton image:
//! thresholding, 4-connected region growing, and box extraction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result};
use crate::heatmap::{JointSet, Keypoint};
use crate::skeleton::SkeletonImage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(structural(format!("mask {width}x{height} needs {} bits, got {}", width * height, bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Inclusive pixel box: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(invalid(format!("box ({x_min},{y_min},{x_max},{y_max}) has min > max")));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Pixel) -> bool {
        (self.x_min..=self.x_max).contains(&p.col) && (self.y_min..=self.y_max).contains(&p.row)
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max < width && self.y_max < height
    }

    /// Continuous centre in pixel-sample coordinates.
    pub fn center(&self) -> Keypoint {
        Keypoint::new((self.x_min + self.x_max) as f64 / 2.0, (self.y_min + self.y_max) as f64 / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub foreground_threshold: f64,
    pub presence_count: usize,
}

impl Default for DetectorThresholds {
    fn default() -> Self {
        Self { foreground_threshold: 0.5, presence_count: 300 }
    }
}

impl DetectorThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.foreground_threshold > 0.0 && self.foreground_threshold < 1.0) {
            return Err(invalid(format!("foreground threshold {} not in (0, 1)", self.foreground_threshold)));
        }
        if self.presence_count == 0 {
            return Err(invalid("presence count must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDecision {
    pub hand_present: bool,
    pub foreground_pixels: usize,
    pub bbox: Option<BoundingBox>,
}

pub fn binarize(img: &SkeletonImage, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: img.width,
        height: img.height,
        bits: img.values.iter().map(|v| *v >= threshold).collect(),
    }
}

/// 4-connected components, ordered by their first pixel in row-major order.
/// Pixels inside each component are in discovery (BFS) order.
pub fn region_grow(mask: &BinaryMask) -> Vec<Vec<Pixel>> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..w * h {
        if !mask.bits[seed] || visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        let mut region = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            region.push(Pixel::new(r, c));
            let mut visit = |j: usize| {
                if mask.bits[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        regions.push(region);
    }
    regions
}

pub fn bbox_of_region(region: &[Pixel]) -> Result<BoundingBox> {
    let first = region.first().ok_or_else(|| invalid("empty region has no bounding box"))?;
    let init = BoundingBox { x_min: first.col, y_min: first.row, x_max: first.col, y_max: first.row };
    Ok(region.iter().fold(init, |b, p| BoundingBox {
        x_min: b.x_min.min(p.col),
        y_min: b.y_min.min(p.row),
        x_max: b.x_max.max(p.col),
        y_max: b.y_max.max(p.row),
    }))
}

/// Hand present iff the foreground count reaches `presence_count`; the box is
/// that of the largest component (earliest one on ties).
pub fn decide_hand_presence(img: &SkeletonImage, th: &DetectorThresholds) -> Result<DetectionDecision> {
    th.validate()?;
    let mask = binarize(img, th.foreground_threshold);
    let foreground_pixels = mask.count();
    let hand_present = foreground_pixels > 0 && foreground_pixels >= th.presence_count;
    let bbox = if hand_present {
        let regions = region_grow(&mask);
        let largest = regions
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(_, r)| r)
            .expect("foreground implies a region");
        Some(bbox_of_region(largest)?)
    } else {
        None
    };
    Ok(DetectionDecision { hand_present, foreground_pixels, bbox })
}

/// Interleaved multi-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(structural(format!(
                "image {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Appends the channels of `other` after this image's channels.
    pub fn stack(&self, other: &FloatImage) -> Result<FloatImage> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(structural("stacked images differ in size"));
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.width * self.height * channels);
        for (a, b) in self.data.chunks(self.channels).zip(other.data.chunks(other.channels)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        FloatImage::new(self.width, self.height, channels, data)
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

/// Axis-aligned map from source pixel coordinates into a crop:
/// `p' = (p - origin + 0.5) * scale - 0.5`, with pixel centres at integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl CropTransform {
    pub fn apply(&self, p: Keypoint) -> Keypoint {
        Keypoint::new(
            (p.x - self.origin_x + 0.5) * self.scale_x - 0.5,
            (p.y - self.origin_y + 0.5) * self.scale_y - 0.5,
        )
    }

    pub fn invert(&self, p: Keypoint) -> Keypoint {
        Keypoint::new(
            (p.x + 0.5) / self.scale_x - 0.5 + self.origin_x,
            (p.y + 0.5) / self.scale_y - 0.5 + self.origin_y,
        )
    }

    pub fn apply_all(&self, joints: &JointSet) -> JointSet {
        joints.map(|j| self.apply(*j))
    }
}

/// Box grown by `margin * max side` per side, clamped to the image.
pub fn expand_box(b: &BoundingBox, margin: f64, width: usize, height: usize) -> Result<BoundingBox> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(invalid(format!("margin {margin} must be >= 0")));
    }
    if b.x_min >= width || b.y_min >= height {
        return Err(invalid("box does not intersect the image"));
    }
    let pad = (margin * b.width().max(b.height()) as f64).round() as usize;
    Ok(BoundingBox {
        x_min: b.x_min.saturating_sub(pad),
        y_min: b.y_min.saturating_sub(pad),
        x_max: (b.x_max + pad).min(width - 1),
        y_max: (b.y_max + pad).min(height - 1),
    })
}

/// Crops the (margin-expanded) box and resamples it to `out x out` with
/// bilinear interpolation at pixel centres.
pub fn crop_and_resize(image: &FloatImage, bbox: &BoundingBox, out: usize, margin: f64) -> Result<(FloatImage, CropTransform)> {
    if out == 0 {
        return Err(invalid("output size must be >= 1"));
    }
    let region = expand_box(bbox, margin, image.width, image.height)?;
    let transform = CropTransform {
        origin_x: region.x_min as f64,
        origin_y: region.y_min as f64,
        scale_x: out as f64 / region.width() as f64,
        scale_y: out as f64 / region.height() as f64,
    };
    let ch = image.channels;
    let mut data = Vec::with_capacity(out * out * ch);
    let taps = |i: usize, origin: usize, scale: f64, size: usize| {
        let s = ((i as f64 + 0.5) / scale - 0.5 + origin as f64).clamp(0.0, (size - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..out).map(|i| taps(i, region.x_min, transform.scale_x, image.width)).collect();
    for oy in 0..out {
        let (y0, y1, fy) = taps(oy, region.y_min, transform.scale_y, image.height);
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let top = image.get(x0, y0, c) * (1.0 - fx) + image.get(x1, y0, c) * fx;
                let bottom = image.get(x0, y1, c) * (1.0 - fx) + image.get(x1, y1, c) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok((FloatImage::new(out, out, ch, data)?, transform))
}
