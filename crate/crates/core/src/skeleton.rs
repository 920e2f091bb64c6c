//! Ground-truth skeleton masks: finger bones drawn as thick lines, palm
//! attachments, and a Gaussian blob on every joint.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result};
use crate::heatmap::{JointSet, Keypoint};

/// Joint indices of a hand and the bones connecting them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandTopology {
    pub joint_count: usize,
    pub palm_index: Option<usize>,
    /// Five chains, root to tip, thumb first.
    pub fingers: Vec<Vec<usize>>,
    pub edges: Vec<(usize, usize)>,
}

impl HandTopology {
    /// Builds a topology and derives its edges.
    ///
    /// With a palm joint, the palm connects to every finger root. Without one,
    /// neighbouring finger roots are chained in finger order.
    pub fn new(joint_count: usize, palm_index: Option<usize>, fingers: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; joint_count];
        let all = fingers.iter().flatten().chain(palm_index.iter());
        for &j in all {
            if j >= joint_count {
                return Err(invalid(format!("joint index {j} out of range for K={joint_count}")));
            }
            if seen[j] {
                return Err(invalid(format!("joint {j} appears in more than one chain")));
            }
            seen[j] = true;
        }
        let mut edges: Vec<(usize, usize)> = fingers
            .iter()
            .flat_map(|chain| chain.windows(2).map(|w| (w[0], w[1])))
            .collect();
        let roots: Vec<usize> = fingers.iter().filter_map(|c| c.first().copied()).collect();
        match palm_index {
            Some(palm) => edges.extend(roots.iter().map(|&r| (palm, r))),
            None => edges.extend(roots.windows(2).map(|w| (w[0], w[1]))),
        }
        Ok(Self { joint_count, palm_index, fingers, edges })
    }

    pub fn id(&self) -> String {
        format!("hand{}", self.joint_count)
    }
}

/// K=21: joint 0 is the wrist/palm, then four joints per finger (thumb first).
/// K=20: four joints per finger and no palm joint.
pub fn default_hand_topology(joint_count: usize) -> Result<HandTopology> {
    let (palm, offset) = match joint_count {
        21 => (Some(0), 1),
        20 => (None, 0),
        k => return Err(invalid(format!("unsupported joint count {k}; expected 20 or 21"))),
    };
    let fingers = (0..5).map(|f| (0..4).map(|j| offset + 4 * f + j).collect()).collect();
    HandTopology::new(joint_count, palm, fingers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub line_thickness: usize,
    pub blob_sigma: f64,
}

impl Default for RasterSpec {
    fn default() -> Self {
        Self { line_thickness: 3, blob_sigma: 2.0 }
    }
}

impl RasterSpec {
    /// The default (3 px lines, sigma 2 at 128 px) scaled to `resolution`.
    pub fn scaled_to(resolution: usize) -> Self {
        let s = resolution as f64 / 128.0;
        Self {
            line_thickness: ((3.0 * s).round() as usize).max(1),
            blob_sigma: 2.0 * s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.line_thickness == 0 {
            return Err(invalid("line thickness must be >= 1"));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return Err(invalid(format!("blob sigma must be positive, got {}", self.blob_sigma)));
        }
        Ok(())
    }
}

/// Single-channel soft mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SkeletonImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(structural(format!(
                "skeleton {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("skeleton value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn stamp(&mut self, x: i64, y: i64, value: f64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let v = &mut self.values[y as usize * self.width + x as usize];
            *v = v.max(value);
        }
    }
}

/// Clips the segment to `[lo, hi]` on both axes (Liang-Barsky).
fn clip_segment(a: Keypoint, b: Keypoint, lo: f64, hi_x: f64, hi_y: f64) -> Option<(Keypoint, Keypoint)> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [(-dx, a.x - lo), (dx, hi_x - a.x), (-dy, a.y - lo), (dy, hi_y - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then(|| {
        (
            Keypoint::new(a.x + t0 * dx, a.y + t0 * dy),
            Keypoint::new(a.x + t1 * dx, a.y + t1 * dy),
        )
    })
}

/// Integer pixels of the Bresenham line between two rounded endpoints.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Pointwise max of the thick bone lines (value 1) and the joint blobs.
pub fn rasterize_skeleton(
    joints: &JointSet,
    topo: &HandTopology,
    width: usize,
    height: usize,
    spec: RasterSpec,
) -> Result<SkeletonImage> {
    spec.validate()?;
    if joints.len() != topo.joint_count {
        return Err(structural(format!(
            "topology expects {} joints, got {}",
            topo.joint_count,
            joints.len()
        )));
    }
    if let Some((k, _)) = joints.iter().enumerate().find(|(_, j)| !j.is_finite()) {
        return Err(invalid(format!("joint {k} is not finite")));
    }
    let mut img = SkeletonImage::zeros(width, height);
    if width == 0 || height == 0 {
        return Ok(img);
    }

    let t = spec.line_thickness as i64;
    let (lo_off, hi_off) = (-(t - 1) / 2, t / 2);
    let margin = t as f64 + 1.0;
    for &(a, b) in &topo.edges {
        let (pa, pb) = (joints.joints[a], joints.joints[b]);
        if pa.x.round() == pb.x.round() && pa.y.round() == pb.y.round() {
            continue;
        }
        let Some((ca, cb)) =
            clip_segment(pa, pb, -margin, width as f64 - 1.0 + margin, height as f64 - 1.0 + margin)
        else {
            continue;
        };
        for (x, y) in bresenham(ca.x.round() as i64, ca.y.round() as i64, cb.x.round() as i64, cb.y.round() as i64) {
            for oy in lo_off..=hi_off {
                for ox in lo_off..=hi_off {
                    img.stamp(x + ox, y + oy, 1.0);
                }
            }
        }
    }

    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    // blobs below this are invisible after 8-bit quantisation anyway
    let reach = (spec.blob_sigma * (2.0 * 1e4f64.ln()).sqrt()).ceil() as i64 + 1;
    for j in joints.iter() {
        let (cx, cy) = (j.x.round() as i64, j.y.round() as i64);
        for y in (cy - reach).max(0)..=(cy + reach).min(height as i64 - 1) {
            let gy = (y as f64 - j.y).powi(2);
            for x in (cx - reach).max(0)..=(cx + reach).min(width as i64 - 1) {
                let g = (-((x as f64 - j.x).powi(2) + gy) * inv).exp();
                img.stamp(x, y, g);
            }
        }
    }
    for v in &mut img.values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}
