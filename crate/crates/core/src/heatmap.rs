//! Gaussian heatmap encoding, argmax decoding and multi-scale fusion.
//!
//! Pixel `(u, v)` of a map is column `u`, row `v`; a keypoint at integer
//! coordinates sits exactly on that pixel's sample. Maps are stored row-major.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result};

/// A continuous 2D image location, `x` along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An ordered set of joints. Channel `k` of every heatmap stack belongs to
/// joint `k`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JointSet {
    pub joints: Vec<Keypoint>,
}

impl JointSet {
    pub fn new(joints: Vec<Keypoint>) -> Self {
        Self { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keypoint> {
        self.joints.iter()
    }

    /// Applies `f` to every joint, keeping the order.
    pub fn map(&self, f: impl Fn(&Keypoint) -> Keypoint) -> JointSet {
        JointSet::new(self.joints.iter().map(f).collect())
    }
}

impl FromIterator<Keypoint> for JointSet {
    fn from_iter<I: IntoIterator<Item = Keypoint>>(iter: I) -> Self {
        JointSet::new(iter.into_iter().collect())
    }
}

/// Single-channel map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("heatmap dimensions must be >= 1, got {width}x{height}")));
        }
        Self::from_values(width, height, vec![value; width * height])
    }

    /// Wraps row-major values, rejecting anything outside `[0, 1]`.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("heatmap dimensions must be >= 1, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(structural(format!(
                "heatmap {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("heatmap value {bad} outside [0, 1]")));
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }
}

/// Same-resolution stack of per-joint heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    maps: Vec<Heatmap>,
}

impl HeatmapStack {
    pub fn new(maps: Vec<Heatmap>) -> Result<Self> {
        if let Some(first) = maps.first() {
            if let Some((k, m)) = maps
                .iter()
                .enumerate()
                .find(|(_, m)| m.width != first.width || m.height != first.height)
            {
                return Err(structural(format!(
                    "channel {k} is {}x{}, expected {}x{}",
                    m.width, m.height, first.width, first.height
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Heatmap] {
        &self.maps
    }

    pub fn channels(&self) -> usize {
        self.maps.len()
    }

    /// `(width, height)` of every channel, `None` for an empty stack.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.maps.first().map(|m| (m.width, m.height))
    }

    /// Per-channel argmax.
    pub fn decode(&self) -> JointSet {
        self.maps.iter().map(decode_argmax).collect()
    }
}

/// One level of a multi-scale prediction: a stack plus its fusion weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub stack: HeatmapStack,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl ScalePyramid {
    pub fn new(levels: Vec<PyramidLevel>) -> Self {
        Self { levels }
    }
}

/// Width of the Gaussian blob, defined at a reference resolution and scaled
/// proportionally to the resolution of the map being encoded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub sigma: f64,
    pub reference_resolution: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { sigma: 2.0, reference_resolution: 128.0 }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.reference_resolution > 0.0 && self.reference_resolution.is_finite()) {
            return Err(invalid(format!(
                "reference resolution must be positive, got {}",
                self.reference_resolution
            )));
        }
        Ok(())
    }

    /// Sigma in pixels for a map whose larger side is `resolution`.
    pub fn sigma_at(&self, resolution: usize) -> f64 {
        self.sigma * resolution as f64 / self.reference_resolution
    }
}

/// Renders `exp(-d^2 / 2 sigma^2)` around `joint` over a `width x height` grid.
pub fn encode_joint(joint: Keypoint, width: usize, height: usize, spec: GaussianSpec) -> Result<Heatmap> {
    spec.validate()?;
    if !joint.is_finite() {
        return Err(invalid(format!("joint ({}, {}) is not finite", joint.x, joint.y)));
    }
    if width == 0 || height == 0 {
        return Err(invalid(format!("heatmap dimensions must be >= 1, got {width}x{height}")));
    }
    let sigma = spec.sigma_at(width.max(height));
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gx: Vec<f64> = (0..width).map(|u| (-(u as f64 - joint.x).powi(2) * inv).exp()).collect();
    let mut values = Vec::with_capacity(width * height);
    for v in 0..height {
        let gy = (-(v as f64 - joint.y).powi(2) * inv).exp();
        values.extend(gx.iter().map(|g| g * gy));
    }
    Ok(Heatmap { width, height, values })
}

pub fn encode_joint_set(joints: &JointSet, width: usize, height: usize, spec: GaussianSpec) -> Result<HeatmapStack> {
    let maps = joints
        .iter()
        .enumerate()
        .map(|(k, j)| {
            encode_joint(*j, width, height, spec).map_err(|e| invalid(format!("channel {k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    HeatmapStack::new(maps)
}

/// Location of the maximum; ties go to the first pixel in row-major order.
pub fn decode_argmax(map: &Heatmap) -> Keypoint {
    let mut best = 0;
    for (i, &v) in map.values.iter().enumerate() {
        if v > map.values[best] {
            best = i;
        }
    }
    Keypoint::new((best % map.width) as f64, (best / map.width) as f64)
}

/// Corner-aligned bilinear resampling: output corners sample input corners.
pub fn resize_bilinear(map: &Heatmap, new_width: usize, new_height: usize) -> Result<Heatmap> {
    if new_width == 0 || new_height == 0 {
        return Err(invalid(format!("target dimensions must be >= 1, got {new_width}x{new_height}")));
    }
    let values = resample_corner_aligned(&map.values, map.width, map.height, new_width, new_height);
    Ok(Heatmap { width: new_width, height: new_height, values })
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = if dst > 1 { (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
    (0..dst)
        .map(|i| {
            let p = i as f64 * scale;
            let i0 = (p.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

pub(crate) fn resample_corner_aligned(
    values: &[f64],
    width: usize,
    height: usize,
    new_width: usize,
    new_height: usize,
) -> Vec<f64> {
    let xs = axis_taps(width, new_width);
    let ys = axis_taps(height, new_height);
    let mut out = Vec::with_capacity(new_width * new_height);
    for &(y0, y1, fy) in &ys {
        let r0 = &values[y0 * width..(y0 + 1) * width];
        let r1 = &values[y1 * width..(y1 + 1) * width];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Maps a coordinate between two grids under the corner-aligned convention
/// used by [`resize_bilinear`].
pub fn rescale_corner_aligned(p: Keypoint, from: (usize, usize), to: (usize, usize)) -> Keypoint {
    let f = |c: f64, a: usize, b: usize| {
        if a > 1 {
            c * (b.max(1) - 1) as f64 / (a - 1) as f64
        } else {
            0.0
        }
    };
    Keypoint::new(f(p.x, from.0, to.0), f(p.y, from.1, to.1))
}

/// Weighted average of every level, resampled to the finest resolution.
pub fn fuse_pyramid_maps(pyr: &ScalePyramid) -> Result<HeatmapStack> {
    let first = pyr.levels.first().ok_or_else(|| invalid("pyramid has no levels"))?;
    let channels = first.stack.channels();
    for (i, level) in pyr.levels.iter().enumerate() {
        if level.stack.channels() != channels {
            return Err(structural(format!(
                "level {i} has {} channels, level 0 has {channels}",
                level.stack.channels()
            )));
        }
        if !(level.weight > 0.0 && level.weight.is_finite()) {
            return Err(invalid(format!("level {i} weight {} must be positive", level.weight)));
        }
    }
    if channels == 0 {
        return HeatmapStack::new(Vec::new());
    }
    let (width, height) = pyr
        .levels
        .iter()
        .filter_map(|l| l.stack.resolution())
        .max_by_key(|(w, h)| w * h)
        .expect("non-empty stacks");
    let total: f64 = pyr.levels.iter().map(|l| l.weight).sum();
    let mut fused = Vec::with_capacity(channels);
    for k in 0..channels {
        let mut acc = vec![0.0; width * height];
        for level in &pyr.levels {
            let map = &level.stack.maps()[k];
            let resized;
            let values = if (map.width, map.height) == (width, height) {
                map.values()
            } else {
                resized = resample_corner_aligned(map.values(), map.width, map.height, width, height);
                &resized
            };
            for (a, v) in acc.iter_mut().zip(values) {
                *a += level.weight * v;
            }
        }
        for a in &mut acc {
            *a = (*a / total).clamp(0.0, 1.0);
        }
        fused.push(Heatmap { width, height, values: acc });
    }
    HeatmapStack::new(fused)
}

/// Fuses the pyramid in heatmap space, then decodes each channel by argmax.
pub fn fuse_pyramid(pyr: &ScalePyramid) -> Result<JointSet> {
    Ok(fuse_pyramid_maps(pyr)?.decode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(sigma: f64, reference: f64) -> GaussianSpec {
        GaussianSpec { sigma, reference_resolution: reference }
    }

    #[test]
    fn peak_and_neighbour_values() {
        let m = encode_joint(Keypoint::new(5.0, 7.0), 16, 16, spec(2.0, 16.0)).unwrap();
        assert_eq!(m.get(5, 7), 1.0);
        assert!((m.get(7, 7) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((m.get(7, 7) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn diagonal_joint_is_symmetric() {
        let m = encode_joint(Keypoint::new(0.0, 0.0), 8, 8, spec(2.0, 8.0)).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                assert_eq!(m.get(u, v), m.get(v, u));
            }
        }
    }

    #[test]
    fn non_finite_joint_is_rejected() {
        let err = encode_joint(Keypoint::new(f64::NAN, 1.0), 4, 4, GaussianSpec::default());
        assert!(matches!(err, Err(crate::Error::InvalidInput(_))));
        let set = JointSet::new(vec![Keypoint::new(1.0, 1.0), Keypoint::new(f64::INFINITY, 0.0)]);
        let err = encode_joint_set(&set, 4, 4, GaussianSpec::default()).unwrap_err();
        assert!(err.to_string().contains("channel 1"), "{err}");
    }

    #[test]
    fn off_image_joint_is_clamped_not_wrapped() {
        let m = encode_joint(Keypoint::new(-3.0, 2.0), 8, 8, spec(2.0, 8.0)).unwrap();
        assert_eq!(decode_argmax(&m), Keypoint::new(0.0, 2.0));
        assert!(m.get(7, 2) < m.get(0, 2));
    }

    #[test]
    fn stack_keeps_order_and_duplicates() {
        let joints: JointSet = (0..21).map(|i| Keypoint::new(i as f64, (20 - i) as f64)).collect();
        let stack = encode_joint_set(&joints, 24, 24, GaussianSpec::default()).unwrap();
        assert_eq!(stack.channels(), 21);
        assert_eq!(stack.decode(), joints);

        let twins = JointSet::new(vec![Keypoint::new(3.0, 4.0); 2]);
        let stack = encode_joint_set(&twins, 8, 8, GaussianSpec::default()).unwrap();
        assert_eq!(stack.maps()[0], stack.maps()[1]);
    }

    #[test]
    fn argmax_rules() {
        let mut values = vec![0.0; 16 * 16];
        values[7 * 16 + 5] = 1.0;
        let m = Heatmap::from_values(16, 16, values).unwrap();
        assert_eq!(decode_argmax(&m), Keypoint::new(5.0, 7.0));
        let uniform = Heatmap::filled(9, 5, 0.3).unwrap();
        assert_eq!(decode_argmax(&uniform), Keypoint::new(0.0, 0.0));
        let enc = encode_joint(Keypoint::new(9.0, 3.0), 16, 16, spec(2.0, 16.0)).unwrap();
        assert_eq!(decode_argmax(&enc), Keypoint::new(9.0, 3.0));
    }

    #[test]
    fn heatmap_rejects_out_of_range_values() {
        assert!(Heatmap::from_values(2, 1, vec![0.5, 1.5]).is_err());
        assert!(Heatmap::from_values(2, 1, vec![0.5]).is_err());
        assert!(Heatmap::zeros(0, 3).is_err());
    }

    #[test]
    fn resize_two_by_two_row() {
        let m = Heatmap::from_values(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&m, 4, 2).unwrap();
        for row in r.values().chunks(4) {
            let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn resize_constant_map() {
        let m = Heatmap::filled(3, 5, 0.25).unwrap();
        for (w, h) in [(1, 1), (7, 2), (30, 17)] {
            let r = resize_bilinear(&m, w, h).unwrap();
            assert!(r.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        assert!(resize_bilinear(&m, 0, 2).is_err());
    }

    #[test]
    fn resize_is_exact_on_bilinear_fields() {
        // f(u, v) = a + b u + c v + d u v, sampled on [0,1]-valued grids
        let f = |u: f64, v: f64| 0.1 + 0.02 * u + 0.03 * v + 0.004 * u * v;
        let (w, h) = (6, 5);
        let values: Vec<f64> = (0..h).flat_map(|v| (0..w).map(move |u| f(u as f64, v as f64))).collect();
        let m = Heatmap::from_values(w, h, values).unwrap();
        let (nw, nh) = (11, 13);
        let r = resize_bilinear(&m, nw, nh).unwrap();
        for v in 0..nh {
            for u in 0..nw {
                let su = u as f64 * (w - 1) as f64 / (nw - 1) as f64;
                let sv = v as f64 * (h - 1) as f64 / (nh - 1) as f64;
                assert!((r.get(u, v) - f(su, sv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upscaled_peak_lands_near_scaled_location() {
        // oracle: dense evaluation of the bilinear surface at every output pixel
        let m = encode_joint(Keypoint::new(5.0, 3.0), 8, 8, spec(1.0, 8.0)).unwrap();
        let r = resize_bilinear(&m, 32, 32).unwrap();
        let peak = decode_argmax(&r);
        let expected = rescale_corner_aligned(Keypoint::new(5.0, 3.0), (8, 8), (32, 32));
        assert!((peak.x - expected.x).abs() <= 1.0 && (peak.y - expected.y).abs() <= 1.0);
    }

    fn single_peak_stack(k: usize, res: usize, at: Keypoint) -> HeatmapStack {
        encode_joint_set(&JointSet::new(vec![at; k]), res, res, spec(1.5, res as f64)).unwrap()
    }

    #[test]
    fn fusion_of_one_level_is_plain_decode() {
        let joints: JointSet = (0..5).map(|i| Keypoint::new(i as f64 * 3.0, 15.0 - i as f64)).collect();
        let stack = encode_joint_set(&joints, 16, 16, GaussianSpec::default()).unwrap();
        let pyr = ScalePyramid::new(vec![PyramidLevel { stack: stack.clone(), weight: 0.3 }]);
        assert_eq!(fuse_pyramid(&pyr).unwrap(), stack.decode());
    }

    #[test]
    fn fusion_of_identical_levels() {
        let s = single_peak_stack(3, 16, Keypoint::new(6.0, 9.0));
        let pyr = ScalePyramid::new(vec![
            PyramidLevel { stack: s.clone(), weight: 1.0 },
            PyramidLevel { stack: s.clone(), weight: 0.25 },
            PyramidLevel { stack: s.clone(), weight: 7.0 },
        ]);
        assert_eq!(fuse_pyramid(&pyr).unwrap(), s.decode());
    }

    #[test]
    fn dominant_weight_wins() {
        let a = single_peak_stack(1, 16, Keypoint::new(4.0, 4.0));
        let b = single_peak_stack(1, 16, Keypoint::new(12.0, 12.0));
        let pyr = ScalePyramid::new(vec![
            PyramidLevel { stack: a, weight: 1.0 },
            PyramidLevel { stack: b, weight: 1e-6 },
        ]);
        let fused = fuse_pyramid_maps(&pyr).unwrap();
        // the (4,4) peak keeps value ~1, the (12,12) one is scaled to ~1e-6
        let m = &fused.maps()[0];
        assert!(m.get(4, 4) > 0.99);
        assert!(m.get(12, 12) < 1e-5);
        assert_eq!(fused.decode().joints, vec![Keypoint::new(4.0, 4.0)]);
    }

    #[test]
    fn fusion_resizes_coarse_levels() {
        let fine = single_peak_stack(2, 16, Keypoint::new(10.0, 5.0));
        let coarse_joint = rescale_corner_aligned(Keypoint::new(10.0, 5.0), (16, 16), (4, 4));
        let coarse = single_peak_stack(2, 4, coarse_joint);
        let pyr = ScalePyramid::new(vec![
            PyramidLevel { stack: coarse, weight: 0.25 },
            PyramidLevel { stack: fine, weight: 1.0 },
        ]);
        let fused = fuse_pyramid_maps(&pyr).unwrap();
        assert_eq!(fused.resolution(), Some((16, 16)));
        assert_eq!(fused.decode().joints[1], Keypoint::new(10.0, 5.0));
    }

    #[test]
    fn fusion_rejects_mismatched_channels() {
        let pyr = ScalePyramid::new(vec![
            PyramidLevel { stack: single_peak_stack(2, 8, Keypoint::default()), weight: 1.0 },
            PyramidLevel { stack: single_peak_stack(3, 8, Keypoint::default()), weight: 1.0 },
        ]);
        assert!(matches!(fuse_pyramid(&pyr), Err(crate::Error::Structural(_))));
        assert!(fuse_pyramid(&ScalePyramid::default()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_interior_integer_joints(res in 2usize..48, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let x = (1.0 + fx * (res as f64 - 2.0)).floor();
            let y = (1.0 + fy * (res as f64 - 2.0)).floor();
            let m = encode_joint(Keypoint::new(x, y), res, res, GaussianSpec::default()).unwrap();
            prop_assert_eq!(decode_argmax(&m), Keypoint::new(x, y));
        }

        #[test]
        fn encoded_values_in_unit_interval(x in -4.0f64..20.0, y in -4.0f64..20.0) {
            let m = encode_joint(Keypoint::new(x, y), 16, 16, spec(3.0, 16.0)).unwrap();
            prop_assert!(m.values().iter().all(|v| *v > 0.0 && *v <= 1.0));
            let on_grid = x.fract() == 0.0 && y.fract() == 0.0 && (0.0..16.0).contains(&x) && (0.0..16.0).contains(&y);
            let max = m.values().iter().cloned().fold(0.0, f64::max);
            prop_assert_eq!(max == 1.0, on_grid);
        }

        #[test]
        fn fusion_ignores_common_weight_scale(
            w in proptest::collection::vec(0.01f64..5.0, 3),
            c in 0.01f64..100.0,
            px in proptest::collection::vec(0.0f64..15.0, 6),
        ) {
            let make = |s: f64| {
                let levels = [(16usize, 0usize), (8, 2), (16, 4)].iter().zip(&w).map(|(&(res, i), &wt)| {
                    let p = Keypoint::new(px[i] * (res - 1) as f64 / 15.0, px[i + 1] * (res - 1) as f64 / 15.0);
                    PyramidLevel { stack: single_peak_stack(2, res, p), weight: wt * s }
                }).collect();
                fuse_pyramid(&ScalePyramid::new(levels)).unwrap()
            };
            prop_assert_eq!(make(1.0), make(c));
        }
    }
}
