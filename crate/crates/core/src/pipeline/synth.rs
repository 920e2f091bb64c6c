//! Synthetic hands: a jittered template under a random similarity
//! transform, drawn as a skeleton over a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{AnnotationRecord, DatasetManifest};
use super::pnm::ImageBuffer;
use crate::detect::{binarize, bbox_of_region, BoundingBox, FloatImage, Pixel};
use crate::error::{invalid, Result};
use crate::heatmap::{JointSet, Keypoint};
use crate::skeleton::{default_hand_topology, rasterize_skeleton, HandTopology, RasterSpec, SkeletonImage};

/// Threshold that defines the rendered skeleton's foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Square image side in pixels.
    pub resolution: usize,
    pub joint_count: usize,
    /// Amplitude of per-pixel uniform background noise.
    pub pixel_noise: f64,
    /// Up to this many skin-coloured discs per image.
    pub max_distractors: usize,
    /// Probability that an image contains no hand.
    pub absent_fraction: f64,
    /// Hand height as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Largest rotation magnitude in radians.
    pub max_rotation: f64,
    /// Largest per-joint jitter, in template units (hand height ~ 1).
    pub joint_jitter: f64,
    pub split_fractions: [f64; 3],
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            resolution: 128,
            joint_count: 21,
            pixel_noise: 0.05,
            max_distractors: 2,
            absent_fraction: 0.0,
            min_scale: 0.4,
            max_scale: 0.7,
            max_rotation: 0.6,
            joint_jitter: 0.02,
            split_fractions: [0.75, 0.10, 0.15],
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<()> {
        default_hand_topology(self.joint_count)?;
        if self.resolution < 16 {
            return Err(invalid(format!("resolution {} is below 16", self.resolution)));
        }
        if !(0.0..=1.0).contains(&self.absent_fraction) {
            return Err(invalid("absent fraction must be in [0, 1]"));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 0.9) {
            return Err(invalid(format!("scale range [{}, {}] must lie in (0, 0.9]", self.min_scale, self.max_scale)));
        }
        if !(self.pixel_noise >= 0.0 && self.joint_jitter >= 0.0 && self.max_rotation >= 0.0) {
            return Err(invalid("noise, jitter and rotation must be non-negative"));
        }
        Ok(())
    }
}

/// Finger root, direction (radians from straight up) and segment lengths,
/// thumb first. The palm joint sits at the origin-ish wrist position.
const PALM: (f64, f64) = (0.0, 0.45);
const FINGERS: [((f64, f64), f64, [f64; 3]); 5] = [
    ((-0.26, 0.20), -0.90, [0.17, 0.14, 0.11]),
    ((-0.15, -0.05), -0.18, [0.20, 0.14, 0.10]),
    ((0.00, -0.08), 0.00, [0.22, 0.15, 0.11]),
    ((0.14, -0.05), 0.16, [0.20, 0.14, 0.10]),
    ((0.26, 0.02), 0.38, [0.15, 0.11, 0.09]),
];

/// Template joints in hand units after per-finger curl and per-joint jitter.
fn sample_template(rng: &mut ChaCha8Rng, joint_count: usize, jitter: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(21);
    let j = |rng: &mut ChaCha8Rng| if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
    if joint_count == 21 {
        pts.push((PALM.0 + j(rng), PALM.1 + j(rng)));
    }
    for (f, &((rx, ry), angle, lengths)) in FINGERS.iter().enumerate() {
        let curl = rng.random_range(0.0..0.45);
        let spread = rng.random_range(-0.12..0.12);
        let mut p = (rx + j(rng), ry + j(rng));
        pts.push(p);
        // the thumb bends towards the palm centre, other fingers forwards
        let bend = if f == 0 { curl } else { -curl * 0.6 };
        let mut a = angle + spread;
        for len in lengths {
            a += bend;
            p = (p.0 + len * a.sin() + j(rng), p.1 - len * a.cos() + j(rng));
            pts.push(p);
        }
    }
    pts
}

fn extent(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    pts.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |(a, b, c, d), p| {
        (a.min(p.0), b.min(p.1), c.max(p.0), d.max(p.1))
    })
}

/// Random similarity transform of the template that keeps every joint at
/// least `margin` pixels inside the image.
fn place_hand(rng: &mut ChaCha8Rng, opts: &SynthOptions, margin: f64) -> JointSet {
    let res = opts.resolution as f64;
    let pts = sample_template(rng, opts.joint_count, opts.joint_jitter);
    let theta = if opts.max_rotation > 0.0 { rng.random_range(-opts.max_rotation..=opts.max_rotation) } else { 0.0 };
    let mirror = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let (s, c) = theta.sin_cos();
    let rotated: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (c * mirror * x - s * y, s * mirror * x + c * y)).collect();
    let (x0, y0, x1, y1) = extent(&rotated);
    let span = (x1 - x0).max(y1 - y0);
    let room = res - 1.0 - 2.0 * margin;
    let target = rng.random_range(opts.min_scale..=opts.max_scale) * res;
    let scale = (target / span).min(room / span);
    let free_x = room - (x1 - x0) * scale;
    let free_y = room - (y1 - y0) * scale;
    let tx = margin + rng.random_range(0.0..=free_x.max(0.0)) - x0 * scale;
    let ty = margin + rng.random_range(0.0..=free_y.max(0.0)) - y0 * scale;
    rotated.iter().map(|&(x, y)| Keypoint::new(x * scale + tx, y * scale + ty)).collect()
}

/// Sum of a few random low-frequency waves plus per-pixel noise, per channel.
fn background(rng: &mut ChaCha8Rng, res: usize, noise: f64) -> FloatImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.6));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / res as f64;
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.03..0.1))
        })
        .collect();
    let mut data = Vec::with_capacity(res * res * 3);
    for y in 0..res {
        for x in 0..res {
            let tex: f64 = waves.iter().map(|(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for b in base {
                let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                data.push((b + tex + n).clamp(0.0, 1.0));
            }
        }
    }
    FloatImage { width: res, height: res, channels: 3, data }
}

fn skin(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.75..0.95), rng.random_range(0.5..0.7), rng.random_range(0.35..0.55)]
}

fn blend(img: &mut FloatImage, alpha: &[f64], colour: [f64; 3]) {
    for (px, &a) in img.data.chunks_mut(3).zip(alpha) {
        for (v, c) in px.iter_mut().zip(colour) {
            *v = *v * (1.0 - a) + c * a;
        }
    }
}

fn add_distractors(rng: &mut ChaCha8Rng, img: &mut FloatImage, max: usize) {
    let res = img.width;
    let count = rng.random_range(0..=max);
    for _ in 0..count {
        let r = rng.random_range(0.03..0.08) * res as f64;
        let (cx, cy) = (rng.random_range(0.0..res as f64), rng.random_range(0.0..res as f64));
        let alpha: Vec<f64> = (0..res * res)
            .map(|i| {
                let d = ((i % res) as f64 - cx).hypot((i / res) as f64 - cy);
                (r + 0.5 - d).clamp(0.0, 1.0)
            })
            .collect();
        blend(img, &alpha, skin(rng));
    }
}

/// Skeleton raster used both to draw the hand and as the oracle mask.
pub fn render_skeleton(joints: &JointSet, topo: &HandTopology, resolution: usize) -> Result<SkeletonImage> {
    rasterize_skeleton(joints, topo, resolution, resolution, RasterSpec::scaled_to(resolution))
}

/// Inclusive bounds of all pixels at or above the foreground threshold.
pub fn foreground_bbox(skel: &SkeletonImage) -> Option<BoundingBox> {
    let mask = binarize(skel, FOREGROUND_THRESHOLD);
    let pixels: Vec<Pixel> = (0..skel.height)
        .flat_map(|row| (0..skel.width).map(move |col| Pixel::new(row, col)))
        .filter(|p| mask.get(p.row, p.col))
        .collect();
    bbox_of_region(&pixels).ok()
}

/// The ground-truth skeleton of a record, blank when no hand is present.
pub fn oracle_skeleton(record: &AnnotationRecord, topo: &HandTopology) -> Result<SkeletonImage> {
    let [w, h] = record.resolution;
    if !record.hand_present {
        return Ok(SkeletonImage::zeros(w, h));
    }
    rasterize_skeleton(&record.joints(), topo, w, h, RasterSpec::scaled_to(w.max(h)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub record: AnnotationRecord,
    pub image: ImageBuffer,
}

/// One sample from its own generator stream, so samples are independent of
/// generation order.
pub fn generate_sample(index: usize, opts: &SynthOptions, seed: u64) -> Result<SyntheticSample> {
    opts.validate()?;
    let topo = default_hand_topology(opts.joint_count)?;
    let res = opts.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let mut img = background(&mut rng, res, opts.pixel_noise);
    add_distractors(&mut rng, &mut img, opts.max_distractors);
    let present = !rng.random_bool(opts.absent_fraction);
    let mut record = AnnotationRecord {
        image_path: format!("images/{index:05}.ppm"),
        resolution: [res, res],
        hand_present: present,
        joints2d: Vec::new(),
        joints3d: None,
        bbox: None,
        split: None,
    };
    if present {
        let margin = RasterSpec::scaled_to(res).line_thickness as f64 + 1.0;
        let joints = place_hand(&mut rng, opts, margin);
        let skel = render_skeleton(&joints, &topo, res)?;
        blend(&mut img, &skel.values, skin(&mut rng));
        record.bbox = foreground_bbox(&skel);
        record.joints2d = joints.joints;
    }
    Ok(SyntheticSample { record, image: ImageBuffer::from_float(&img)? })
}

/// `n` samples with split tags assigned from the same seed.
pub fn generate_synthetic_dataset(
    n: usize,
    opts: &SynthOptions,
    seed: u64,
) -> Result<(DatasetManifest, Vec<ImageBuffer>)> {
    if n == 0 {
        return Err(invalid("dataset size must be >= 1"));
    }
    opts.validate()?;
    let topo = default_hand_topology(opts.joint_count)?;
    let mut manifest = DatasetManifest::new(opts.joint_count, topo.id());
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let s = generate_sample(i, opts, seed)?;
        manifest.records.push(s.record);
        images.push(s.image);
    }
    manifest.assign_splits(opts.split_fractions, seed)?;
    Ok((manifest, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{decide_hand_presence, DetectorThresholds};

    fn small() -> SynthOptions {
        SynthOptions { resolution: 64, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(5, &small(), 3).unwrap();
        let b = generate_synthetic_dataset(5, &small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(5, &small(), 4).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn joints_inside_image_and_counts_match() {
        for k in [20, 21] {
            let opts = SynthOptions { joint_count: k, ..small() };
            let (m, imgs) = generate_synthetic_dataset(20, &opts, 1).unwrap();
            assert_eq!(m.records.len(), 20);
            assert_eq!(imgs.len(), 20);
            for r in &m.records {
                assert_eq!(r.joints2d.len(), k);
                assert!(r.joints2d.iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= 63.0 && p.y <= 63.0));
                assert!(r.bbox.unwrap().fits(64, 64));
            }
            let text = m.to_text().unwrap();
            assert_eq!(DatasetManifest::from_text(&text).unwrap(), m);
        }
    }

    #[test]
    fn bbox_matches_detector_on_noiseless_render() {
        let topo = default_hand_topology(21).unwrap();
        let (m, _) = generate_synthetic_dataset(30, &SynthOptions::default(), 9).unwrap();
        let th = DetectorThresholds { foreground_threshold: FOREGROUND_THRESHOLD, presence_count: 1 };
        for r in &m.records {
            let d = decide_hand_presence(&oracle_skeleton(r, &topo).unwrap(), &th).unwrap();
            assert!(d.hand_present);
            assert_eq!(d.bbox, r.bbox);
        }
    }

    #[test]
    fn absent_fraction_one_gives_blank_records() {
        let opts = SynthOptions { absent_fraction: 1.0, ..small() };
        let (m, _) = generate_synthetic_dataset(4, &opts, 0).unwrap();
        assert!(m.records.iter().all(|r| !r.hand_present && r.joints2d.is_empty() && r.bbox.is_none()));
    }

    #[test]
    fn rejects_bad_options() {
        assert!(generate_synthetic_dataset(0, &small(), 0).is_err());
        assert!(generate_synthetic_dataset(1, &SynthOptions { joint_count: 5, ..small() }, 0).is_err());
        assert!(generate_synthetic_dataset(1, &SynthOptions { min_scale: 0.8, max_scale: 0.5, ..small() }, 0).is_err());
    }
}
