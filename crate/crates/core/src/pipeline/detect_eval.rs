//! Detection stage evaluation: skeleton sources, per-record decisions, box
//! IOU, Hand/NoHand scores and the presence-count sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use super::pnm::ImageBuffer;
use super::synth::oracle_skeleton;
use crate::detect::{binarize, decide_hand_presence, DetectionDecision, DetectorThresholds, FloatImage};
use crate::error::{invalid, Error, Result};
use crate::heatmap::{resize_bilinear, Heatmap};
use crate::metrics::{classification_metrics, iou, roc_auc, ClassificationMetrics, ConfusionCounts};
use crate::net::train::{predict_skeleton, prepare_input, skeleton_targets, Sample};
use crate::net::{NetworkConfig, NetworkParams};
use crate::skeleton::{HandTopology, SkeletonImage};

/// Corruption applied to oracle skeletons so that they resemble an
/// imperfect segmenter: spurious blobs, holes along the hand and pixel noise.
/// Radii are in pixels at 128 px and scale with the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonNoise {
    /// Up to this many spurious discs per image.
    pub clutter_max: usize,
    pub clutter_radius: [f64; 2],
    /// Up to this many holes punched around random foreground pixels.
    pub dropout_max: usize,
    pub dropout_radius: [f64; 2],
    /// Amplitude of uniform per-pixel noise.
    pub pixel_noise: f64,
}

impl Default for SkeletonNoise {
    fn default() -> Self {
        Self {
            clutter_max: 6,
            clutter_radius: [3.0, 8.0],
            dropout_max: 14,
            dropout_radius: [4.0, 10.0],
            pixel_noise: 0.3,
        }
    }
}

impl SkeletonNoise {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ok(self.clutter_radius) || !ok(self.dropout_radius) {
            return Err(invalid("noise radii must satisfy 0 < min <= max"));
        }
        if !(0.0..1.0).contains(&self.pixel_noise) {
            return Err(invalid(format!("pixel noise {} must be in [0, 1)", self.pixel_noise)));
        }
        Ok(())
    }
}

fn paint_disc(img: &mut SkeletonImage, cx: f64, cy: f64, r: f64, value: Option<f64>) {
    let (w, h) = (img.width, img.height);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(w - 1);
    let y1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let cover = (r + 0.5 - (x as f64 - cx).hypot(y as f64 - cy)).clamp(0.0, 1.0);
            let v = &mut img.values[y * w + x];
            *v = match value {
                Some(a) => v.max(a * cover),
                None => *v * (1.0 - cover),
            };
        }
    }
}

pub fn corrupt_skeleton(skel: &SkeletonImage, noise: &SkeletonNoise, rng: &mut ChaCha8Rng) -> SkeletonImage {
    let mut out = skel.clone();
    let (w, h) = (skel.width, skel.height);
    if w == 0 || h == 0 {
        return out;
    }
    let s = w.max(h) as f64 / 128.0;
    let radius = |[lo, hi]: [f64; 2], rng: &mut ChaCha8Rng| rng.random_range(lo..=hi) * s;

    let fg: Vec<usize> = (0..w * h).filter(|&i| skel.values[i] >= 0.5).collect();
    if !fg.is_empty() {
        for _ in 0..rng.random_range(0..=noise.dropout_max) {
            let i = fg[rng.random_range(0..fg.len())];
            let r = radius(noise.dropout_radius, rng);
            paint_disc(&mut out, (i % w) as f64, (i / w) as f64, r, None);
        }
    }
    for _ in 0..rng.random_range(0..=noise.clutter_max) {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let r = radius(noise.clutter_radius, rng);
        paint_disc(&mut out, cx, cy, r, Some(1.0));
    }
    if noise.pixel_noise > 0.0 {
        for v in &mut out.values {
            *v = (*v + rng.random_range(-noise.pixel_noise..=noise.pixel_noise)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Where the skeleton images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SkeletonSource<'a> {
    Oracle,
    NoisyOracle { noise: SkeletonNoise, seed: u64 },
    /// A segmentation network run on the image resized to its input.
    Model(&'a NetworkParams),
}

/// One skeleton per record, in manifest order. Noise for record `i` comes
/// from its own generator stream, so results do not depend on order.
pub fn skeletons_for(
    manifest: &DatasetManifest,
    images: &[ImageBuffer],
    topo: &HandTopology,
    source: &SkeletonSource<'_>,
) -> Result<Vec<SkeletonImage>> {
    if let SkeletonSource::NoisyOracle { noise, .. } = source {
        noise.validate()?;
    }
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| match source {
            SkeletonSource::Oracle => oracle_skeleton(r, topo),
            SkeletonSource::NoisyOracle { noise, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(i as u64 + 1);
                Ok(corrupt_skeleton(&oracle_skeleton(r, topo)?, noise, &mut rng))
            }
            SkeletonSource::Model(params) => {
                let img = images.get(i).ok_or_else(|| invalid(format!("no image for record {i}")))?;
                model_skeleton(params, img)
            }
        })
        .collect()
}

/// Whole image resampled to `r x r`, channel by channel.
pub fn resize_image(image: &FloatImage, r: usize) -> Result<FloatImage> {
    let planes = (0..image.channels)
        .map(|c| resize_bilinear(&Heatmap::from_values(image.width, image.height, image.channel(c))?, r, r))
        .collect::<Result<Vec<_>>>()?;
    let data = (0..r * r).flat_map(|i| planes.iter().map(move |p| p.values()[i])).collect();
    FloatImage::new(r, r, image.channels, data)
}

/// Training pairs for a segmentation network: whole images resized to the
/// network input, oracle skeletons as targets.
pub fn segmentation_samples(
    manifest: &DatasetManifest,
    images: &[ImageBuffer],
    split: Option<Split>,
    topo: &HandTopology,
    cfg: &NetworkConfig,
) -> Result<Vec<Sample>> {
    let r = cfg.input_resolution;
    manifest
        .records
        .iter()
        .zip(images)
        .filter(|(rec, _)| split.is_none() || rec.split == split)
        .map(|(rec, img)| {
            let input = prepare_input(&resize_image(&img.to_float(), r)?, None, cfg)?;
            let targets = skeleton_targets(&oracle_skeleton(rec, topo)?, cfg)?;
            Ok(Sample { input, targets })
        })
        .collect()
}

fn model_skeleton(params: &NetworkParams, image: &ImageBuffer) -> Result<SkeletonImage> {
    let r = params.config.input_resolution;
    let pred = predict_skeleton(params, &resize_image(&image.to_float(), r)?)?;
    let up = resize_bilinear(&Heatmap::from_values(r, r, pred.values)?, image.width, image.height)?;
    SkeletonImage::from_values(image.width, image.height, up.into_values().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub presence_count: usize,
    /// ROC AUC of the hard decisions at this count.
    pub auc: f64,
    pub metrics: ClassificationMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectReport {
    pub decisions: Vec<DetectionDecision>,
    /// Mean IOU over hand-present records; a missed hand scores 0.
    pub mean_iou: f64,
    pub counts: ConfusionCounts,
    pub metrics: ClassificationMetrics,
    /// Threshold-free AUC with the foreground count as the score.
    pub score_auc: Option<f64>,
    pub sweep: Vec<SweepRow>,
}

/// Hard-decision AUC: one operating point joined to the corners, which is
/// the mean of the true positive and true negative rates.
fn decision_auc(present: &[bool], decided: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = present.iter().zip(decided).filter(|(p, _)| **p).map(|(_, d)| f64::from(u8::from(*d))).collect();
    let neg: Vec<f64> = present.iter().zip(decided).filter(|(p, _)| !**p).map(|(_, d)| f64::from(u8::from(*d))).collect();
    roc_auc(&pos, &neg).ok()
}

pub fn run_detect(
    manifest: &DatasetManifest,
    skeletons: &[SkeletonImage],
    thresholds: &DetectorThresholds,
    sweep_counts: &[usize],
) -> Result<DetectReport> {
    thresholds.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::Eval("manifest has no records".into()));
    }
    if skeletons.len() != manifest.records.len() {
        return Err(invalid(format!("{} skeletons for {} records", skeletons.len(), manifest.records.len())));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.hand_present && r.bbox.is_none()) {
        return Err(Error::Eval(format!("{}: hand present but no ground-truth box", r.image_path)));
    }
    let present: Vec<bool> = manifest.records.iter().map(|r| r.hand_present).collect();
    let decisions = skeletons.iter().map(|s| decide_hand_presence(s, thresholds)).collect::<Result<Vec<_>>>()?;

    let mut counts = ConfusionCounts::default();
    let mut ious = Vec::new();
    for (r, d) in manifest.records.iter().zip(&decisions) {
        counts.record(d.hand_present, r.hand_present);
        if let Some(gt) = r.bbox.filter(|_| r.hand_present) {
            ious.push(d.bbox.map_or(0.0, |b| iou(&b, &gt)));
        }
    }
    let mean_iou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };

    let fg: Vec<usize> = skeletons.iter().map(|s| binarize(s, thresholds.foreground_threshold).count()).collect();
    let score = |want: bool| fg.iter().zip(&present).filter(|(_, p)| **p == want).map(|(c, _)| *c as f64).collect::<Vec<_>>();
    let score_auc = roc_auc(&score(true), &score(false)).ok();

    let mut sweep = Vec::with_capacity(sweep_counts.len());
    for &n in sweep_counts {
        DetectorThresholds { presence_count: n, ..*thresholds }.validate()?;
        // the decision only depends on the count, so no need to re-run the detector
        let decided: Vec<bool> = fg.iter().map(|&c| c > 0 && c >= n).collect();
        let mut c = ConfusionCounts::default();
        for (d, p) in decided.iter().zip(&present) {
            c.record(*d, *p);
        }
        sweep.push(SweepRow {
            presence_count: n,
            auc: decision_auc(&present, &decided).unwrap_or(f64::NAN),
            metrics: classification_metrics(&c),
        });
    }
    Ok(DetectReport { decisions, mean_iou, counts, metrics: classification_metrics(&counts), score_auc, sweep })
}

/// `start, start + step, ..., <= end`.
pub fn count_range(start: usize, end: usize, step: usize) -> Result<Vec<usize>> {
    if start == 0 || step == 0 || start > end {
        return Err(invalid(format!("bad sweep {start}..={end} step {step}")));
    }
    Ok((start..=end).step_by(step).collect())
}
