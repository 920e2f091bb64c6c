//! Pose stage: square crops around ground-truth boxes, the three ablation
//! variants, and MJPE/PCK evaluation at the working resolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::{AnnotationRecord, DatasetManifest, Split};
use super::pnm::ImageBuffer;
use super::synth::oracle_skeleton;
use crate::detect::{crop_and_resize, BoundingBox, CropTransform, FloatImage};
use crate::error::{invalid, Error, Result};
use crate::heatmap::{GaussianSpec, JointSet};
use crate::losses::MultiScaleLossConfig;
use crate::metrics::{mjpe, pck_dataset, pck_thresholds, PckCurve};
use crate::net::train::{make_sample, predict_batch, Sample};
use crate::net::{build_network, train, AdamConfig, NetworkConfig, NetworkParams, Objective, Tensor, TrainConfig};
use crate::skeleton::{HandTopology, SkeletonImage};

/// Context added around the square ground-truth box, as a fraction of its side.
pub const CROP_MARGIN: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    MultiSkeleton,
    Multi,
    SingleScale,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MultiSkeleton, Variant::Multi, Variant::SingleScale];

    pub fn uses_skeleton(self) -> bool {
        self == Variant::MultiSkeleton
    }

    pub fn objective(self) -> Objective {
        match self {
            Variant::SingleScale => Objective::SingleScale,
            _ => Objective::MultiScale(MultiScaleLossConfig::default()),
        }
    }

    /// Rejects parameters that were built or trained for another variant.
    pub fn check(self, params: &NetworkParams, objective: &Objective) -> Result<()> {
        if params.config.use_skeleton != self.uses_skeleton() {
            return Err(Error::Config(format!(
                "variant {self} {} a skeleton channel but the parameters were built {} one",
                if self.uses_skeleton() { "needs" } else { "has no" },
                if params.config.use_skeleton { "with" } else { "without" }
            )));
        }
        let matches = matches!(
            (self, objective),
            (Variant::SingleScale, Objective::SingleScale) | (Variant::Multi | Variant::MultiSkeleton, Objective::MultiScale(_))
        );
        if !matches {
            return Err(Error::Config(format!("variant {self} does not match the checkpoint objective {objective:?}")));
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MultiSkeleton => "multi+skeleton",
            Variant::Multi => "multi",
            Variant::SingleScale => "single-scale",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi+skeleton" => Ok(Variant::MultiSkeleton),
            "multi" => Ok(Variant::Multi),
            "single-scale" => Ok(Variant::SingleScale),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected multi+skeleton, multi or single-scale)"))),
        }
    }
}

/// Square box of side `max(w, h)` centred on `b`, shifted to fit the image
/// where possible.
pub fn square_box(b: &BoundingBox, width: usize, height: usize) -> BoundingBox {
    let side = b.width().max(b.height()).min(width).min(height);
    let place = |lo: usize, len: usize, size: usize| {
        let start = (lo + len / 2).saturating_sub(side / 2);
        start.min(size - side)
    };
    let x = place(b.x_min, b.width(), width);
    let y = place(b.y_min, b.height(), height);
    BoundingBox { x_min: x, y_min: y, x_max: x + side - 1, y_max: y + side - 1 }
}

/// One record cropped to the network's working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseCrop {
    pub image: FloatImage,
    pub skeleton: SkeletonImage,
    /// Ground truth in crop pixels.
    pub joints: JointSet,
    pub transform: CropTransform,
    /// Ground-truth hand box mapped into the crop; normalises PCK.
    pub hand_box: BoundingBox,
}

impl PoseCrop {
    pub fn sample(&self, cfg: &NetworkConfig, spec: GaussianSpec) -> Result<Sample> {
        let skel = cfg.use_skeleton.then_some(&self.skeleton);
        make_sample(&self.image, skel, &self.joints, cfg, spec)
    }
}

pub fn crop_record(
    record: &AnnotationRecord,
    image: &ImageBuffer,
    topo: &HandTopology,
    resolution: usize,
) -> Result<PoseCrop> {
    let bbox = record
        .bbox
        .filter(|_| record.hand_present)
        .ok_or_else(|| Error::Eval(format!("{}: no ground-truth hand box", record.image_path)))?;
    let [w, h] = record.resolution;
    if image.width != w || image.height != h {
        return Err(Error::Eval(format!(
            "{}: image is {}x{}, manifest says {w}x{h}",
            record.image_path, image.width, image.height
        )));
    }
    let square = square_box(&bbox, w, h);
    let (img, transform) = crop_and_resize(&image.to_float(), &square, resolution, CROP_MARGIN)?;
    let full = oracle_skeleton(record, topo)?;
    let skel_img = FloatImage::new(w, h, 1, full.values)?;
    let (skel, _) = crop_and_resize(&skel_img, &square, resolution, CROP_MARGIN)?;
    let last = (resolution - 1) as f64;
    let corner = |x: usize, y: usize| {
        let p = transform.apply(crate::heatmap::Keypoint::new(x as f64, y as f64));
        (p.x.round().clamp(0.0, last) as usize, p.y.round().clamp(0.0, last) as usize)
    };
    let (x0, y0) = corner(bbox.x_min, bbox.y_min);
    let (x1, y1) = corner(bbox.x_max, bbox.y_max);
    Ok(PoseCrop {
        image: img,
        hand_box: BoundingBox::new(x0, y0, x1, y1)?,
        skeleton: SkeletonImage::from_values(resolution, resolution, skel.data)?,
        joints: transform.apply_all(&record.joints()),
        transform,
    })
}

/// Crops every hand-present record of `split` (all records when `None`),
/// in manifest order.
pub fn crop_split(
    manifest: &DatasetManifest,
    images: &[ImageBuffer],
    split: Option<Split>,
    topo: &HandTopology,
    resolution: usize,
) -> Result<Vec<PoseCrop>> {
    if images.len() != manifest.records.len() {
        return Err(invalid(format!("{} images for {} records", images.len(), manifest.records.len())));
    }
    manifest
        .records
        .iter()
        .zip(images)
        .filter(|(r, _)| r.hand_present && (split.is_none() || r.split == split))
        .map(|(r, img)| crop_record(r, img, topo, resolution))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseReport {
    pub mjpe: f64,
    /// MJPE of each crop, in input order.
    pub per_sample: Vec<f64>,
    pub pck: PckCurve,
    pub predictions: Vec<JointSet>,
}

/// Default PCK thresholds: 0 to 0.5 of the hand box side in 21 steps.
pub fn default_pck_thresholds() -> Vec<f64> {
    pck_thresholds(0.5, 21)
}

pub fn evaluate_pose(
    params: &NetworkParams,
    objective: &Objective,
    crops: &[PoseCrop],
    thresholds: &[f64],
) -> Result<PoseReport> {
    if crops.is_empty() {
        return Err(Error::Eval("no hand-present records to evaluate".into()));
    }
    let cfg = &params.config;
    let spec = GaussianSpec::default();
    let mut predictions = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(16) {
        let inputs = chunk.iter().map(|c| Ok(c.sample(cfg, spec)?.input)).collect::<Result<Vec<_>>>()?;
        let batch = Tensor::concat_batch(&inputs.iter().collect::<Vec<_>>())?;
        predictions.extend(predict_batch(params, &batch, objective)?);
    }
    let per_sample = predictions.iter().zip(crops).map(|(p, c)| mjpe(p, &c.joints)).collect::<Result<Vec<_>>>()?;
    let triples: Vec<_> = predictions.iter().zip(crops).map(|(p, c)| (p.clone(), c.joints.clone(), c.hand_box)).collect();
    Ok(PoseReport {
        mjpe: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
        pck: pck_dataset(&triples, thresholds)?,
        predictions,
    })
}

/// Target blobs for pose training: sigma 2 px at 8 px, i.e. a quarter of
/// the crop side at every head. Narrower blobs leave the sigmoid heads with
/// almost no foreground signal and training stalls at all-zero output.
pub fn pose_targets() -> GaussianSpec {
    GaussianSpec { sigma: 2.0, reference_resolution: 8.0 }
}

/// Initial rate for pose training. With unnormalised squared error the
/// generic 0.01 saturates the heads within a few hundred steps.
pub const POSE_LEARNING_RATE: f64 = 1e-3;

/// Everything needed to train one ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTraining {
    pub base_channels: usize,
    pub resolution: usize,
    pub targets: GaussianSpec,
    pub train: TrainConfig,
}

impl Default for PoseTraining {
    fn default() -> Self {
        Self {
            base_channels: 8,
            resolution: 32,
            targets: pose_targets(),
            train: TrainConfig {
                optimizer: AdamConfig { learning_rate: POSE_LEARNING_RATE, ..Default::default() },
                ..Default::default()
            },
        }
    }
}

impl PoseTraining {
    pub fn network_config(&self, variant: Variant, joint_count: usize) -> NetworkConfig {
        NetworkConfig {
            image_channels: 3,
            use_skeleton: variant.uses_skeleton(),
            base_channels: self.base_channels,
            joint_count,
            input_resolution: self.resolution,
        }
    }

    /// Builds and trains `variant` from `seed`; returns the parameters and the loss trace.
    pub fn fit(&self, variant: Variant, crops: &[PoseCrop], joint_count: usize, seed: u64) -> Result<(NetworkParams, Vec<f64>)> {
        let params = build_network(&self.network_config(variant, joint_count), seed)?;
        self.fit_from(params, variant, crops, seed)
    }

    /// Continues training `params`, which must have been built for `variant`.
    pub fn fit_from(&self, params: NetworkParams, variant: Variant, crops: &[PoseCrop], seed: u64) -> Result<(NetworkParams, Vec<f64>)> {
        variant.check(&params, &variant.objective())?;
        let samples = crops.iter().map(|c| c.sample(&params.config, self.targets)).collect::<Result<Vec<_>>>()?;
        let tc = TrainConfig { seed, objective: variant.objective(), ..self.train.clone() };
        let out = train(params, &samples, &tc)?;
        Ok((out.params, out.loss_trace))
    }
}
