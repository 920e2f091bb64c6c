//! Sample preparation, the training loop and joint prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, forward, NetworkConfig, NetworkParams, FINAL_HEAD, HEAD_COUNT};
use super::optim::{adam_step, AdamConfig, OptimizerState};
use super::tensor::Tensor;
use crate::detect::FloatImage;
use crate::error::{invalid, structural, Result};
use crate::heatmap::{
    encode_joint_set, rescale_corner_aligned, GaussianSpec, Heatmap, HeatmapStack, JointSet, PyramidLevel,
    ScalePyramid, fuse_pyramid,
};
use crate::losses::{combined_loss, multi_scale_loss, CombinedLossConfig, MultiScaleLossConfig};
use crate::skeleton::SkeletonImage;

/// What the heads are trained on and how joints are read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Weighted squared error on all five heads; predictions fuse all heads
    /// with the same weights.
    MultiScale(MultiScaleLossConfig),
    /// Squared error on the final head only, which is also the only head
    /// decoded.
    SingleScale,
    /// Skeleton segmentation: combined L1 + SoftDice on the final head.
    Segmentation(CombinedLossConfig),
}

impl Default for Objective {
    fn default() -> Self {
        Objective::MultiScale(MultiScaleLossConfig::default())
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::MultiScale(c) => {
                c.validate()?;
                if c.weights.len() != HEAD_COUNT {
                    return Err(invalid(format!("multi-scale objective needs {HEAD_COUNT} weights, got {}", c.weights.len())));
                }
                Ok(())
            }
            Objective::SingleScale => Ok(()),
            Objective::Segmentation(c) => c.validate(),
        }
    }
}

/// One network input with its per-head targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Shape `[1, C, r, r]`.
    pub input: Tensor,
    /// One `[1, K, h, h]` target per head.
    pub targets: Vec<Tensor>,
}

/// Packs an image (values in `[0, 1]`) and an optional skeleton into a
/// network input. Each image channel has its mean subtracted; the skeleton
/// channel is passed through unchanged.
pub fn prepare_input(image: &FloatImage, skeleton: Option<&SkeletonImage>, cfg: &NetworkConfig) -> Result<Tensor> {
    let r = cfg.input_resolution;
    if image.channels != cfg.image_channels || image.width != r || image.height != r {
        return Err(structural(format!(
            "image {}x{}x{} does not match network input {r}x{r}x{}",
            image.width, image.height, image.channels, cfg.image_channels
        )));
    }
    let mut data = Vec::with_capacity(cfg.input_channels() * r * r);
    for c in 0..image.channels {
        let plane = image.channel(c);
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        data.extend(plane.iter().map(|v| v - mean));
    }
    if cfg.use_skeleton {
        let s = skeleton.ok_or_else(|| invalid("network is skeleton-conditioned but no skeleton was given"))?;
        if s.width != r || s.height != r {
            return Err(structural(format!("skeleton {}x{} does not match input {r}x{r}", s.width, s.height)));
        }
        data.extend_from_slice(&s.values);
    }
    Tensor::from_vec([1, cfg.input_channels(), r, r], data)
}

/// Gaussian targets for every head. `joints` are in input pixel
/// coordinates and are mapped to each head with the corner-aligned rule.
pub fn heatmap_targets(joints: &JointSet, cfg: &NetworkConfig, spec: GaussianSpec) -> Result<Vec<Tensor>> {
    if joints.len() != cfg.joint_count {
        return Err(structural(format!("{} joints for a {}-joint network", joints.len(), cfg.joint_count)));
    }
    let r = cfg.input_resolution;
    cfg.head_resolutions()
        .iter()
        .map(|&h| {
            let scaled = joints.map(|p| rescale_corner_aligned(*p, (r, r), (h, h)));
            let stack = encode_joint_set(&scaled, h, h, spec)?;
            let data = stack.maps().iter().flat_map(|m| m.values().iter().copied()).collect();
            Tensor::from_vec([1, cfg.joint_count, h, h], data)
        })
        .collect()
}

/// Segmentation targets: the skeleton, resampled to each head.
pub fn skeleton_targets(skeleton: &SkeletonImage, cfg: &NetworkConfig) -> Result<Vec<Tensor>> {
    if cfg.joint_count != 1 {
        return Err(invalid("segmentation networks have a single output channel"));
    }
    let map = Heatmap::from_values(skeleton.width, skeleton.height, skeleton.values.clone())?;
    cfg.head_resolutions()
        .iter()
        .map(|&h| {
            let resized = crate::heatmap::resize_bilinear(&map, h, h)?;
            Tensor::from_vec([1, 1, h, h], resized.into_values())
        })
        .collect()
}

pub fn make_sample(
    image: &FloatImage,
    skeleton: Option<&SkeletonImage>,
    joints: &JointSet,
    cfg: &NetworkConfig,
    spec: GaussianSpec,
) -> Result<Sample> {
    Ok(Sample { input: prepare_input(image, skeleton, cfg)?, targets: heatmap_targets(joints, cfg, spec)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, seed: 0, objective: Objective::default(), optimizer: AdamConfig::default() }
    }
}

/// Loss of a batch (mean over samples) and its gradient per head.
pub fn objective_loss(objective: &Objective, outputs: &[Tensor], targets: &[Tensor]) -> Result<(f64, Vec<Option<Tensor>>)> {
    if outputs.len() != HEAD_COUNT || targets.len() != HEAD_COUNT {
        return Err(structural(format!("expected {HEAD_COUNT} outputs and targets")));
    }
    for (i, (o, t)) in outputs.iter().zip(targets).enumerate() {
        if o.shape() != t.shape() {
            return Err(structural(format!("head {i}: output {:?} vs target {:?}", o.shape(), t.shape())));
        }
    }
    let n = outputs[0].batch();
    let inv_n = 1.0 / n as f64;
    match objective {
        Objective::MultiScale(cfg) => {
            // the loss is a plain sum over pixels, so the batch can be treated as one grid
            let res = multi_scale_loss(targets.iter().map(Tensor::data).collect::<Vec<_>>().as_slice(), &outputs.iter().map(Tensor::data).collect::<Vec<_>>(), cfg)?;
            let grads = res
                .gradients
                .into_iter()
                .zip(outputs)
                .map(|(g, o)| {
                    let mut t = Tensor::from_vec(o.shape(), g)?;
                    t.scale(inv_n);
                    Ok(Some(t))
                })
                .collect::<Result<_>>()?;
            Ok((res.value * inv_n, grads))
        }
        Objective::SingleScale => {
            let cfg = MultiScaleLossConfig { weights: vec![1.0] };
            let res = multi_scale_loss(&[targets[FINAL_HEAD].data()], &[outputs[FINAL_HEAD].data()], &cfg)?;
            let mut g = Tensor::from_vec(outputs[FINAL_HEAD].shape(), res.gradients.into_iter().next().unwrap())?;
            g.scale(inv_n);
            let mut grads = vec![None; HEAD_COUNT];
            grads[FINAL_HEAD] = Some(g);
            Ok((res.value * inv_n, grads))
        }
        Objective::Segmentation(cfg) => {
            let (o, t) = (&outputs[FINAL_HEAD], &targets[FINAL_HEAD]);
            let mut value = 0.0;
            let mut g = Vec::with_capacity(o.len());
            for s in 0..n {
                let res = combined_loss(t.sample(s), o.sample(s), cfg)?;
                value += res.value;
                g.extend(res.gradient.iter().map(|v| v * inv_n));
            }
            let mut grads = vec![None; HEAD_COUNT];
            grads[FINAL_HEAD] = Some(Tensor::from_vec(o.shape(), g)?);
            Ok((value * inv_n, grads))
        }
    }
}

fn batch_of(samples: &[&Sample]) -> Result<(Tensor, Vec<Tensor>)> {
    let input = Tensor::concat_batch(&samples.iter().map(|s| &s.input).collect::<Vec<_>>())?;
    let targets = (0..HEAD_COUNT)
        .map(|h| Tensor::concat_batch(&samples.iter().map(|s| &s.targets[h]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok((input, targets))
}

/// Mean loss of `params` over `dataset`, without updating anything.
pub fn evaluate_loss(params: &NetworkParams, dataset: &[Sample], objective: &Objective) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut total = 0.0;
    for chunk in dataset.chunks(8) {
        let (input, targets) = batch_of(&chunk.iter().collect::<Vec<_>>())?;
        let outputs = forward(params, &input)?.without_cache().outputs;
        total += objective_loss(objective, &outputs, &targets)?.0 * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean per-sample training loss of each epoch, measured before each
    /// step's update.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch Adam. The dataset is reshuffled every epoch from a generator
/// seeded once with `cfg.seed`, so runs are reproducible bit for bit.
pub fn train(mut params: NetworkParams, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    cfg.objective.validate()?;
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let mut state = OptimizerState::new(&params, cfg.optimizer, steps_per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (input, targets) = batch_of(&idx.iter().map(|&i| &dataset[i]).collect::<Vec<_>>())?;
            let pass = forward(&params, &input)?;
            let (loss, head_grads) = objective_loss(&cfg.objective, &pass.outputs, &targets)?;
            let grads = backward(&params, &pass, &head_grads)?;
            adam_step(&mut params, &grads, &mut state)?;
            epoch_loss += loss * idx.len() as f64;
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6e} lr {:.3e}", state.learning_rate());
        trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace: trace })
}

fn stack_of(t: &Tensor, n: usize) -> Result<HeatmapStack> {
    let (w, h) = (t.width(), t.height());
    HeatmapStack::new(
        (0..t.channels())
            .map(|c| Heatmap::from_values(w, h, t.plane(n, c).to_vec()))
            .collect::<Result<_>>()?,
    )
}

/// Head outputs of sample `n` as a fusion pyramid for the objective.
pub fn output_pyramid(outputs: &[Tensor], n: usize, objective: &Objective) -> Result<ScalePyramid> {
    match objective {
        Objective::MultiScale(cfg) => Ok(ScalePyramid::new(
            outputs
                .iter()
                .zip(&cfg.weights)
                .map(|(t, &weight)| Ok(PyramidLevel { stack: stack_of(t, n)?, weight }))
                .collect::<Result<_>>()?,
        )),
        Objective::SingleScale => {
            Ok(ScalePyramid::new(vec![PyramidLevel { stack: stack_of(&outputs[FINAL_HEAD], n)?, weight: 1.0 }]))
        }
        Objective::Segmentation(_) => Err(invalid("segmentation networks do not predict joints")),
    }
}

/// Joints for every sample of a prepared input batch, in input pixels.
pub fn predict_batch(params: &NetworkParams, input: &Tensor, objective: &Objective) -> Result<Vec<JointSet>> {
    let outputs = forward(params, input)?.without_cache().outputs;
    (0..input.batch()).map(|n| fuse_pyramid(&output_pyramid(&outputs, n, objective)?)).collect()
}

/// Forward pass followed by heatmap-space fusion and argmax decoding.
pub fn predict_joints(
    params: &NetworkParams,
    image: &FloatImage,
    skeleton: Option<&SkeletonImage>,
    objective: &Objective,
) -> Result<JointSet> {
    let input = prepare_input(image, skeleton, &params.config)?;
    Ok(predict_batch(params, &input, objective)?.remove(0))
}

/// Final-head output of a segmentation network.
pub fn predict_skeleton(params: &NetworkParams, image: &FloatImage) -> Result<SkeletonImage> {
    let input = prepare_input(image, None, &params.config)?;
    let out = forward(params, &input)?.without_cache().outputs.swap_remove(FINAL_HEAD);
    SkeletonImage::from_values(out.width(), out.height(), out.plane(0, 0).to_vec())
}
