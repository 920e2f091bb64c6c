//! Encoder-decoder with five sigmoid heads.
//!
//! ```text
//! input (r) -> stem (r) -> down1 (r/2) -> down2 (r/4) -> up1 (r/2) -> up2 (r) -> final (r)
//!                            head 0        head 1         head 2       head 3      head 4
//! ```
//!
//! Residual blocks hold two 3x3 convolutions with leaky ReLU and a 1x1
//! projected skip. Down blocks halve the resolution with a stride-2 first
//! convolution, up blocks double it with a stride-2 transposed convolution.
//! Up blocks also add the encoder activation of matching resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    bias_grad, conv2d, conv2d_backward_input, conv2d_backward_weight, conv_transpose2d,
    conv_transpose2d_backward_input, conv_transpose2d_backward_weight, leaky_relu, leaky_relu_backward, sigmoid,
    sigmoid_backward, upsample2, upsample2_backward, ConvGeom,
};
use super::tensor::Tensor;
use crate::error::{invalid, structural, Error, Result};

pub const HEAD_COUNT: usize = 5;
/// Index of the head after the final transposed convolution.
pub const FINAL_HEAD: usize = 4;

const SKIP_DOWN: ConvGeom = ConvGeom { stride: 2, pad: 0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Colour channels of the image part of the input.
    pub image_channels: usize,
    /// Appends the skeleton mask as one extra input channel.
    pub use_skeleton: bool,
    pub base_channels: usize,
    /// Output channels of every head (one per joint).
    pub joint_count: usize,
    pub input_resolution: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { image_channels: 3, use_skeleton: true, base_channels: 8, joint_count: 21, input_resolution: 32 }
    }
}

impl NetworkConfig {
    pub fn input_channels(&self) -> usize {
        self.image_channels + usize::from(self.use_skeleton)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.input_resolution;
        if r < 4 || r % 4 != 0 {
            return Err(invalid(format!("input resolution {r} must be a positive multiple of 4")));
        }
        if self.base_channels == 0 || self.joint_count == 0 || self.image_channels == 0 {
            return Err(invalid(format!("channel counts must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Square resolution of each head, in head order.
    pub fn head_resolutions(&self) -> [usize; HEAD_COUNT] {
        let r = self.input_resolution;
        [r / 2, r / 4, r / 2, r, r]
    }

    fn head_input_channels(&self) -> [usize; HEAD_COUNT] {
        let b = self.base_channels;
        [2 * b, 4 * b, 2 * b, b, b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn zeros(weight: [usize; 4], bias_channels: usize) -> Self {
        Self { weight: Tensor::zeros(weight), bias: Tensor::zeros([1, bias_channels, 1, 1]) }
    }

    fn uniform(rng: &mut ChaCha8Rng, weight: [usize; 4], bias_channels: usize, fan_in: f64) -> Self {
        let bound = (3.0 / fan_in).sqrt();
        let mut p = Self::zeros(weight, bias_channels);
        for w in p.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub skip: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    /// Transposed convolution, weight `[in, out, 3, 3]`.
    pub deconv: ConvParams,
    pub conv2: ConvParams,
    pub skip: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub stem: ConvParams,
    pub down1: DownBlock,
    pub down2: DownBlock,
    pub up1: UpBlock,
    pub up2: UpBlock,
    /// Stride-1 transposed convolution, weight `[b, b, 3, 3]`.
    pub final_deconv: ConvParams,
    pub heads: Vec<ConvParams>,
}

fn down_block(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> DownBlock {
    DownBlock {
        conv1: ConvParams::uniform(rng, [cout, cin, 3, 3], cout, (cin * 9) as f64),
        conv2: ConvParams::uniform(rng, [cout, cout, 3, 3], cout, (cout * 9) as f64),
        skip: ConvParams::uniform(rng, [cout, cin, 1, 1], cout, cin as f64),
    }
}

fn up_block(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> UpBlock {
    UpBlock {
        // a stride-2 transposed 3x3 feeds each output from ~9/4 input taps
        deconv: ConvParams::uniform(rng, [cin, cout, 3, 3], cout, (cin * 9) as f64 / 4.0),
        conv2: ConvParams::uniform(rng, [cout, cout, 3, 3], cout, (cout * 9) as f64),
        skip: ConvParams::uniform(rng, [cout, cin, 1, 1], cout, cin as f64),
    }
}

/// Deterministic initialisation: uniform fan-in scaled trunk, zero heads.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.base_channels;
    let cin = cfg.input_channels();
    let stem = ConvParams::uniform(&mut rng, [b, cin, 3, 3], b, (cin * 9) as f64);
    let down1 = down_block(&mut rng, b, 2 * b);
    let down2 = down_block(&mut rng, 2 * b, 4 * b);
    let up1 = up_block(&mut rng, 4 * b, 2 * b);
    let up2 = up_block(&mut rng, 2 * b, b);
    let final_deconv = ConvParams::uniform(&mut rng, [b, b, 3, 3], b, (b * 9) as f64);
    let heads = cfg
        .head_input_channels()
        .iter()
        .map(|&c| ConvParams::zeros([cfg.joint_count, c, 1, 1], cfg.joint_count))
        .collect();
    Ok(NetworkParams { config: *cfg, stem, down1, down2, up1, up2, final_deconv, heads })
}

impl NetworkParams {
    fn convs(&self) -> Vec<(String, &ConvParams)> {
        let mut v = vec![("stem".to_string(), &self.stem)];
        for (name, blk) in [("down1", &self.down1), ("down2", &self.down2)] {
            v.push((format!("{name}.conv1"), &blk.conv1));
            v.push((format!("{name}.conv2"), &blk.conv2));
            v.push((format!("{name}.skip"), &blk.skip));
        }
        for (name, blk) in [("up1", &self.up1), ("up2", &self.up2)] {
            v.push((format!("{name}.deconv"), &blk.deconv));
            v.push((format!("{name}.conv2"), &blk.conv2));
            v.push((format!("{name}.skip"), &blk.skip));
        }
        v.push(("final".to_string(), &self.final_deconv));
        for (i, h) in self.heads.iter().enumerate() {
            v.push((format!("head{i}"), h));
        }
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut v = vec![&mut self.stem];
        for blk in [&mut self.down1, &mut self.down2] {
            v.extend([&mut blk.conv1, &mut blk.conv2, &mut blk.skip]);
        }
        for blk in [&mut self.up1, &mut self.up2] {
            v.extend([&mut blk.deconv, &mut blk.conv2, &mut blk.skip]);
        }
        v.push(&mut self.final_deconv);
        v.extend(self.heads.iter_mut());
        v
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.convs()
            .into_iter()
            .flat_map(|(name, c)| [(format!("{name}.weight"), &c.weight), (format!("{name}.bias"), &c.bias)])
            .collect()
    }

    /// Same order as [`NetworkParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs_mut().into_iter().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> NetworkParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Debug, Clone)]
struct DownCache {
    c1: Tensor,
    h1: Tensor,
    pre: Tensor,
    out: Tensor,
}

#[derive(Debug, Clone)]
struct UpCache {
    t1: Tensor,
    h1: Tensor,
    pre: Tensor,
    out: Tensor,
}

/// Activations needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    stem_pre: Tensor,
    stem: Tensor,
    down1: DownCache,
    down2: DownCache,
    up1: UpCache,
    up2: UpCache,
    final_pre: Tensor,
    final_out: Tensor,
}

/// Head outputs (sigmoid probabilities) in head order, plus the cache.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub outputs: Vec<Tensor>,
    cache: Option<ForwardCache>,
}

impl ForwardPass {
    /// Drops the cached activations; [`backward`] then reports an error.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    /// Sign of every leaky-ReLU pre-activation, or `None` without a cache.
    /// The network is smooth in its parameters wherever this pattern stays
    /// fixed, which is what finite-difference checks need.
    pub fn activation_pattern(&self) -> Option<Vec<bool>> {
        let c = self.cache.as_ref()?;
        let pre = [
            &c.stem_pre,
            &c.down1.c1,
            &c.down1.pre,
            &c.down2.c1,
            &c.down2.pre,
            &c.up1.t1,
            &c.up1.pre,
            &c.up2.t1,
            &c.up2.pre,
            &c.final_pre,
        ];
        Some(pre.iter().flat_map(|t| t.data().iter().map(|v| *v > 0.0)).collect())
    }
}

fn down_forward(p: &DownBlock, x: &Tensor) -> DownCache {
    let c1 = conv2d(x, &p.conv1.weight, Some(&p.conv1.bias), ConvGeom::DOWN);
    let h1 = leaky_relu(&c1);
    let mut pre = conv2d(&h1, &p.conv2.weight, Some(&p.conv2.bias), ConvGeom::SAME);
    pre.add_assign(&conv2d(x, &p.skip.weight, Some(&p.skip.bias), SKIP_DOWN));
    let out = leaky_relu(&pre);
    DownCache { c1, h1, pre, out }
}

fn up_forward(p: &UpBlock, x: &Tensor, encoder: &Tensor) -> UpCache {
    let hw = (encoder.height(), encoder.width());
    let t1 = conv_transpose2d(x, &p.deconv.weight, &p.deconv.bias, ConvGeom::DOWN, hw);
    let h1 = leaky_relu(&t1);
    let mut pre = conv2d(&h1, &p.conv2.weight, Some(&p.conv2.bias), ConvGeom::SAME);
    pre.add_assign(&upsample2(&conv2d(x, &p.skip.weight, Some(&p.skip.bias), ConvGeom::POINT)));
    pre.add_assign(encoder);
    let out = leaky_relu(&pre);
    UpCache { t1, h1, pre, out }
}

pub fn forward(params: &NetworkParams, input: &Tensor) -> Result<ForwardPass> {
    let cfg = &params.config;
    let [_, c, h, w] = input.shape();
    if c != cfg.input_channels() || h != cfg.input_resolution || w != cfg.input_resolution {
        return Err(structural(format!(
            "input {:?} does not match network input {}x{}x{}",
            input.shape(),
            cfg.input_channels(),
            cfg.input_resolution,
            cfg.input_resolution
        )));
    }
    let stem_pre = conv2d(input, &params.stem.weight, Some(&params.stem.bias), ConvGeom::SAME);
    let stem = leaky_relu(&stem_pre);
    let down1 = down_forward(&params.down1, &stem);
    let down2 = down_forward(&params.down2, &down1.out);
    let up1 = up_forward(&params.up1, &down2.out, &down1.out);
    let up2 = up_forward(&params.up2, &up1.out, &stem);
    let final_pre = conv_transpose2d(
        &up2.out,
        &params.final_deconv.weight,
        &params.final_deconv.bias,
        ConvGeom::SAME,
        (h, w),
    );
    debug_assert!(final_pre.is_finite(), "non-finite activation in final layer");
    let final_out = leaky_relu(&final_pre);
    let features = [&down1.out, &down2.out, &up1.out, &up2.out, &final_out];
    let outputs = features
        .iter()
        .zip(&params.heads)
        .map(|(f, head)| sigmoid(&conv2d(f, &head.weight, Some(&head.bias), ConvGeom::POINT)))
        .collect();
    Ok(ForwardPass {
        outputs,
        cache: Some(ForwardCache {
            input: input.clone(),
            stem_pre,
            stem,
            down1,
            down2,
            up1,
            up2,
            final_pre,
            final_out,
        }),
    })
}

fn accumulate(dst: &mut ConvParams, gw: Tensor, gb: Tensor) {
    dst.weight.add_assign(&gw);
    dst.bias.add_assign(&gb);
}

/// Returns the gradient with respect to the block input.
fn down_backward(p: &DownBlock, g: &mut DownBlock, x: &Tensor, c: &DownCache, gout: &Tensor) -> Tensor {
    let gpre = leaky_relu_backward(&c.pre, gout);
    accumulate(&mut g.conv2, conv2d_backward_weight(&c.h1, &gpre, ConvGeom::SAME, 3), bias_grad(&gpre));
    let gh1 = conv2d_backward_input(&gpre, &p.conv2.weight, ConvGeom::SAME, (c.h1.height(), c.h1.width()));
    let gc1 = leaky_relu_backward(&c.c1, &gh1);
    accumulate(&mut g.conv1, conv2d_backward_weight(x, &gc1, ConvGeom::DOWN, 3), bias_grad(&gc1));
    accumulate(&mut g.skip, conv2d_backward_weight(x, &gpre, SKIP_DOWN, 1), bias_grad(&gpre));
    let hw = (x.height(), x.width());
    let mut gx = conv2d_backward_input(&gc1, &p.conv1.weight, ConvGeom::DOWN, hw);
    gx.add_assign(&conv2d_backward_input(&gpre, &p.skip.weight, SKIP_DOWN, hw));
    gx
}

/// Returns the gradients with respect to the block input and the encoder
/// activation it adds.
fn up_backward(p: &UpBlock, g: &mut UpBlock, x: &Tensor, c: &UpCache, gout: &Tensor) -> (Tensor, Tensor) {
    let gpre = leaky_relu_backward(&c.pre, gout);
    accumulate(&mut g.conv2, conv2d_backward_weight(&c.h1, &gpre, ConvGeom::SAME, 3), bias_grad(&gpre));
    let gh1 = conv2d_backward_input(&gpre, &p.conv2.weight, ConvGeom::SAME, (c.h1.height(), c.h1.width()));
    let gt1 = leaky_relu_backward(&c.t1, &gh1);
    accumulate(&mut g.deconv, conv_transpose2d_backward_weight(x, &gt1, ConvGeom::DOWN, 3), bias_grad(&gt1));
    let mut gx = conv_transpose2d_backward_input(&gt1, &p.deconv.weight, ConvGeom::DOWN);
    let gskip = upsample2_backward(&gpre);
    accumulate(&mut g.skip, conv2d_backward_weight(x, &gskip, ConvGeom::POINT, 1), bias_grad(&gskip));
    gx.add_assign(&conv2d_backward_input(&gskip, &p.skip.weight, ConvGeom::POINT, (x.height(), x.width())));
    (gx, gpre)
}

/// Reverse pass. `head_grads[i]` is dLoss/d(output i) or `None` for a head
/// that takes no part in the loss. Gradients of all heads sum along the
/// shared trunk.
pub fn backward(params: &NetworkParams, pass: &ForwardPass, head_grads: &[Option<Tensor>]) -> Result<NetworkParams> {
    let c = pass
        .cache
        .as_ref()
        .ok_or_else(|| Error::InvalidState("forward pass was run without caching activations".into()))?;
    if head_grads.len() != HEAD_COUNT {
        return Err(structural(format!("expected {HEAD_COUNT} head gradients, got {}", head_grads.len())));
    }
    for (i, (g, y)) in head_grads.iter().zip(&pass.outputs).enumerate() {
        if let Some(g) = g {
            if g.shape() != y.shape() {
                return Err(structural(format!("head {i} gradient {:?} vs output {:?}", g.shape(), y.shape())));
            }
        }
    }
    let mut grads = params.zeros_like();
    let features = [&c.down1.out, &c.down2.out, &c.up1.out, &c.up2.out, &c.final_out];
    let mut feature_grads: Vec<Tensor> = features.iter().map(|f| Tensor::zeros(f.shape())).collect();
    for i in 0..HEAD_COUNT {
        let Some(gy) = &head_grads[i] else { continue };
        let gz = sigmoid_backward(&pass.outputs[i], gy);
        let f = features[i];
        accumulate(&mut grads.heads[i], conv2d_backward_weight(f, &gz, ConvGeom::POINT, 1), bias_grad(&gz));
        feature_grads[i] = conv2d_backward_input(&gz, &params.heads[i].weight, ConvGeom::POINT, (f.height(), f.width()));
    }
    let mut fg = feature_grads.into_iter();
    let (g_d1_head, g_d2_head, g_u1_head, g_u2_head, g_final) =
        (fg.next().unwrap(), fg.next().unwrap(), fg.next().unwrap(), fg.next().unwrap(), fg.next().unwrap());

    let g_final_pre = leaky_relu_backward(&c.final_pre, &g_final);
    accumulate(
        &mut grads.final_deconv,
        conv_transpose2d_backward_weight(&c.up2.out, &g_final_pre, ConvGeom::SAME, 3),
        bias_grad(&g_final_pre),
    );
    let mut g_u2 = conv_transpose2d_backward_input(&g_final_pre, &params.final_deconv.weight, ConvGeom::SAME);
    g_u2.add_assign(&g_u2_head);

    let (mut g_u1, mut g_stem) = up_backward(&params.up2, &mut grads.up2, &c.up1.out, &c.up2, &g_u2);
    g_u1.add_assign(&g_u1_head);
    let (mut g_d2, mut g_d1) = up_backward(&params.up1, &mut grads.up1, &c.down2.out, &c.up1, &g_u1);
    g_d2.add_assign(&g_d2_head);
    g_d1.add_assign(&g_d1_head);
    g_d1.add_assign(&down_backward(&params.down2, &mut grads.down2, &c.down1.out, &c.down2, &g_d2));
    g_stem.add_assign(&down_backward(&params.down1, &mut grads.down1, &c.stem, &c.down1, &g_d1));

    let g_stem_pre = leaky_relu_backward(&c.stem_pre, &g_stem);
    accumulate(
        &mut grads.stem,
        conv2d_backward_weight(&c.input, &g_stem_pre, ConvGeom::SAME, 3),
        bias_grad(&g_stem_pre),
    );
    Ok(grads)
}
