//! Convolution kernels and pointwise activations with their adjoints.
//!
//! Convolution weights are `[out, in, k, k]`. A transposed convolution with
//! weight `[in, out, k, k]` is the adjoint of the convolution with the same
//! weight, so both directions share the three kernels below.

use super::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME: ConvGeom = ConvGeom { stride: 1, pad: 1 };
    pub const DOWN: ConvGeom = ConvGeom { stride: 2, pad: 1 };
    pub const POINT: ConvGeom = ConvGeom { stride: 1, pad: 0 };

    pub fn out_len(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

/// Output indices `o` in `[lo, hi)` whose input index `o * stride + k - pad`
/// falls inside `[0, input)`.
fn valid_range(k: usize, g: ConvGeom, input: usize, output: usize) -> (usize, usize) {
    let (k, p, s) = (k as isize, g.pad as isize, g.stride as isize);
    let lo = ((p - k).max(0) + s - 1) / s;
    let hi = (input as isize - 1 + p - k).div_euclid(s) + 1;
    (lo.max(0) as usize, hi.clamp(0, output as isize) as usize)
}

/// Calls `f(out_row, in_row, out_lo, out_hi, in_offset)` for every valid
/// kernel tap row, where input column = `o * stride + in_offset`.
#[inline]
fn for_each_tap(
    g: ConvGeom,
    k: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    for ky in 0..k {
        let (oy_lo, oy_hi) = valid_range(ky, g, in_h, out_h);
        for kx in 0..k {
            let (ox_lo, ox_hi) = valid_range(kx, g, in_w, out_w);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                // ix = ox * stride + kx - pad >= 0 for ox >= ox_lo
                let ix0 = ox_lo * g.stride + kx - g.pad;
                f(ky * k + kx, oy, iy, ox_lo, ox_hi, ix0, in_w);
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, _] = w.shape();
    assert_eq!(cin, wcin, "conv input channels");
    let (ho, wo) = (g.out_len(h, k), g.out_len(wd, k));
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let kk = k * k;
    let wdata = w.data();
    let s = g.stride;
    for b in 0..n {
        for co in 0..cout {
            let start = (b * cout + co) * ho * wo;
            let op = &mut out.data_mut()[start..start + ho * wo];
            if let Some(bias) = bias {
                op.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let ip = x.plane(b, ci);
                let wk = &wdata[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                for_each_tap(g, k, (h, wd), (ho, wo), |tap, oy, iy, lo, hi, ix0, in_w| {
                    let wv = wk[tap];
                    let orow = &mut op[oy * wo + lo..oy * wo + hi];
                    let irow = &ip[iy * in_w..(iy + 1) * in_w];
                    if s == 1 {
                        for (o, i) in orow.iter_mut().zip(&irow[ix0..]) {
                            *o += wv * i;
                        }
                    } else {
                        for (j, o) in orow.iter_mut().enumerate() {
                            *o += wv * irow[ix0 + j * s];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to its input (`in_hw` is the input size).
pub fn conv2d_backward_input(gy: &Tensor, w: &Tensor, g: ConvGeom, in_hw: (usize, usize)) -> Tensor {
    let [n, cout, ho, wo] = gy.shape();
    let [wcout, cin, k, _] = w.shape();
    assert_eq!(cout, wcout, "conv output channels");
    let (h, wd) = in_hw;
    let mut gx = Tensor::zeros([n, cin, h, wd]);
    let kk = k * k;
    let wdata = w.data();
    let s = g.stride;
    for b in 0..n {
        for ci in 0..cin {
            let start = (b * cin + ci) * h * wd;
            let xp = &mut gx.data_mut()[start..start + h * wd];
            for co in 0..cout {
                let gp = gy.plane(b, co);
                let wk = &wdata[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                for_each_tap(g, k, (h, wd), (ho, wo), |tap, oy, iy, lo, hi, ix0, in_w| {
                    let wv = wk[tap];
                    let grow = &gp[oy * wo + lo..oy * wo + hi];
                    let xrow = &mut xp[iy * in_w..(iy + 1) * in_w];
                    if s == 1 {
                        for (x, gv) in xrow[ix0..].iter_mut().zip(grow) {
                            *x += wv * gv;
                        }
                    } else {
                        for (j, gv) in grow.iter().enumerate() {
                            xrow[ix0 + j * s] += wv * gv;
                        }
                    }
                });
            }
        }
    }
    gx
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_backward_weight(x: &Tensor, gy: &Tensor, g: ConvGeom, k: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [gn, cout, ho, wo] = gy.shape();
    assert_eq!(n, gn, "batch size");
    let kk = k * k;
    let mut gw = Tensor::zeros([cout, cin, k, k]);
    let s = g.stride;
    for b in 0..n {
        for co in 0..cout {
            let gp = gy.plane(b, co);
            for ci in 0..cin {
                let ip = x.plane(b, ci);
                let wk = &mut gw.data_mut()[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                for_each_tap(g, k, (h, wd), (ho, wo), |tap, oy, iy, lo, hi, ix0, in_w| {
                    let grow = &gp[oy * wo + lo..oy * wo + hi];
                    let irow = &ip[iy * in_w..(iy + 1) * in_w];
                    let acc: f64 = if s == 1 {
                        grow.iter().zip(&irow[ix0..]).map(|(a, b)| a * b).sum()
                    } else {
                        grow.iter().enumerate().map(|(j, a)| a * irow[ix0 + j * s]).sum()
                    };
                    wk[tap] += acc;
                });
            }
        }
    }
    gw
}

/// Per-channel sum, the bias gradient of any convolution.
pub fn bias_grad(gy: &Tensor) -> Tensor {
    let [n, c, _, _] = gy.shape();
    let mut gb = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            gb.data_mut()[ch] += gy.plane(b, ch).iter().sum::<f64>();
        }
    }
    gb
}

pub fn add_bias(t: &mut Tensor, bias: &Tensor) {
    let [n, c, _, _] = t.shape();
    let p = t.plane_len();
    for b in 0..n {
        for ch in 0..c {
            let bv = bias.data()[ch];
            let start = (b * c + ch) * p;
            for v in &mut t.data_mut()[start..start + p] {
                *v += bv;
            }
        }
    }
}

/// Transposed convolution with weight `[in, out, k, k]` and an explicit
/// output size.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: &Tensor, g: ConvGeom, out_hw: (usize, usize)) -> Tensor {
    let mut y = conv2d_backward_input(x, w, g, out_hw);
    add_bias(&mut y, bias);
    y
}

pub fn conv_transpose2d_backward_input(gy: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    conv2d(gy, w, None, g)
}

pub fn conv_transpose2d_backward_weight(x: &Tensor, gy: &Tensor, g: ConvGeom, k: usize) -> Tensor {
    conv2d_backward_weight(gy, x, g, k)
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Multiplies `grad` by the leaky-ReLU derivative at pre-activation `pre`.
pub fn leaky_relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(p, g)| if *p > 0.0 { *g } else { LEAKY_SLOPE * g })
        .collect();
    Tensor::from_vec(pre.shape(), data).expect("same shape")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Chain rule through a sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let data = y.data().iter().zip(grad.data()).map(|(y, g)| g * y * (1.0 - y)).collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (oh, ow) = (2 * h, 2 * w);
    for b in 0..n {
        for ch in 0..c {
            let ip = x.plane(b, ch);
            let start = (b * c + ch) * oh * ow;
            let op = &mut out.data_mut()[start..start + oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    op[y * ow + xx] = ip[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let [n, c, oh, ow] = gy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let gp = gy.plane(b, ch);
            let start = (b * c + ch) * h * w;
            let xp = &mut gx.data_mut()[start..start + h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    xp[(y / 2) * w + xx / 2] += gp[y * ow + xx];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct definition of a padded, strided convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let (ho, wo) = (g.out_len(h, k), g.out_len(wd, k));
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                            * x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (g, k, hw) in [(ConvGeom::SAME, 3, 7), (ConvGeom::DOWN, 3, 8), (ConvGeom::DOWN, 3, 7), (ConvGeom::POINT, 1, 5), (ConvGeom { stride: 2, pad: 0 }, 1, 6)] {
            let x = rand_tensor(&mut rng, [2, 3, hw, hw + 1]);
            let w = rand_tensor(&mut rng, [4, 3, k, k]);
            let fast = conv2d(&x, &w, None, g);
            let slow = naive_conv(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_kernels_are_adjoints() {
        // <conv(x, w), y> = <x, conv_bi(y, w)> = <w, conv_bw(x, y)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (g, k, hw) in [(ConvGeom::SAME, 3, 6), (ConvGeom::DOWN, 3, 8), (ConvGeom::DOWN, 3, 9), (ConvGeom::POINT, 1, 4)] {
            let x = rand_tensor(&mut rng, [2, 3, hw, hw]);
            let w = rand_tensor(&mut rng, [5, 3, k, k]);
            let y = conv2d(&x, &w, None, g);
            let r = rand_tensor(&mut rng, y.shape());
            let lhs = dot(&y, &r);
            let gx = conv2d_backward_input(&r, &w, g, (hw, hw));
            let gw = conv2d_backward_weight(&x, &r, g, k);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let w = rand_tensor(&mut rng, [4, 2, 3, 3]);
        let b = Tensor::zeros([1, 2, 1, 1]);
        let y = conv_transpose2d(&x, &w, &b, ConvGeom::DOWN, (16, 16));
        assert_eq!(y.shape(), [1, 2, 16, 16]);
        let back = conv_transpose2d_backward_input(&y, &w, ConvGeom::DOWN);
        assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, [2, 3, 4, 5]);
        let up = upsample2(&x);
        let r = rand_tensor(&mut rng, up.shape());
        assert!((dot(&up, &r) - dot(&x, &upsample2_backward(&r))).abs() < 1e-12);
    }
}
