//! Central-difference oracles shared by the gradient tests and the
//! acceptance suite.

#![allow(dead_code)]

use handpose_core::net::train::objective_loss;
use handpose_core::net::{backward, build_network, forward, NetworkConfig, NetworkParams, Objective, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Gives the zero-initialised heads random weights so every layer receives
/// a non-trivial gradient.
pub fn randomise_heads(params: &mut NetworkParams, rng: &mut ChaCha8Rng) {
    for h in &mut params.heads {
        for w in h.weight.data_mut().iter_mut().chain(h.bias.data_mut()) {
            *w = rng.random_range(-0.8..0.8);
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NetworkCheck {
    pub worst: f64,
    pub probes: usize,
    /// Probes redrawn because `theta +/- h` changed some leaky-ReLU sign,
    /// where the loss has no derivative to compare against.
    pub kink_redraws: usize,
}

/// One random network instance: random trunk, heads, input and targets.
/// Compares `probes` randomly chosen analytic parameter gradients against
/// central differences.
pub fn check_network(cfg: NetworkConfig, obj: &Objective, seed: u64, probes: usize) -> NetworkCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = build_network(&cfg, seed).unwrap();
    randomise_heads(&mut params, &mut rng);
    let r = cfg.input_resolution;
    let input = random_tensor(&mut rng, [1, cfg.input_channels(), r, r], -1.0, 1.0);
    let targets: Vec<Tensor> = cfg
        .head_resolutions()
        .iter()
        .map(|&h| random_tensor(&mut rng, [1, cfg.joint_count, h, h], 0.0, 1.0))
        .collect();
    let pass = forward(&params, &input).unwrap();
    let pattern = pass.activation_pattern().unwrap();
    let (_, head_grads) = objective_loss(obj, &pass.outputs, &targets).unwrap();
    let grads = backward(&params, &pass, &head_grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();

    let eval = |p: &NetworkParams| {
        let pass = forward(p, &input).unwrap();
        let loss = objective_loss(obj, &pass.outputs, &targets).unwrap().0;
        (loss, pass.activation_pattern().unwrap())
    };
    let mut out = NetworkCheck::default();
    while out.probes < probes {
        let ti = rng.random_range(0..analytic.len());
        let j = rng.random_range(0..analytic[ti].len());
        let mut probe = params.clone();
        let orig = probe.tensors_mut()[ti].data()[j];
        probe.tensors_mut()[ti].data_mut()[j] = orig + STEP;
        let (up, p_up) = eval(&probe);
        probe.tensors_mut()[ti].data_mut()[j] = orig - STEP;
        let (down, p_down) = eval(&probe);
        if p_up != pattern || p_down != pattern {
            out.kink_redraws += 1;
            assert!(out.kink_redraws <= 10 * probes, "almost every probe crosses a kink");
            continue;
        }
        let numeric = (up - down) / (2.0 * STEP);
        out.worst = out.worst.max(relative_error(analytic[ti][j], numeric, 1e-6));
        out.probes += 1;
    }
    out
}
