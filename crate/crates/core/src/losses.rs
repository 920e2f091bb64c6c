//! Training losses with analytic gradients with respect to the prediction.
//!
//! All inputs are flattened grids. Norms are unnormalised sums, so the loss
//! magnitude grows with the number of pixels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleLossResult {
    pub value: f64,
    /// One gradient per level, shaped like that level's prediction.
    pub gradients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        Self { lambda1: 0.4, lambda2: 0.6 }
    }
}

impl CombinedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 == 0.0 {
            return Err(invalid(format!(
                "loss weights ({}, {}) must be non-negative and not both zero",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Per-level weights of the multi-scale loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleLossConfig {
    pub weights: Vec<f64>,
}

impl MultiScaleLossConfig {
    /// Weight `resolution / full_resolution` for each output, so the full
    /// resolution gets 1, half resolution 1/2, quarter resolution 1/4.
    pub fn by_resolution(resolutions: &[usize], full_resolution: usize) -> Self {
        Self {
            weights: resolutions.iter().map(|&r| r as f64 / full_resolution as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(invalid("multi-scale loss needs at least one level"));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(invalid(format!("scale weight {w} must be positive")));
        }
        Ok(())
    }
}

impl Default for MultiScaleLossConfig {
    /// Five outputs at r/2, r/4, r/2, r, r.
    fn default() -> Self {
        Self { weights: vec![0.5, 0.25, 0.5, 1.0, 1.0] }
    }
}

fn check_shapes(x: &[f64], xh: &[f64]) -> Result<()> {
    if x.len() != xh.len() {
        return Err(structural(format!("target has {} values, prediction {}", x.len(), xh.len())));
    }
    Ok(())
}

/// `sum |x - xh|`; the subgradient at zero difference is 0.
pub fn l1_loss(x: &[f64], xh: &[f64]) -> Result<LossResult> {
    check_shapes(x, xh)?;
    let mut value = 0.0;
    let gradient = x
        .iter()
        .zip(xh)
        .map(|(a, b)| {
            let d = a - b;
            value += d.abs();
            if d > 0.0 {
                -1.0
            } else if d < 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossResult { value, gradient })
}

/// `1 - 2 xh.x / (|xh|^2 + |x|^2)`. Two all-zero inputs count as a perfect
/// match (loss 0, zero gradient).
pub fn soft_dice_loss(x: &[f64], xh: &[f64]) -> Result<LossResult> {
    check_shapes(x, xh)?;
    let dot: f64 = x.iter().zip(xh).map(|(a, b)| a * b).sum();
    let denom: f64 = x.iter().chain(xh).map(|v| v * v).sum();
    if denom == 0.0 {
        return Ok(LossResult { value: 0.0, gradient: vec![0.0; x.len()] });
    }
    let value = 1.0 - 2.0 * dot / denom;
    let d2 = denom * denom;
    let gradient = x
        .iter()
        .zip(xh)
        .map(|(a, b)| -(2.0 * a * denom - 4.0 * b * dot) / d2)
        .collect();
    Ok(LossResult { value, gradient })
}

pub fn combined_loss(x: &[f64], xh: &[f64], cfg: &CombinedLossConfig) -> Result<LossResult> {
    cfg.validate()?;
    let l1 = l1_loss(x, xh)?;
    let dice = soft_dice_loss(x, xh)?;
    let gradient = l1
        .gradient
        .iter()
        .zip(&dice.gradient)
        .map(|(g1, g2)| cfg.lambda1 * g1 + cfg.lambda2 * g2)
        .collect();
    Ok(LossResult { value: cfg.lambda1 * l1.value + cfg.lambda2 * dice.value, gradient })
}

/// `sum_i w_i |x_i - xh_i|^2` over levels.
pub fn multi_scale_loss<T: AsRef<[f64]>, P: AsRef<[f64]>>(
    targets: &[T],
    preds: &[P],
    cfg: &MultiScaleLossConfig,
) -> Result<MultiScaleLossResult> {
    cfg.validate()?;
    if targets.len() != cfg.weights.len() || preds.len() != cfg.weights.len() {
        return Err(structural(format!(
            "expected {} levels, got {} targets and {} predictions",
            cfg.weights.len(),
            targets.len(),
            preds.len()
        )));
    }
    let mut value = 0.0;
    let mut gradients = Vec::with_capacity(preds.len());
    for (i, ((t, p), &w)) in targets.iter().zip(preds).zip(&cfg.weights).enumerate() {
        let (t, p) = (t.as_ref(), p.as_ref());
        if t.len() != p.len() {
            return Err(structural(format!("level {i}: target has {} values, prediction {}", t.len(), p.len())));
        }
        let mut sq = 0.0;
        let g = t
            .iter()
            .zip(p)
            .map(|(a, b)| {
                let d = a - b;
                sq += d * d;
                -2.0 * w * d
            })
            .collect();
        value += w * sq;
        gradients.push(g);
    }
    Ok(MultiScaleLossResult { value, gradients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` around `xh`, one coordinate at a time.
    fn numeric_gradient(f: impl Fn(&[f64]) -> f64, xh: &[f64], h: f64) -> Vec<f64> {
        let mut p = xh.to_vec();
        (0..xh.len())
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

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap().value, 3.0);
        let same = l1_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(same.value, 0.0);
        assert_eq!(same.gradient, vec![0.0, 0.0]);
        assert!(matches!(l1_loss(&[1.0], &[1.0, 2.0]), Err(crate::Error::Structural(_))));
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_grid(&mut rng, 64);
            let xh = random_grid(&mut rng, 64);
            let g = l1_loss(&x, &xh).unwrap().gradient;
            let n = numeric_gradient(|p| l1_loss(&x, p).unwrap().value, &xh, 1e-5);
            for i in 0..64 {
                if (x[i] - xh[i]).abs() > 1e-6 {
                    assert!(rel_err(g[i], n[i]) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn soft_dice_examples() {
        assert!(soft_dice_loss(&[0.2, 0.9, 0.0], &[0.2, 0.9, 0.0]).unwrap().value.abs() < 1e-15);
        assert_eq!(soft_dice_loss(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap().value, 1.0);
        let v = soft_dice_loss(&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]).unwrap().value;
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let empty = soft_dice_loss(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(empty.value, 0.0);
        assert_eq!(empty.gradient, vec![0.0; 4]);
    }

    #[test]
    fn soft_dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_grid(&mut rng, 64);
            let xh = random_grid(&mut rng, 64);
            let g = soft_dice_loss(&x, &xh).unwrap().gradient;
            let n = numeric_gradient(|p| soft_dice_loss(&x, p).unwrap().value, &xh, 1e-5);
            for i in 0..64 {
                assert!(rel_err(g[i], n[i]) < 1e-4, "{} vs {}", g[i], n[i]);
            }
        }
    }

    #[test]
    fn combined_examples() {
        let cfg = CombinedLossConfig::default();
        let v = combined_loss(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], &cfg).unwrap().value;
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(combined_loss(&[0.5, 0.1], &[0.5, 0.1], &cfg).unwrap().value, 0.0);
        let x = [0.3, 0.9, 0.1];
        let xh = [0.5, 0.2, 0.1];
        let only_l1 = combined_loss(&x, &xh, &CombinedLossConfig { lambda1: 1.0, lambda2: 0.0 }).unwrap();
        assert_eq!(only_l1, l1_loss(&x, &xh).unwrap());
        assert!(combined_loss(&x, &xh, &CombinedLossConfig { lambda1: 0.0, lambda2: 0.0 }).is_err());
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = CombinedLossConfig::default();
        for _ in 0..20 {
            let x = random_grid(&mut rng, 64);
            let xh = random_grid(&mut rng, 64);
            let g = combined_loss(&x, &xh, &cfg).unwrap().gradient;
            let n = numeric_gradient(|p| combined_loss(&x, p, &cfg).unwrap().value, &xh, 1e-5);
            for i in 0..64 {
                if (x[i] - xh[i]).abs() > 1e-6 {
                    assert!(rel_err(g[i], n[i]) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn multi_scale_examples() {
        let cfg = MultiScaleLossConfig { weights: vec![1.0, 0.5] };
        let t = vec![vec![0.0, 0.0], vec![0.0; 4]];
        assert_eq!(multi_scale_loss(&t, &t, &cfg).unwrap().value, 0.0);
        // squared-error sums 2 and 4
        let p = vec![vec![1.0, 1.0], vec![1.0; 4]];
        assert_eq!(multi_scale_loss(&t, &p, &cfg).unwrap().value, 4.0);
        assert!(multi_scale_loss(&t[..1], &p[..1], &cfg).is_err());
        assert!(multi_scale_loss(&t, &[vec![1.0], vec![1.0; 4]], &cfg).is_err());
        assert!(MultiScaleLossConfig { weights: vec![1.0, 0.0] }.validate().is_err());
    }

    #[test]
    fn default_weights_follow_resolution() {
        let cfg = MultiScaleLossConfig::by_resolution(&[64, 32, 64, 128, 128], 128);
        assert_eq!(cfg.weights, vec![0.5, 0.25, 0.5, 1.0, 1.0]);
        assert_eq!(cfg, MultiScaleLossConfig::default());
    }

    #[test]
    fn multi_scale_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sizes = [64, 16, 4];
        let cfg = MultiScaleLossConfig { weights: vec![1.0, 0.5, 0.25] };
        for _ in 0..20 {
            let t: Vec<Vec<f64>> = sizes.iter().map(|&n| random_grid(&mut rng, n)).collect();
            let p: Vec<Vec<f64>> = sizes.iter().map(|&n| random_grid(&mut rng, n)).collect();
            let res = multi_scale_loss(&t, &p, &cfg).unwrap();
            for level in 0..3 {
                let f = |q: &[f64]| {
                    let mut pp = p.clone();
                    pp[level] = q.to_vec();
                    multi_scale_loss(&t, &pp, &cfg).unwrap().value
                };
                let n = numeric_gradient(f, &p[level], 1e-5);
                for (a, b) in res.gradients[level].iter().zip(&n) {
                    assert!(rel_err(*a, *b) < 1e-4);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)
        ) {
            let (x, xh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(l1_loss(&x, &xh).unwrap().value >= 0.0);
            let dice = soft_dice_loss(&x, &xh).unwrap().value;
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&dice));
            prop_assert!(combined_loss(&x, &xh, &CombinedLossConfig::default()).unwrap().value >= -1e-12);
            let cfg = MultiScaleLossConfig { weights: vec![0.7] };
            prop_assert!(multi_scale_loss(&[&x], &[&xh], &cfg).unwrap().value >= 0.0);
        }

        #[test]
        fn multi_scale_is_homogeneous_in_weights(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
            c in 0.1f64..10.0,
        ) {
            let (x, xh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let base = MultiScaleLossConfig { weights: vec![1.0, 0.5] };
            let scaled = MultiScaleLossConfig { weights: vec![c, 0.5 * c] };
            let a = multi_scale_loss(&[&x, &xh], &[&xh, &x], &base).unwrap();
            let b = multi_scale_loss(&[&x, &xh], &[&xh, &x], &scaled).unwrap();
            prop_assert!((b.value - c * a.value).abs() <= 1e-9 * (1.0 + b.value.abs()));
            for (ga, gb) in a.gradients.iter().flatten().zip(b.gradients.iter().flatten()) {
                prop_assert!((gb - c * ga).abs() <= 1e-9 * (1.0 + gb.abs()));
            }
        }
    }
}
