use serde::{Deserialize, Serialize};

use super::model::NetworkParams;
use crate::error::{invalid, structural, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the learning rate at every decay boundary.
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, decay_factor: 0.9, decay_every_epochs: 8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.epsilon > 0.0)
            || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
            || self.decay_every_epochs == 0
        {
            return Err(invalid(format!("bad optimiser settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    /// Optimiser steps that make up one epoch; drives the decay schedule.
    pub steps_per_epoch: u64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, config: AdamConfig, steps_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(invalid("an epoch needs at least one step"));
        }
        let zeros: Vec<Vec<f64>> = params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Self { config, steps_per_epoch, step: 0, first: zeros.clone(), second: zeros })
    }

    /// Learning rate for the next step.
    pub fn learning_rate(&self) -> f64 {
        let epoch = self.step / self.steps_per_epoch;
        let decays = epoch / self.config.decay_every_epochs as u64;
        self.config.learning_rate * self.config.decay_factor.powi(decays.min(i32::MAX as u64) as i32)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut NetworkParams, grads: &NetworkParams, state: &mut OptimizerState) -> Result<()> {
    let grads = grads.named_tensors();
    if grads.len() != state.first.len() {
        return Err(structural("gradient set does not match optimiser state"));
    }
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::Training { step: state.step, message: format!("non-finite gradient in {name}") });
        }
    }
    let c = state.config;
    let lr = state.learning_rate();
    let t = (state.step + 1) as i32;
    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(structural("gradient set does not match parameters"));
    }
    for (i, (p, (_, g))) in tensors.iter_mut().zip(&grads).enumerate() {
        if p.len() != g.len() || state.first[i].len() != g.len() {
            return Err(structural(format!("tensor {i}: parameter, gradient and moment sizes differ")));
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + c.epsilon);
        }
    }
    state.step += 1;
    Ok(())
}
