//! AdamW: bias-corrected adaptive moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }
}

fn describe(params: &PolicyParams, i: usize) -> String {
    match params.layout().locate(i) {
        Some(t) => format!("{}[{}]", t.name, i - t.offset),
        None => format!("#{i}"),
    }
}

/// One AdamW update. A non-finite gradient aborts before anything is touched.
pub fn optimizer_step(
    params: &mut PolicyParams,
    gradient: &[f64],
    config: &AdamWConfig,
    state: &mut AdamState,
) -> Result<()> {
    if gradient.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::usage(format!(
            "shape mismatch: {} parameters, {} gradient entries, {} moments",
            params.len(),
            gradient.len(),
            state.m.len()
        )));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {} is {} (parameter version {})",
            describe(params, i),
            gradient[i],
            params.version
        )));
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    for (((p, &g), m), v) in params
        .data
        .iter_mut()
        .zip(gradient)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    if let Some(i) = params.data.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!(
            "parameter {} became non-finite after step {}",
            describe(params, i),
            state.steps
        )));
    }
    params.version += 1;
    Ok(())
}
