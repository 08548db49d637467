use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelParameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Construction(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates per parameter, kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParameters) -> Self {
        let zeros = |p: &ModelParameters| {
            p.iter()
                .map(|(k, t)| (k.to_string(), vec![0.0; t.len()]))
                .collect()
        };
        Self {
            config,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// `m / (1 − β1^t)` for the current step.
    pub fn corrected_first_moment(&self, name: &str) -> Option<Vec<f64>> {
        let c = 1.0 - self.config.beta1.powi(self.t as i32);
        self.m.get(name).map(|m| m.iter().map(|v| v / c).collect())
    }
}

/// One bias-corrected Adam update. Gradients are checked completely before
/// any parameter changes.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for {name}")))?;
        if g.len() != t.len() || state.m.get(name).map(Vec::len) != Some(t.len()) {
            return Err(Error::Shape(format!(
                "{name}: {} parameters, {} gradients",
                t.len(),
                g.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{i}] is {}",
                g[i]
            )));
        }
    }
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + epsilon)) as f32;
        }
    }
    Ok(())
}
