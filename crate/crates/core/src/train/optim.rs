//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `param` in place. `step` is the 1-based step count
/// after this update.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(Error::Contract(format!(
            "gradient of length {} for a parameter of length {}",
            grad.len(),
            param.len()
        )));
    }
    if state.m.is_empty() && !param.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Contract("optimizer moments do not match the parameter".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        param[i] -= lr * cfg.weight_decay * param[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    /// Fails if any tensor in `params` is not trainable.
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (name, t) in params.iter() {
            if !t.requires_grad() {
                return Err(Error::Contract(format!("frozen tensor '{name}' handed to the optimizer")));
            }
            state.insert(name.clone(), Moments::default());
        }
        Ok(Self { cfg, step: 0, state })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// Applies the accumulated gradients; a tensor without a gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, t) in params.iter_mut() {
            let state = self
                .state
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter '{name}' unknown to the optimizer")))?;
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            adamw_update(t.data_mut(), &grad, state, self.step, lr, &self.cfg)?;
        }
        Ok(())
    }
}
