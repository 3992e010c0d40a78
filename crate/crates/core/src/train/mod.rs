//! Optimizer, schedule, synthetic task, training loop and the coarse-prior
//! convergence experiment.

mod convergence;
mod optim;
mod run;
mod schedule;
mod task;

pub use convergence::{convergence_experiment, ConvergenceReport, ConvergenceRow, Variant};
pub use optim::{adamw_update, AdamW, AdamWConfig, Moments};
pub use run::{evaluate, train_from, train_run, EvalOutput, RunOutput, TraceRow};
pub use schedule::poly_lr;
pub use task::{depth_key, Condition, Sample, SyntheticTask, TaskConfig, CLASS_NAMES};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub betas: (f64, f64),
    pub total_iters: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// Weight of the coarse-map loss.
    pub lambda_c: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 0.05,
            eps: 1e-8,
            betas: (0.9, 0.999),
            total_iters: 300,
            poly_power: 0.9,
            seed: 0,
            lambda_c: crate::cmpe::DEFAULT_LAMBDA,
            batch_size: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 {} must be finite and ≥ 0", self.lr0)));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be ≥ 1".into()));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Config("poly_power must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn lr(&self, t: usize) -> f64 {
        poly_lr(t, self.total_iters, self.lr0, self.poly_power)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}
