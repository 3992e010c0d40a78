//! Iterations-to-threshold with and without the coarse prior.

use rayon::prelude::*;

use super::{train_run, SyntheticTask, TaskConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{CmpeMode, Model, ModelConfig};

/// Fraction of a run's initial final-head loss that counts as converged.
pub const TAU_FRACTION: f64 = 0.6;
pub const MIN_SEEDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Coarse prior enabled, auxiliary loss weighted by `lambda_c`.
    Cmpe,
    /// No coarse prior.
    Baseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Cmpe => "cmpe",
            Variant::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub variant: Variant,
    pub seed: u64,
    /// Number of completed updates before the final-head loss first fell
    /// below `tau`.
    pub iters_to_tau: Option<usize>,
    pub tau: f64,
    pub first_prompt_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// `variant,seed,iters_to_tau`; runs that never reach `tau` print
    /// `not reached`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,iters_to_tau\n");
        for r in &self.rows {
            let v = r.iters_to_tau.map_or_else(|| "not reached".to_string(), |i| i.to_string());
            out.push_str(&format!("{},{},{}\n", r.variant.name(), r.seed, v));
        }
        out
    }

    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &ConvergenceRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    /// Median iterations-to-τ, with unreached runs ranked last. `None` when
    /// the median run itself never reached τ.
    pub fn median(&self, variant: Variant) -> Option<f64> {
        let mut v: Vec<Option<usize>> = self.rows_for(variant).map(|r| r.iters_to_tau).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by_key(|x| x.unwrap_or(usize::MAX));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2].map(|x| x as f64)
        } else {
            Some((v[n / 2 - 1]? as f64 + v[n / 2]? as f64) / 2.0)
        }
    }

    /// Seeds whose first-step prompt gradient is strictly larger with the prior.
    pub fn gradient_wins(&self) -> usize {
        self.rows_for(Variant::Cmpe)
            .filter(|on| {
                self.rows_for(Variant::Baseline)
                    .find(|off| off.seed == on.seed)
                    .is_some_and(|off| on.first_prompt_grad_norm > off.first_prompt_grad_norm)
            })
            .count()
    }

    pub fn summary(&self) -> String {
        let fmt = |m: Option<f64>| m.map_or_else(|| "not reached".to_string(), |x| format!("{x}"));
        format!(
            "median iterations to tau: cmpe {}, baseline {}; larger first-step prompt gradient with cmpe on {}/{} seeds",
            fmt(self.median(Variant::Cmpe)),
            fmt(self.median(Variant::Baseline)),
            self.gradient_wins(),
            self.rows_for(Variant::Cmpe).count()
        )
    }
}

/// Trains both variants for every seed (task and initialization both keyed
/// by the seed). Runs execute in parallel; rows come back in seed order,
/// prior-enabled first.
pub fn convergence_experiment(
    model_cfg: &ModelConfig,
    task_cfg: &TaskConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ConvergenceReport> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!(
            "convergence experiment needs at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    let on = Model::new(ModelConfig {
        cmpe: CmpeMode::Enabled,
        ..model_cfg.clone()
    })?;
    let off = Model::new(ModelConfig {
        cmpe: CmpeMode::Absent,
        ..model_cfg.clone()
    })?;
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| [(s, Variant::Cmpe), (s, Variant::Baseline)])
        .collect();
    let rows: Vec<Result<ConvergenceRow>> = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let task = SyntheticTask::new(task_cfg.clone(), seed)?;
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let model = match variant {
                Variant::Cmpe => &on,
                Variant::Baseline => &off,
            };
            let run = train_run(model, &task, &cfg)?;
            let tau = TAU_FRACTION * run.trace[0].loss_final;
            let iters_to_tau = run.trace.iter().position(|r| r.loss_final < tau);
            Ok(ConvergenceRow {
                variant,
                seed,
                iters_to_tau,
                tau,
                first_prompt_grad_norm: run.first_prompt_grad_norm,
            })
        })
        .collect();
    Ok(ConvergenceReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}
