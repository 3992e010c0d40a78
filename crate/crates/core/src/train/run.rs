//! Training loop and evaluation driver.

use rayon::prelude::*;

use super::{AdamW, Condition, Sample, SyntheticTask, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{ClassMap, ConfusionMatrix, Report, IGNORE_ID};
use crate::features::TextBank;
use crate::head::argmax_classes;
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Gradients, Graph};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_coarse: Option<f64>,
    pub loss_final: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub trace: Vec<TraceRow>,
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// L2 norm of the gradient reaching the prompt-layer parameters at the
    /// first step.
    pub first_prompt_grad_norm: f64,
}

impl RunOutput {
    /// `iter,loss_total,loss_coarse,loss_final,lr`, one row per iteration.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,loss_total,loss_coarse,loss_final,lr\n");
        for r in &self.trace {
            let coarse = r.loss_coarse.map_or_else(|| "n/a".to_string(), |v| v.to_string());
            out.push_str(&format!("{},{},{},{},{}\n", r.iter, r.loss_total, coarse, r.loss_final, r.lr));
        }
        out
    }

    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |r| r.loss_total)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss_total)
    }
}

struct StepResult {
    bound: Bound,
    grads: Gradients,
    total: f64,
    coarse: Option<f64>,
    final_: f64,
}

fn image_step(model: &Model, params: &ParamStore, sample: &Sample, bank: &TextBank, lambda_c: f64, weight: f64, iter: usize) -> Result<StepResult> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let fwd = model.forward(&mut g, &p, &sample.stack, bank)?;
    let terms = model.loss(&mut g, &fwd, &sample.labels, lambda_c)?;
    let total = g.value(terms.total).data()[0];
    if !total.is_finite() {
        let origin = match g.first_non_finite() {
            Some((node, op)) => format!("first non-finite value produced by node {node} ({op})"),
            None => "no non-finite intermediate found".to_string(),
        };
        return Err(Error::Numeric(format!(
            "iteration {iter}, image {}: loss is {total}; {origin}",
            sample.stack.image_id
        )));
    }
    let coarse = terms.coarse.map(|c| g.value(c).data()[0]);
    let final_ = g.value(terms.final_).data()[0];
    let scaled = g.scale(terms.total, weight);
    let grads = g.backward(scaled)?;
    Ok(StepResult {
        bound: p,
        grads,
        total,
        coarse,
        final_,
    })
}

/// Trains fresh parameters initialized from `cfg.seed`.
pub fn train_run(model: &Model, task: &SyntheticTask, cfg: &TrainConfig) -> Result<RunOutput> {
    train_from(model, model.init_params(cfg.seed), task, cfg)
}

/// Trains `params` on the task's training images with the seen-class bank.
/// Images are drawn round-robin, `batch_size` per step, and the loss is the
/// batch mean. The frozen-provider check runs after the last step.
pub fn train_from(model: &Model, mut params: ParamStore, task: &SyntheticTask, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut opt = AdamW::new(&params, cfg.adamw())?;
    let bank = task.train_bank();
    let n = task.train.len();
    let weight = 1.0 / cfg.batch_size as f64;
    let mut trace = Vec::with_capacity(cfg.total_iters);
    let mut first_prompt_grad_norm = 0.0;

    for t in 0..cfg.total_iters {
        let batch: Vec<&Sample> = (0..cfg.batch_size).map(|b| &task.train[(t * cfg.batch_size + b) % n]).collect();
        let results: Vec<Result<StepResult>> = batch
            .par_iter()
            .map(|s| image_step(model, &params, s, bank, cfg.lambda_c, weight, t))
            .collect();
        params.zero_grad();
        let mut row = TraceRow {
            iter: t,
            loss_total: 0.0,
            loss_coarse: None,
            loss_final: 0.0,
            lr: cfg.lr(t),
        };
        for r in results {
            let r = r?;
            params.accumulate(&r.bound, &r.grads)?;
            row.loss_total += r.total * weight;
            row.loss_final += r.final_ * weight;
            if let Some(c) = r.coarse {
                row.loss_coarse = Some(row.loss_coarse.unwrap_or(0.0) + c * weight);
            }
        }
        if t == 0 {
            first_prompt_grad_norm = params.grad_norm("geotext.");
        }
        opt.step(&mut params, row.lr)?;
        trace.push(row);
    }

    task.verify_frozen()?;
    for name in opt.tracked() {
        if !params.contains(name) {
            return Err(Error::Contract(format!("optimizer tracks '{name}', which is not a parameter")));
        }
    }
    Ok(RunOutput {
        trace,
        params,
        optimizer: opt,
        first_prompt_grad_norm,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: Report,
    pub matrices: Vec<(Condition, ConfusionMatrix)>,
    /// `(condition, image id, predicted map)` in task order.
    pub predictions: Vec<(Condition, String, ClassMap)>,
}

/// Predicts every evaluation image with `bank` and accumulates per-condition
/// confusion matrices. Ground-truth classes are matched to bank rows by
/// label; classes missing from the bank are ignored. Images run in
/// parallel; matrices merge in task order.
pub fn evaluate(model: &Model, params: &ParamStore, task: &SyntheticTask, bank: &TextBank) -> Result<EvalOutput> {
    let k = bank.len();
    let names = task.eval_bank().classes();
    let remap: Vec<u32> = names
        .iter()
        .map(|n| bank.index_of(n).map_or(IGNORE_ID, |i| i as u32))
        .collect();
    let to_bank = |ids: Vec<usize>| -> Vec<usize> {
        ids.into_iter()
            .filter_map(|c| bank.index_of(&names[c]))
            .collect()
    };
    let seen = to_bank(task.seen_ids());
    let unseen = to_bank(task.unseen_ids());
    let mut report = Report::default();
    let mut matrices = Vec::new();
    let mut predictions = Vec::new();
    for (cond, samples) in &task.eval {
        let preds: Vec<Result<ClassMap>> = samples
            .par_iter()
            .map(|s| argmax_classes(&model.predict(params, &s.stack, bank)?))
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        for (s, pred) in samples.iter().zip(preds) {
            let pred = pred?;
            let truth = ClassMap {
                height: s.labels.height,
                width: s.labels.width,
                data: s.labels.data.iter().map(|&c| remap[c as usize]).collect(),
            };
            let mut one = ConfusionMatrix::new(k);
            one.update(&pred, &truth)?;
            cm.merge(&one)?;
            predictions.push((*cond, s.stack.image_id.clone(), pred));
        }
        report.push(cond.name(), &cm, &seen, &unseen);
        matrices.push((*cond, cm));
    }
    Ok(EvalOutput {
        report,
        matrices,
        predictions,
    })
}
