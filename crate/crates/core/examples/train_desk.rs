//! Trains the desk preset for a short run and evaluates it.

use vireo::config::RunConfig;
use vireo::model::Model;
use vireo::train::{evaluate, train_run, SyntheticTask};
use vireo::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.train.total_iters = 60;
    let task = SyntheticTask::new(cfg.task.clone(), cfg.train.seed)?;
    let model = Model::new(cfg.model.clone())?;
    let run = train_run(&model, &task, &cfg.train)?;
    for r in run.trace.iter().step_by(10) {
        let coarse = r.loss_coarse.map_or("n/a".to_string(), |c| format!("{c:.4}"));
        println!("iter {:>3}  lr {:.2e}  total {:.4}  coarse {coarse}  final {:.4}", r.iter, r.lr, r.loss_total, r.loss_final);
    }
    task.verify_frozen()?;
    let out = evaluate(&model, &run.params, &task, task.eval_bank())?;
    print!("{}", out.report.to_text());
    Ok(())
}
