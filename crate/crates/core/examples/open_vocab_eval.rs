//! Trains on seen classes only, then evaluates with the seen label set and
//! with unseen labels appended to the text bank.

use vireo::config::RunConfig;
use vireo::features::TextBank;
use vireo::model::Model;
use vireo::train::{evaluate, train_run, SyntheticTask};
use vireo::{Result, Tensor};

fn main() -> Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.train.total_iters = 80;
    let task = SyntheticTask::new(cfg.task.clone(), cfg.train.seed)?;
    let model = Model::new(cfg.model.clone())?;
    let run = train_run(&model, &task, &cfg.train)?;

    let all = task.eval_bank();
    let seen = task.cfg.num_seen;
    let d = all.d();
    let seen_bank = TextBank::new(
        all.classes()[..seen].to_vec(),
        Tensor::from_vec(vec![seen, d], all.embeddings().data()[..seen * d].to_vec())?,
    )?;
    println!("trained on {:?}", task.train_bank().classes());
    println!("unseen at test time: {:?}", &all.classes()[seen..]);

    println!("\nseen labels only:");
    print!("{}", evaluate(&model, &run.params, &task, &seen_bank)?.report.to_text());
    println!("\nseen + unseen labels:");
    print!("{}", evaluate(&model, &run.params, &task, all)?.report.to_text());
    Ok(())
}
