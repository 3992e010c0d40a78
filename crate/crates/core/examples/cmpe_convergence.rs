//! Iterations to reach a loss threshold with and without the coarse prior,
//! over five seeds. Pass a smaller iteration budget as the first argument
//! for a quicker run.

use vireo::config::RunConfig;
use vireo::train::convergence_experiment;
use vireo::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::desk();
    if let Some(iters) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.train.total_iters = iters;
    }
    let report = convergence_experiment(&cfg.model, &cfg.task, &cfg.train, &[0, 1, 2, 3, 4])?;
    print!("{}", report.to_csv());
    println!("{}", report.summary());
    Ok(())
}
