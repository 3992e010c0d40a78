//! The `vireo` command line.
//!
//! Exit codes: `0` success, `1` a check or assertion failed, `2` usage or
//! configuration error. Every command that writes files writes them under
//! `--out` only.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{load_feature_file, Loaded, TextBank};
use crate::gradsuite;
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::pgm;
use crate::tensor::Graph;
use crate::train::{convergence_experiment, evaluate, train_run, SyntheticTask};
use crate::vfea::{Entry, Kind, VfeaFile};

pub const SEED_ENV: &str = "VIREO_SEED";

#[derive(Parser, Debug)]
#[command(name = "vireo", version, about = "Open-vocabulary segmentation over frozen features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic task's feature stacks, label maps and text bank.
    SynthFeatures(SynthArgs),
    /// Train on the synthetic task; writes checkpoint, loss trace and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint per condition and seen/unseen split.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and composite path.
    Gradcheck(GradcheckArgs),
    /// Iterations-to-threshold with and without the coarse prior.
    Convergence(ConvergenceArgs),
    /// Validate VFEA files and print their entries.
    InspectVfea(InspectArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`key = value` with [model]/[task]/[train]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed and VIREO_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Unseen classes appended to the text bank (default: all of the task's).
    #[arg(long, conflicts_with = "textbank")]
    unseen: Option<usize>,
    /// Text bank file (kind 1) to use instead of the task's labels.
    #[arg(long)]
    textbank: Option<PathBuf>,
    /// Also write coarse maps and spatial weights as VFEA.
    #[arg(long)]
    dump_attn: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Also run a fixture with a deliberately wrong backward pass.
    #[arg(long, hide = true)]
    corrupt_fixture: bool,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds (at least 5).
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

/// Failure categories mapped to exit codes.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io { .. } | Error::Version(_) | Error::Dimension(_) => Failure::Usage(e.to_string()),
            Error::Numeric(_)
            | Error::Contract(_)
            | Error::Validation(_)
            | Error::Format(_)
            | Error::Length(_) => Failure::Check(e.to_string()),
        }
    }
}

/// Entry point of the binary.
pub fn run() -> ExitCode {
    ExitCode::from(run_with(std::env::args_os()) as u8)
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            1
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            2
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::SynthFeatures(a) => Ok(synth_features(&a)?),
        Command::Train(a) => Ok(train(&a)?),
        Command::Eval(a) => Ok(eval(&a)?),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Convergence(a) => Ok(convergence(&a)?),
        Command::InspectVfea(a) => inspect(&a),
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = common.seed.or(env_seed) {
        cfg.train.seed = seed;
    }
    let seed = cfg.train.seed;
    Ok((cfg, seed))
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_id() -> String {
    match option_env!("VIREO_BUILD_ID") {
        Some(id) => id.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// `manifest.txt`: enough to rerun the command.
fn write_manifest(command: &str, common: &Common, seed: u64) -> Result<()> {
    let config = common
        .config
        .as_ref()
        .map_or_else(|| "(desk preset)".to_string(), |p| p.display().to_string());
    let text = format!(
        "command = {command}\nconfig = {config}\nseed = {seed}\nout = {}\nbuild = {}\n",
        common.out.display(),
        build_id()
    );
    write_text(&common.out.join("manifest.txt"), &text)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
        None => f(),
    }
}

fn synth_features(a: &SynthArgs) -> Result<()> {
    let (cfg, seed) = resolve(&a.common)?;
    let task = SyntheticTask::new(cfg.task.clone(), seed)?;
    let out = &a.common.out;
    let feat_dir = out.join("features");
    create_out(&feat_dir)?;
    for s in &task.train {
        s.stack.save(&feat_dir.join(format!("{}.vfea", s.stack.image_id)))?;
        pgm::write(&feat_dir.join(format!("{}.pgm", s.stack.image_id)), &s.labels)?;
    }
    task.eval_bank().save(&out.join("textbank.vfea"))?;
    write_text(&out.join("config.cfg"), &cfg.to_text())?;
    write_manifest("synth-features", &a.common, seed)?;
    println!(
        "wrote {} feature stacks and a {}-class text bank to {}",
        task.train.len(),
        task.eval_bank().len(),
        out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, seed) = resolve(&a.common)?;
    let out = &a.common.out;
    create_out(out)?;
    let task = SyntheticTask::new(cfg.task.clone(), seed)?;
    let model = Model::new(cfg.model.clone())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let run = train_run(&model, &task, &train_cfg)?;
    write_text(&out.join("loss.csv"), &run.trace_csv())?;
    save_checkpoint(&run.params, &out.join("checkpoint.vfea"))?;
    write_text(&out.join("config.cfg"), &cfg.to_text())?;
    write_manifest("train", &a.common, seed)?;
    println!(
        "trained {} iterations: loss {:.4} -> {:.4}; frozen providers verified",
        run.trace.len(),
        run.initial_loss(),
        run.final_loss()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (cfg, seed) = resolve(&a.common)?;
    let out = &a.common.out;
    let task = SyntheticTask::new(cfg.task.clone(), seed)?;
    let model = Model::new(cfg.model.clone())?;
    let params = load_checkpoint(&model, &a.checkpoint)?;
    let bank = match (&a.textbank, a.unseen) {
        (Some(path), _) => match load_feature_file(path)? {
            Loaded::Text(b) => b,
            _ => return Err(Error::Config(format!("{} is not a text bank file", path.display()))),
        },
        (None, unseen) => {
            let n = unseen.unwrap_or(task.cfg.num_unseen);
            if n > task.cfg.num_unseen {
                return Err(Error::Config(format!(
                    "--unseen {n} exceeds the task's {} unseen classes",
                    task.cfg.num_unseen
                )));
            }
            let k = task.cfg.num_seen + n;
            let all = task.eval_bank();
            TextBank::new(all.classes()[..k].to_vec(), slice_rows(all, k)?)?
        }
    };
    create_out(out)?;
    let result = with_jobs(a.jobs, || evaluate(&model, &params, &task, &bank))?;
    write_text(&out.join("report.csv"), &result.report.to_csv())?;
    write_text(&out.join("report.txt"), &result.report.to_text())?;
    let pred_dir = out.join("predictions");
    create_out(&pred_dir)?;
    for (cond, id, map) in &result.predictions {
        pgm::write(&pred_dir.join(format!("{cond}-{id}.pgm")), map)?;
    }
    if a.dump_attn {
        dump_attention(&model, &params, &task, &bank, &out.join("attn"))?;
    }
    write_manifest("eval", &a.common, seed)?;
    print!("{}", result.report.to_text());
    Ok(())
}

fn slice_rows(bank: &TextBank, k: usize) -> Result<crate::tensor::Tensor> {
    let d = bank.d();
    crate::tensor::Tensor::from_vec(vec![k, d], bank.embeddings().data()[..k * d].to_vec())
}

/// One file per evaluation image: `coarse_map` and `alpha`, both `[K, H, W]`.
fn dump_attention(model: &Model, params: &crate::params::ParamStore, task: &SyntheticTask, bank: &TextBank, dir: &Path) -> Result<()> {
    create_out(dir)?;
    for (cond, samples) in &task.eval {
        for s in samples {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let fwd = model.forward(&mut g, &p, &s.stack, bank)?;
            let prior = fwd
                .prior
                .as_ref()
                .ok_or_else(|| Error::Config("--dump-attn needs a model with the coarse prior".into()))?;
            let mut f = VfeaFile::new(Kind::Parameters);
            for (i, (name, v)) in [("coarse_map", prior.coarse_map), ("alpha", prior.alpha)].into_iter().enumerate() {
                let t = g.value(v);
                f.entries.push(Entry::named(
                    i as u32,
                    name,
                    t.shape().to_vec(),
                    t.data().iter().map(|&x| x as f32).collect(),
                ));
            }
            f.write(&dir.join(format!("{cond}-{}.vfea", s.stack.image_id)))?;
        }
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> std::result::Result<(), Failure> {
    let mut report = gradsuite::run_suite()?;
    if a.corrupt_fixture {
        report.items.push(gradsuite::corrupted_fixture()?);
    }
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.items.iter().filter(|i| !i.passed()).map(|i| i.name).collect();
        Err(Failure::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn convergence(a: &ConvergenceArgs) -> Result<()> {
    let (cfg, seed) = resolve(&a.common)?;
    let out = &a.common.out;
    create_out(out)?;
    let report = with_jobs(a.jobs, || convergence_experiment(&cfg.model, &cfg.task, &cfg.train, &a.seeds))?;
    write_text(&out.join("convergence.csv"), &report.to_csv())?;
    write_text(&out.join("summary.txt"), &(report.summary() + "\n"))?;
    write_text(&out.join("config.cfg"), &cfg.to_text())?;
    write_manifest("convergence", &a.common, seed)?;
    print!("{}", report.to_csv());
    println!("{}", report.summary());
    Ok(())
}

fn inspect(a: &InspectArgs) -> std::result::Result<(), Failure> {
    let mut bad = 0;
    for path in &a.files {
        match inspect_one(path) {
            Ok(text) => print!("{text}"),
            Err(e) => {
                if matches!(e, Error::Io { .. }) {
                    return Err(e.into());
                }
                println!("{}: INVALID: {}", path.display(), one_line(&e.to_string()));
                bad += 1;
            }
        }
    }
    if bad > 0 {
        Err(Failure::Check(format!("{bad} of {} files failed validation", a.files.len())))
    } else {
        Ok(())
    }
}

fn inspect_one(path: &Path) -> Result<String> {
    let f = VfeaFile::read(path)?;
    let mut out = format!("{}: ok\n{}", path.display(), f.summary());
    match load_feature_file(path)? {
        Loaded::Stack(s) => {
            let _ = writeln!(out, "feature stack: {} layers, d={}, d_depth={}", s.num_layers(), s.d(), s.d_depth());
        }
        Loaded::Text(b) => {
            let worst = (0..b.len())
                .map(|k| (b.row(k).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
                .fold(0.0, f64::max);
            let _ = writeln!(out, "text bank: K={}, d={}, max |norm-1| = {worst:.2e}", b.len(), b.d());
        }
        Loaded::Tensors(_) => {}
    }
    Ok(out)
}
