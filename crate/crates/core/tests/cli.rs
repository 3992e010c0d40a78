use std::path::Path;
use std::process::{Command, Output};

use anyhow::{ensure, Context, Result};
use tempfile::TempDir;
use vireo::vfea::VfeaFile;

const SMALL: &str = "\
[model]
layers = 4
d = 8
d_depth = 4
selected = 2, 4

[task]
num_seen = 3
num_unseen = 2
height = 6
width = 6
train_images = 2
eval_images = 1
conditions = clear, fog

[train]
total_iters = 6
";

fn vireo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vireo"))
        .args(args)
        .env_remove("VIREO_SEED")
        .output()
        .expect("spawn vireo")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> Result<String> {
    let path = dir.join("small.cfg");
    std::fs::write(&path, format!("{SMALL}{extra}"))?;
    Ok(path.display().to_string())
}

fn train(dir: &Path, cfg: &str, name: &str) -> Result<std::path::PathBuf> {
    let out = dir.join(name);
    let o = vireo(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
    ensure!(o.status.success(), "train failed: {}", stderr(&o));
    Ok(out)
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = vireo(&["train", "--config", "/nonexistent/run.cfg", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_usage_error() -> Result<()> {
    let dir = TempDir::new()?;
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[train]\nseed = 1\nwarmup = 10\n")?;
    let o = vireo(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("warmup") && err.contains("line 3"), "{err}");
    Ok(())
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(vireo(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(vireo(&["--help"]).status.code(), Some(0));
}

#[test]
fn training_is_deterministic() -> Result<()> {
    let dir = TempDir::new()?;
    let cfg = small_config(dir.path(), "seed = 11\n")?;
    let a = train(dir.path(), &cfg, "a")?;
    let b = train(dir.path(), &cfg, "b")?;
    assert_eq!(std::fs::read(a.join("loss.csv"))?, std::fs::read(b.join("loss.csv"))?);
    assert_eq!(std::fs::read(a.join("checkpoint.vfea"))?, std::fs::read(b.join("checkpoint.vfea"))?);
    let manifest = std::fs::read_to_string(a.join("manifest.txt"))?;
    assert!(manifest.contains("seed = 11"), "{manifest}");
    Ok(())
}

#[test]
fn seed_flag_beats_environment() -> Result<()> {
    let dir = TempDir::new()?;
    let cfg = small_config(dir.path(), "")?;
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_vireo"))
        .args(["train", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()])
        .env("VIREO_SEED", "9")
        .output()?;
    ensure!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(out.join("manifest.txt"))?.contains("seed = 5"));
    let o = Command::new(env!("CARGO_BIN_EXE_vireo"))
        .args(["train", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("VIREO_SEED", "nine")
        .output()?;
    assert_eq!(o.status.code(), Some(2));
    Ok(())
}

fn trace_columns(dir: &Path) -> Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(dir.join("loss.csv"))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[3].to_string(), f[4].to_string())
        })
        .collect())
}

#[test]
fn detached_prior_without_weight_trains_like_no_prior() -> Result<()> {
    let dir = TempDir::new()?;
    let detached = dir.path().join("detached.cfg");
    std::fs::write(&detached, format!("{}lambda_c = 0\n", SMALL.replace("selected = 2, 4", "selected = 2, 4\ncmpe = detached")))?;
    let absent = dir.path().join("absent.cfg");
    std::fs::write(&absent, SMALL.replace("selected = 2, 4", "selected = 2, 4\ncmpe = absent"))?;
    let a = train(dir.path(), detached.to_str().unwrap(), "detached")?;
    let b = train(dir.path(), absent.to_str().unwrap(), "absent")?;
    let (ta, tb) = (trace_columns(&a)?, trace_columns(&b)?);
    assert_eq!(ta.len(), 6);
    assert_eq!(ta, tb);
    Ok(())
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let o = vireo(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("recip") && text.contains("conv2d"), "{text}");
    let o = vireo(&["gradcheck", "--corrupt-fixture"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_reports_and_dumps_attention() -> Result<()> {
    let dir = TempDir::new()?;
    let cfg = small_config(dir.path(), "")?;
    let run = train(dir.path(), &cfg, "run")?;
    let ckpt = run.join("checkpoint.vfea");

    let seen_only = dir.path().join("seen");
    let o = vireo(&[
        "eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--unseen", "0",
        "--out", seen_only.to_str().unwrap(),
    ]);
    ensure!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(seen_only.join("report.csv"))?;
    let unseen_row = csv.lines().find(|l| l.starts_with("unseen")).context("unseen row")?;
    assert_eq!(unseen_row, "unseen,n/a,n/a", "{csv}");

    let full = dir.path().join("full");
    let o = vireo(&[
        "eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--dump-attn",
        "--out", full.to_str().unwrap(),
    ]);
    ensure!(o.status.success(), "{}", stderr(&o));
    let dumps: Vec<_> = std::fs::read_dir(full.join("attn"))?.collect::<std::io::Result<_>>()?;
    assert_eq!(dumps.len(), 2);
    for d in &dumps {
        let f = VfeaFile::read(&d.path())?;
        assert_eq!(f.entries.len(), 2);
        assert_eq!(f.entries[1].shape, vec![5, 6, 6]);
        let alpha = &f.entries[1].data;
        for k in 0..5 {
            let s: f32 = alpha[k * 36..(k + 1) * 36].iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "alpha row {k} sums to {s}");
        }
    }
    assert_eq!(std::fs::read_dir(full.join("predictions"))?.count(), 2);

    let o = vireo(&[
        "eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--unseen", "3",
        "--out", full.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    Ok(())
}

#[test]
fn inspect_accepts_good_files_and_flags_bad_ones() -> Result<()> {
    let dir = TempDir::new()?;
    let cfg = small_config(dir.path(), "")?;
    let out = dir.path().join("synth");
    let o = vireo(&["synth-features", "--config", &cfg, "--out", out.to_str().unwrap()]);
    ensure!(o.status.success(), "{}", stderr(&o));
    let bank = out.join("textbank.vfea");
    let stack = std::fs::read_dir(out.join("features"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.extension().is_some_and(|e| e == "vfea"))
        .context("no feature stack written")?;

    let o = vireo(&["inspect-vfea", bank.to_str().unwrap(), stack.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("text bank: K=5, d=8"), "{text}");
    assert!(text.contains("feature stack: 4 layers, d=8, d_depth=4"), "{text}");

    let mut bytes = std::fs::read(&stack)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let broken = dir.path().join("broken.vfea");
    std::fs::write(&broken, bytes)?;
    let o = vireo(&["inspect-vfea", bank.to_str().unwrap(), broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("broken.vfea: INVALID"));

    assert_eq!(vireo(&["inspect-vfea", "/nonexistent.vfea"]).status.code(), Some(2));
    Ok(())
}
