//! Plain-text run configuration.
//!
//! ```text
//! # desk run
//! [model]
//! layers = 6
//! selected = 2, 3, 4, 6
//!
//! [train]
//! total_iters = 300
//! ```
//!
//! Sections are `[model]`, `[task]` and `[train]`; `#` starts a comment.
//! Keys left out keep their defaults.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{Condition, TaskConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale preset: 6 encoder layers, 16×16 maps, 6 seen and 3 unseen
    /// classes, 300 iterations.
    pub fn desk() -> Self {
        let task = TaskConfig::default();
        let model = ModelConfig {
            layers: task.layers,
            d: task.d,
            d_depth: task.d_depth,
            num_prompts: 4,
            decoder_layers: 2,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            lr0: DESK_LR,
            ..TrainConfig::default()
        };
        Self { model, task, train }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if (self.model.layers, self.model.d, self.model.d_depth) != (self.task.layers, self.task.d, self.task.d_depth) {
            return Err(Error::Config(format!(
                "model (layers {}, d {}, d_depth {}) and task (layers {}, d {}, d_depth {}) disagree",
                self.model.layers, self.model.d, self.model.d_depth, self.task.layers, self.task.d, self.task.d_depth
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "task", "train"].contains(&name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = Ctx { key, line: line_no, value };
            match section.as_str() {
                "model" => cfg.set_model(&ctx)?,
                "task" => cfg.set_task(&ctx)?,
                "train" => cfg.set_train(&ctx)?,
                _ => return Err(Error::Config(format!("line {line_no}: key '{key}' outside any section"))),
            }
        }
        // The task's feature geometry follows the model unless set explicitly.
        cfg.task.layers = cfg.model.layers;
        cfg.task.d = cfg.model.d;
        cfg.task.d_depth = cfg.model.d_depth;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Serializes every key, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.task;
        let r = &self.train;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let conds = t.conditions.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ");
        let mut out = String::from("[model]\n");
        out += &format!("layers = {}\nd = {}\nd_depth = {}\nnum_prompts = {}\n", m.layers, m.d, m.d_depth, m.num_prompts);
        out += &format!("selected = {}\n", list(&m.selected_layers()));
        out += &format!("decoder_layers = {}\n", m.decoder_layers);
        out += &format!(
            "prompt_chain = {}\n",
            match m.prompt_chain {
                crate::geotext::PromptChain::Independent => "independent",
                crate::geotext::PromptChain::Residual => "residual",
            }
        );
        out += &format!(
            "cmpe = {}\n",
            match m.cmpe {
                crate::model::CmpeMode::Enabled => "enabled",
                crate::model::CmpeMode::Detached => "detached",
                crate::model::CmpeMode::Absent => "absent",
            }
        );
        if let Some(temp) = m.temperature {
            out += &format!("temperature = {temp}\n");
        }
        out += "\n[task]\n";
        out += &format!(
            "num_seen = {}\nnum_unseen = {}\nheight = {}\nwidth = {}\ntrain_images = {}\neval_images = {}\noffset = {}\nconditions = {}\n",
            t.num_seen, t.num_unseen, t.height, t.width, t.train_images, t.eval_images, t.offset, conds
        );
        out += "\n[train]\n";
        out += &format!(
            "lr0 = {}\nweight_decay = {}\neps = {}\nbeta1 = {}\nbeta2 = {}\ntotal_iters = {}\npoly_power = {}\nseed = {}\nlambda_c = {}\nbatch_size = {}\n",
            r.lr0, r.weight_decay, r.eps, r.betas.0, r.betas.1, r.total_iters, r.poly_power, r.seed, r.lambda_c, r.batch_size
        );
        out
    }

    fn set_model(&mut self, c: &Ctx) -> Result<()> {
        let m = &mut self.model;
        match c.key {
            "layers" => m.layers = c.parse()?,
            "d" => m.d = c.parse()?,
            "d_depth" => m.d_depth = c.parse()?,
            "num_prompts" => m.num_prompts = c.parse()?,
            "selected" => m.selected = c.list()?,
            "decoder_layers" => m.decoder_layers = c.parse()?,
            "prompt_chain" => m.prompt_chain = c.parse()?,
            "cmpe" => m.cmpe = c.parse()?,
            "temperature" => m.temperature = Some(c.parse()?),
            _ => return Err(c.unknown("model")),
        }
        Ok(())
    }

    fn set_task(&mut self, c: &Ctx) -> Result<()> {
        let t = &mut self.task;
        match c.key {
            "num_seen" => t.num_seen = c.parse()?,
            "num_unseen" => t.num_unseen = c.parse()?,
            "height" => t.height = c.parse()?,
            "width" => t.width = c.parse()?,
            "train_images" => t.train_images = c.parse()?,
            "eval_images" => t.eval_images = c.parse()?,
            "offset" => t.offset = c.parse()?,
            "conditions" => t.conditions = c.list::<Condition>()?,
            _ => return Err(c.unknown("task")),
        }
        Ok(())
    }

    fn set_train(&mut self, c: &Ctx) -> Result<()> {
        let r = &mut self.train;
        match c.key {
            "lr0" => r.lr0 = c.parse()?,
            "weight_decay" => r.weight_decay = c.parse()?,
            "eps" => r.eps = c.parse()?,
            "beta1" => r.betas.0 = c.parse()?,
            "beta2" => r.betas.1 = c.parse()?,
            "total_iters" => r.total_iters = c.parse()?,
            "poly_power" => r.poly_power = c.parse()?,
            "seed" => r.seed = c.parse()?,
            "lambda_c" => r.lambda_c = c.parse()?,
            "batch_size" => r.batch_size = c.parse()?,
            _ => return Err(c.unknown("train")),
        }
        Ok(())
    }
}

/// Learning rate of the desk preset. Runs of 300 steps at the full-scale
/// rate of 1e-4 barely move the parameters.
pub const DESK_LR: f64 = 2e-3;

struct Ctx<'a> {
    key: &'a str,
    line: usize,
    value: &'a str,
}

impl Ctx<'_> {
    fn parse<T: std::str::FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| Error::Config(format!("line {}: invalid value {:?} for key '{}'", self.line, self.value, self.key)))
    }

    fn list<T: std::str::FromStr>(&self) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("line {}: invalid item {s:?} for key '{}'", self.line, self.key)))
            })
            .collect()
    }

    fn unknown(&self, section: &str) -> Error {
        Error::Config(format!("line {}: unknown key '{}' in [{section}]", self.line, self.key))
    }
}
