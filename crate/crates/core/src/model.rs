//! The full pipeline wired together: prompt stack → coarse prior → head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cmpe::{self, Cmpe, CmpeConfig, CoarsePrior};
use crate::error::{Error, Result};
use crate::eval::ClassMap;
use crate::features::{FeatureStack, TextBank};
use crate::geotext::{default_layers, GeoText, GeoTextConfig, PromptChain, StackOutput, DEFAULT_PROMPTS};
use crate::head::{self, Head, HeadConfig, SegPrediction, DEFAULT_DECODER_LAYERS};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::vfea::{Entry, Kind, VfeaFile};

/// How the coarse prior takes part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CmpeMode {
    /// Priors feed the head queries and the coarse loss reaches the prompts.
    #[default]
    Enabled,
    /// Computed on detached features; nothing flows back into the rest of
    /// the model and the head sees no priors.
    Detached,
    /// Not built at all.
    Absent,
}

impl std::str::FromStr for CmpeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enabled" | "on" => Ok(CmpeMode::Enabled),
            "detached" => Ok(CmpeMode::Detached),
            "absent" | "off" => Ok(CmpeMode::Absent),
            other => Err(Error::Config(format!("cmpe mode '{other}' (expected enabled|detached|absent)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder depth `L`.
    pub layers: usize,
    pub d: usize,
    pub d_depth: usize,
    pub num_prompts: usize,
    /// Empty means the proportional default for `layers`.
    pub selected: Vec<usize>,
    pub decoder_layers: usize,
    pub prompt_chain: PromptChain,
    pub cmpe: CmpeMode,
    /// `None` means `sqrt(d)`.
    pub temperature: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 24,
            d: 32,
            d_depth: 16,
            num_prompts: DEFAULT_PROMPTS,
            selected: Vec::new(),
            decoder_layers: DEFAULT_DECODER_LAYERS,
            prompt_chain: PromptChain::Residual,
            cmpe: CmpeMode::Enabled,
            temperature: None,
        }
    }
}

impl ModelConfig {
    pub fn selected_layers(&self) -> Vec<usize> {
        if self.selected.is_empty() {
            default_layers(self.layers)
        } else {
            self.selected.clone()
        }
    }

    pub fn geotext(&self) -> GeoTextConfig {
        GeoTextConfig {
            num_prompts: self.num_prompts,
            d: self.d,
            d_depth: self.d_depth,
            layers: self.selected_layers(),
            chain: self.prompt_chain,
        }
    }

    pub fn cmpe_config(&self) -> CmpeConfig {
        CmpeConfig {
            d: self.d,
            num_queries: self.num_prompts,
            num_scales: self.selected_layers().len(),
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            decoder_layers: self.decoder_layers,
            d: self.d,
            num_scales: self.selected_layers().len(),
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geotext().validate(self.layers)?;
        self.head().validate()
    }
}

/// Graph handles of one full forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub stack: StackOutput,
    pub prior: Option<CoarsePrior>,
    pub head: SegPrediction,
    pub text: Var,
}

impl Forward {
    pub fn logits(&self) -> Var {
        self.head.logits
    }
}

/// Per-image loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub coarse: Option<Var>,
    pub final_: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub geotext: GeoText,
    pub cmpe: Cmpe,
    pub head: Head,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            geotext: GeoText::new(cfg.geotext()),
            cmpe: Cmpe::new(cfg.cmpe_config()),
            head: Head::new(cfg.head()),
            cfg,
        })
    }

    /// Fresh parameters. Each module draws from its own stream, so the
    /// prompt and head weights do not depend on whether the prior exists.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        self.geotext.register(&mut store, &mut stream(1));
        if self.cfg.cmpe != CmpeMode::Absent {
            self.cmpe.register(&mut store, &mut stream(2));
        }
        self.head.register(&mut store, &mut stream(3));
        store
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, stack: &FeatureStack, text: &TextBank) -> Result<Forward> {
        if text.d() != self.cfg.d {
            return Err(Error::dim(format!("text width {} vs model width {}", text.d(), self.cfg.d)));
        }
        let text = g.constant(text.embeddings().clone());
        let stack_out = self.geotext.run_encoder_stack(g, p, stack, text)?;
        let refined: Vec<Var> = stack_out.refined.iter().map(|&(_, v)| v).collect();
        let shallow = refined[0];
        let (out_h, out_w) = (g.shape(shallow)[0], g.shape(shallow)[1]);

        let (prior, queries) = match self.cfg.cmpe {
            CmpeMode::Absent => (None, stack_out.final_prompt),
            CmpeMode::Enabled => {
                let prior = self.cmpe.forward(g, p, &refined, out_h, out_w, text)?;
                let q = g.add(stack_out.final_prompt, prior.query_priors)?;
                (Some(prior), q)
            }
            CmpeMode::Detached => {
                let cut: Vec<Var> = refined.iter().map(|&v| g.detach(v)).collect();
                let prior = self.cmpe.forward(g, p, &cut, out_h, out_w, text)?;
                (Some(prior), stack_out.final_prompt)
            }
        };
        let head = self.head.forward(g, p, &refined, queries, text)?;
        Ok(Forward {
            stack: stack_out,
            prior,
            head,
            text,
        })
    }

    /// `λ_c · coarse + final`, both mean per-pixel cross-entropies.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, labels: &ClassMap, lambda_c: f64) -> Result<LossTerms> {
        let final_ = head::segmentation_loss(g, fwd.head.logits, labels)?;
        let coarse = match &fwd.prior {
            Some(prior) => Some(cmpe::coarse_loss(g, prior.coarse_map, labels)?),
            None => None,
        };
        let total = match coarse {
            Some(c) => {
                let weighted = g.scale(c, lambda_c);
                g.add(weighted, final_)?
            }
            None => final_,
        };
        Ok(LossTerms { total, coarse, final_ })
    }

    /// Logits `[H, W, K]` for one image; `K` is the text bank size.
    pub fn predict(&self, params: &ParamStore, stack: &FeatureStack, text: &TextBank) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let fwd = self.forward(&mut g, &p, stack, text)?;
        Ok(g.value(fwd.head.logits).clone())
    }
}

/// Writes every parameter as a named f32 entry.
pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    checkpoint_file(params).write(path)
}

pub fn checkpoint_file(params: &ParamStore) -> VfeaFile {
    let mut f = VfeaFile::new(Kind::Parameters);
    for (i, (name, t)) in params.iter().enumerate() {
        f.entries.push(Entry::named(
            i as u32,
            name.clone(),
            t.shape().to_vec(),
            t.data().iter().map(|&x| x as f32).collect(),
        ));
    }
    f
}

/// Loads a checkpoint into the parameter layout of `model`. A width that
/// disagrees with the model configuration is a version error.
pub fn load_checkpoint(model: &Model, path: &Path) -> Result<ParamStore> {
    let f = VfeaFile::read(path)?;
    params_from_checkpoint(model, &f)
}

pub fn params_from_checkpoint(model: &Model, f: &VfeaFile) -> Result<ParamStore> {
    if f.kind != Kind::Parameters {
        return Err(Error::Format(format!("expected a parameter file, found kind {}", f.kind)));
    }
    let mut store = model.init_params(0);
    let mut seen = 0;
    for e in &f.entries {
        let name = e
            .name
            .as_deref()
            .ok_or_else(|| Error::Format(format!("parameter entry {} has no name", e.id)))?;
        let slot = store
            .get_mut(name)
            .ok_or_else(|| Error::Version(format!("checkpoint parameter '{name}' is not part of this model")))?;
        if slot.shape() != e.shape.as_slice() {
            return Err(Error::Version(format!(
                "checkpoint parameter '{name}' has shape {:?}, model expects {:?} (width d={})",
                e.shape,
                slot.shape(),
                model.cfg.d
            )));
        }
        slot.data_mut()
            .iter_mut()
            .zip(&e.data)
            .for_each(|(dst, &src)| *dst = src as f64);
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Version(format!(
            "checkpoint holds {seen} of the model's {} parameters",
            store.len()
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_features, synth_text_bank, SynthConfig};

    fn tiny() -> (Model, FeatureStack, TextBank) {
        let cfg = ModelConfig {
            layers: 3,
            d: 8,
            d_depth: 4,
            num_prompts: 2,
            selected: vec![2, 3],
            decoder_layers: 1,
            ..ModelConfig::default()
        };
        let stack = synth_features(
            "img",
            &SynthConfig {
                layers: 3,
                height: 3,
                width: 3,
                d: 8,
                d_depth: 4,
            },
            1,
        )
        .unwrap();
        let classes: Vec<String> = ["road", "car", "sky"].iter().map(|s| s.to_string()).collect();
        let text = synth_text_bank(&classes, 1, 8).unwrap();
        (Model::new(cfg).unwrap(), stack, text)
    }

    #[test]
    fn logits_follow_text_bank_size() {
        let (model, stack, text) = tiny();
        let params = model.init_params(3);
        let logits = model.predict(&params, &stack, &text).unwrap();
        assert_eq!(logits.shape(), &[3, 3, 3]);
        let more = synth_text_bank(
            &["road", "car", "sky", "bus", "tree"].map(String::from),
            1,
            8,
        )
        .unwrap();
        assert_eq!(model.predict(&params, &stack, &more).unwrap().shape(), &[3, 3, 5]);
    }

    #[test]
    fn module_streams_are_independent() {
        let (model, ..) = tiny();
        let without = Model::new(ModelConfig {
            cmpe: CmpeMode::Absent,
            ..model.cfg.clone()
        })
        .unwrap();
        let a = model.init_params(9);
        let b = without.init_params(9);
        for (name, t) in b.iter() {
            assert_eq!(a.get(name).unwrap().data(), t.data(), "{name}");
        }
        assert!(a.len() > b.len());
    }

    #[test]
    fn checkpoint_width_mismatch_is_version_error() {
        let (model, ..) = tiny();
        let f = checkpoint_file(&model.init_params(0));
        let wider = Model::new(ModelConfig { d: 12, ..model.cfg.clone() }).unwrap();
        assert!(matches!(params_from_checkpoint(&wider, &f), Err(Error::Version(_))));
        let back = params_from_checkpoint(&model, &f).unwrap();
        assert_eq!(back.len(), model.init_params(0).len());
    }

    fn prompt_grads(model: &Model, params: &ParamStore, stack: &FeatureStack, text: &TextBank, lambda: f64) -> Vec<(String, Vec<f64>)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let labels = ClassMap::new(3, 3, vec![0, 1, 2, 2, 1, 0, 255, 1, 1]).unwrap();
        let fwd = model.forward(&mut g, &p, stack, text).unwrap();
        let loss = model.loss(&mut g, &fwd, &labels, lambda).unwrap();
        let grads = g.backward(loss.total).unwrap();
        p.iter()
            .filter(|(n, _)| n.starts_with("geotext."))
            .map(|(n, &v)| (n.clone(), grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()))
            .collect()
    }

    #[test]
    fn detached_prior_leaves_prompt_gradients_alone() {
        let (model, stack, text) = tiny();
        let absent = Model::new(ModelConfig { cmpe: CmpeMode::Absent, ..model.cfg.clone() }).unwrap();
        let detached = Model::new(ModelConfig { cmpe: CmpeMode::Detached, ..model.cfg.clone() }).unwrap();
        let full = detached.init_params(5);
        let mut lean = ParamStore::new();
        for (n, t) in full.iter().filter(|(n, _)| !n.starts_with("cmpe.")) {
            lean.insert(n.clone(), t.clone());
        }
        assert_eq!(
            prompt_grads(&detached, &full, &stack, &text, 0.4),
            prompt_grads(&absent, &lean, &stack, &text, 0.0)
        );
        let on = prompt_grads(&model, &full, &stack, &text, 0.4);
        assert_ne!(on, prompt_grads(&absent, &lean, &stack, &text, 0.0));
    }

    #[test]
    fn loss_terms_combine() {
        let (model, stack, text) = tiny();
        let params = model.init_params(2);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let labels = ClassMap::filled(3, 3, 1);
        let fwd = model.forward(&mut g, &p, &stack, &text).unwrap();
        let terms = model.loss(&mut g, &fwd, &labels, 0.4).unwrap();
        let v = |x: Var| g.value(x).data()[0];
        let want = 0.4 * v(terms.coarse.unwrap()) + v(terms.final_);
        assert!((v(terms.total) - want).abs() < 1e-14);
    }

    #[test]
    fn checkpoint_names_must_match() {
        let (model, ..) = tiny();
        let mut f = checkpoint_file(&model.init_params(0));
        f.entries[0].name = Some("not.a.parameter".into());
        assert!(matches!(params_from_checkpoint(&model, &f), Err(Error::Version(_))));
        let mut short = checkpoint_file(&model.init_params(0));
        short.entries.pop();
        assert!(matches!(params_from_checkpoint(&model, &short), Err(Error::Version(_))));
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("on".parse::<CmpeMode>().unwrap(), CmpeMode::Enabled);
        assert_eq!("detached".parse::<CmpeMode>().unwrap(), CmpeMode::Detached);
        assert_eq!("off".parse::<CmpeMode>().unwrap(), CmpeMode::Absent);
        assert!("maybe".parse::<CmpeMode>().is_err());
    }
}
