//! Per-layer trainable prompts that fuse text, visual and depth cues into
//! the frozen encoder's features.
//!
//! At each selected layer the prompts first attend to the text embeddings,
//! then attend separately to the visual and (projected) depth tokens. The
//! two attended outputs are mixed by trainable scalars, projected by an MLP,
//! multiplied with the text-fused prompts and scattered back to the pixel
//! grid through the transposed visual attention, renormalized per pixel. The result is added to the
//! features; a second MLP turns the refined map into an additive input for
//! the next selected layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::nn::{self, register, Init};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Var};

/// Layer indices the prompts are attached to in a 24-layer encoder.
pub const REFERENCE_LAYERS: [usize; 4] = [8, 12, 16, 24];
pub const DEFAULT_PROMPTS: usize = 16;
pub const PROMPT_INIT_STD: f64 = 0.02;
pub const VISUAL_WEIGHT_INIT: f64 = 1.0;
pub const DEPTH_WEIGHT_INIT: f64 = 0.1;

/// `round(L·{8,12,16,24}/24)`, deduplicated, always containing `L`.
pub fn default_layers(num_layers: usize) -> Vec<usize> {
    let mut out: Vec<usize> = REFERENCE_LAYERS
        .iter()
        .map(|&l| ((num_layers * l) as f64 / 24.0).round() as usize)
        .map(|l| l.clamp(1, num_layers.max(1)))
        .collect();
    out.push(num_layers);
    out.sort_unstable();
    out.dedup();
    out
}

/// How the prompt entering layer `i+1` is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PromptChain {
    /// Fresh parameter per layer.
    Independent,
    /// Fresh parameter plus the text-fused prompt of the previous layer.
    #[default]
    Residual,
}

impl std::str::FromStr for PromptChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(PromptChain::Independent),
            "residual" => Ok(PromptChain::Residual),
            other => Err(Error::Config(format!("prompt_chain '{other}' (expected independent|residual)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoTextConfig {
    pub num_prompts: usize,
    pub d: usize,
    pub d_depth: usize,
    /// 1-based, strictly increasing.
    pub layers: Vec<usize>,
    pub chain: PromptChain,
}

impl GeoTextConfig {
    pub fn validate(&self, available: usize) -> Result<()> {
        if self.num_prompts == 0 || self.d == 0 || self.d_depth == 0 {
            return Err(Error::Config("prompt count and widths must be ≥ 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("no prompt layers selected".into()));
        }
        for w in self.layers.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!("selected layers {:?} not strictly increasing", self.layers)));
            }
        }
        if self.layers[0] == 0 {
            return Err(Error::Config("layer indices are 1-based".into()));
        }
        if let Some(&last) = self.layers.last() {
            if last > available {
                return Err(Error::Config(format!("selected layer {last} exceeds the {available} available")));
            }
        }
        Ok(())
    }
}

/// Graph handles produced by one prompt layer.
#[derive(Clone, Debug)]
pub struct LayerRefinement {
    /// Refined visual map `[h, w, d]`.
    pub refined: Var,
    /// Additive input for the next selected layer `[h, w, d]`.
    pub next_input: Var,
    /// Text-fused prompts `[N, d]`, the residual part of the next prompt.
    pub fused_prompt: Var,
    pub visual_out: Var,
    pub depth_out: Var,
    pub text_attn: Var,
    pub visual_attn: Var,
    pub depth_attn: Var,
}

/// Prompt layer attached to encoder layer `layer`.
#[derive(Clone, Debug)]
pub struct GeoTextLayer {
    pub layer: usize,
    prefix: String,
}

impl GeoTextLayer {
    pub fn new(layer: usize) -> Self {
        Self {
            layer,
            prefix: format!("geotext.l{layer}"),
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn param(&self, p: &Bound, suffix: &str) -> Result<Var> {
        p.get(&self.name(suffix))
    }

    pub fn register<R: Rng + ?Sized>(&self, cfg: &GeoTextConfig, store: &mut ParamStore, rng: &mut R) {
        let (n, d, dd) = (cfg.num_prompts, cfg.d, cfg.d_depth);
        register(store, self.name("prompt"), &[n, d], Init::Normal(PROMPT_INIT_STD), rng);
        for branch in ["text", "visual", "depth"] {
            for w in ["wq", "wk", "wv"] {
                register(store, self.name(&format!("{branch}.{w}")), &[d, d], Init::FanIn, rng);
            }
        }
        register(store, self.name("depth.proj"), &[dd, d], Init::Zeros, rng);
        register(store, self.name("w_visual"), &[1], Init::Const(VISUAL_WEIGHT_INIT), rng);
        register(store, self.name("w_depth"), &[1], Init::Const(DEPTH_WEIGHT_INIT), rng);
        nn::register_mlp2(store, &self.name("mlp"), (d, d, d), Init::FanIn, rng);
        nn::register_mlp2(store, &self.name("next"), (d, d, d), Init::Zeros, rng);
    }

    /// Prompts attend to the text rows; the result is added to the prompts.
    /// Returns `(fused [N, d], weights [N, K])`.
    pub fn fuse_text(&self, g: &mut Graph, p: &Bound, prompt: Var, text: Var) -> Result<(Var, Var)> {
        let (pd, td) = (g.shape(prompt)[1], g.shape(text)[1]);
        if pd != td {
            return Err(Error::dim(format!("prompt width {pd} vs text width {td}")));
        }
        let q = g.contract(prompt, self.param(p, "text.wq")?, "nd,de->ne")?;
        let k = g.contract(text, self.param(p, "text.wk")?, "kd,de->ke")?;
        let v = g.contract(text, self.param(p, "text.wv")?, "kd,de->ke")?;
        let (att, weights) = nn::attention(g, q, k, v)?;
        Ok((g.add(prompt, att)?, weights))
    }

    /// Prompts as queries against visual tokens and projected depth tokens.
    /// Returns `(visual_out, depth_out, visual_weights, depth_weights)`.
    pub fn cross_modal_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        prompt: Var,
        visual: Var,
        depth: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let &[h, w, _] = g.shape(visual) else {
            return Err(Error::dim("visual features must be h×w×d"));
        };
        if h * w == 0 {
            return Err(Error::dim("empty spatial grid"));
        }
        let vt = nn::tokens(g, visual)?;
        let dt = nn::tokens(g, depth)?;
        let dt = g.contract(dt, self.param(p, "depth.proj")?, "pc,cd->pd")?;

        let branch = |g: &mut Graph, tokens: Var, name: &str| -> Result<(Var, Var)> {
            let q = g.contract(prompt, self.param(p, &format!("{name}.wq"))?, "nd,de->ne")?;
            let k = g.contract(tokens, self.param(p, &format!("{name}.wk"))?, "pd,de->pe")?;
            let v = g.contract(tokens, self.param(p, &format!("{name}.wv"))?, "pd,de->pe")?;
            nn::attention(g, q, k, v)
        };
        let (vis_out, vis_w) = branch(g, vt, "visual")?;
        let (dep_out, dep_w) = branch(g, dt, "depth")?;
        Ok((vis_out, dep_out, vis_w, dep_w))
    }

    /// One full prompt layer on `visual[h,w,d]`, `depth[h,w,d_depth]`.
    pub fn refine(&self, g: &mut Graph, p: &Bound, visual: Var, depth: Var, prompt: Var, text: Var) -> Result<LayerRefinement> {
        let &[h, w, d] = g.shape(visual) else {
            return Err(Error::dim("visual features must be h×w×d"));
        };
        let (fused, text_attn) = self.fuse_text(g, p, prompt, text)?;
        let (vis_out, dep_out, vis_w, dep_w) = self.cross_modal_attention(g, p, fused, visual, depth)?;

        let a = g.mul(vis_out, self.param(p, "w_visual")?)?;
        let b = g.mul(dep_out, self.param(p, "w_depth")?)?;
        let mixed = g.add(a, b)?;
        let projected = nn::mlp2(g, p, &self.name("mlp"), mixed)?;
        let modulated = g.mul(projected, fused)?;

        // Each pixel receives a mix of the prompt updates weighted by how
        // strongly each prompt attended to it, normalized over prompts.
        let col = g.sum_axis(vis_w, 0)?;
        let inv = g.recip(col);
        let mix = g.contract(vis_w, inv, "np,p->np")?;
        let scatter = g.contract(mix, modulated, "np,nd->pd")?;
        let scatter = g.reshape(scatter, &[h, w, d])?;
        let refined = g.add(visual, scatter)?;

        let rt = nn::tokens(g, refined)?;
        let next = nn::mlp2(g, p, &self.name("next"), rt)?;
        let next_input = g.reshape(next, &[h, w, d])?;

        Ok(LayerRefinement {
            refined,
            next_input,
            fused_prompt: fused,
            visual_out: vis_out,
            depth_out: dep_out,
            text_attn,
            visual_attn: vis_w,
            depth_attn: dep_w,
        })
    }
}

/// Output of [`GeoText::run_encoder_stack`].
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `(layer index, refined map)` at every selected layer.
    pub refined: Vec<(usize, Var)>,
    /// Prompt state handed to the head `[N, d]`.
    pub final_prompt: Var,
    pub layers: Vec<LayerRefinement>,
}

/// The whole prompt stack across the selected encoder layers.
#[derive(Clone, Debug)]
pub struct GeoText {
    pub cfg: GeoTextConfig,
    layers: Vec<GeoTextLayer>,
}

impl GeoText {
    pub fn new(cfg: GeoTextConfig) -> Self {
        let layers = cfg.layers.iter().map(|&l| GeoTextLayer::new(l)).collect();
        Self { cfg, layers }
    }

    pub fn layers(&self) -> &[GeoTextLayer] {
        &self.layers
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.register(&self.cfg, store, rng);
        }
    }

    /// Runs the selected layers in order. Provider features enter the graph
    /// as constants, so no gradient ever reaches them.
    pub fn run_encoder_stack(&self, g: &mut Graph, p: &Bound, stack: &FeatureStack, text: Var) -> Result<StackOutput> {
        self.cfg.validate(stack.num_layers())?;
        if stack.d() != self.cfg.d || stack.d_depth() != self.cfg.d_depth {
            return Err(Error::dim(format!(
                "features have widths ({}, {}), prompts expect ({}, {})",
                stack.d(),
                stack.d_depth(),
                self.cfg.d,
                self.cfg.d_depth
            )));
        }
        let mut refined = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut carry: Option<Var> = None;
        let mut prev_fused: Option<Var> = None;

        for layer in &self.layers {
            let l = layer.layer;
            let visual = g.constant(stack.visual(l).clone());
            let depth = g.constant(stack.depth(l).clone());
            let &[h, w, _] = g.shape(visual) else { unreachable!() };
            let visual = match carry {
                Some(c) => {
                    let c = nn::resize_hwc(g, c, h, w)?;
                    g.add(visual, c)?
                }
                None => visual,
            };
            let own = layer.param(p, "prompt")?;
            let prompt = match (self.cfg.chain, prev_fused) {
                (PromptChain::Residual, Some(prev)) => g.add(own, prev)?,
                _ => own,
            };
            let out = layer.refine(g, p, visual, depth, prompt, text)?;
            refined.push((l, out.refined));
            carry = Some(out.next_input);
            prev_fused = Some(out.fused_prompt);
            outputs.push(out);
        }
        Ok(StackOutput {
            refined,
            final_prompt: prev_fused.expect("at least one layer"),
            layers: outputs,
        })
    }
}
