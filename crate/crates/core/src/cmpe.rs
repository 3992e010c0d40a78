//! Coarse mask prior.
//!
//! The refined multi-scale maps are resized to a common grid, gated
//! (channel and spatial sigmoid gates), fused into `f^M`, and compared with
//! the text embeddings to give a coarse class map `M[K, H, W]`. A spatial
//! softmax of `M` per class pools `f^M` into class features, which are
//! projected and mixed by learnable queries into query priors for the head.
//! `M` also carries an auxiliary cross-entropy loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::ClassMap;
use crate::nn::{self, register, Init};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Var};

pub const DEFAULT_LAMBDA: f64 = 0.4;
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct CmpeConfig {
    pub d: usize,
    /// Must equal the prompt count.
    pub num_queries: usize,
    pub num_scales: usize,
}

impl CmpeConfig {
    pub fn bottleneck(&self) -> usize {
        (self.d / 4).max(1)
    }
}

/// Graph handles of one coarse-prior pass.
#[derive(Clone, Debug)]
pub struct CoarsePrior {
    /// `f^M [H, W, d]`
    pub fused: Var,
    /// `M [K, H, W]`, raw logits.
    pub coarse_map: Var,
    /// Per-class spatial softmax of `M`, `[K, H, W]`.
    pub alpha: Var,
    /// `[K, d]`
    pub class_feats: Var,
    /// `[K, d]`
    pub class_embeds: Var,
    /// `[N_q, d]`
    pub query_priors: Var,
}

#[derive(Clone, Debug)]
pub struct Cmpe {
    pub cfg: CmpeConfig,
}

impl Cmpe {
    pub fn new(cfg: CmpeConfig) -> Self {
        Self { cfg }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.d;
        let r = self.cfg.bottleneck();
        for i in 0..self.cfg.num_scales {
            let pre = format!("cmpe.aag{i}");
            register(store, format!("{pre}.c1"), &[d, r], Init::FanIn, rng);
            register(store, format!("{pre}.c1b"), &[r], Init::Zeros, rng);
            register(store, format!("{pre}.c2"), &[r, d], Init::FanIn, rng);
            register(store, format!("{pre}.c2b"), &[d], Init::Zeros, rng);
            register(store, format!("{pre}.spatial"), &[1, 1, 3, 3], Init::FanIn, rng);
            register(store, format!("{pre}.spatial_b"), &[1], Init::Zeros, rng);
        }
        register(store, "cmpe.fuse.w".into(), &[self.cfg.num_scales * d, d], Init::FanIn, rng);
        register(store, "cmpe.fuse.b".into(), &[d], Init::Zeros, rng);
        register(store, "cmpe.proj.w".into(), &[d, d], Init::Identity, rng);
        register(store, "cmpe.proj.b".into(), &[d], Init::Zeros, rng);
        register(store, "cmpe.class.w".into(), &[d, d], Init::FanIn, rng);
        register(store, "cmpe.class.b".into(), &[d], Init::Zeros, rng);
        register(store, "cmpe.queries".into(), &[self.cfg.num_queries, d], Init::Normal(QUERY_INIT_STD), rng);
    }

    /// `f ⊙ channel_gate ⊙ spatial_gate` for `f[h, w, d]`.
    ///
    /// The channel gate runs two 1×1 convolutions (ReLU between, sigmoid
    /// after) on the spatially pooled features; the spatial gate is a 3×3
    /// convolution plus sigmoid over the channel-mean map.
    pub fn adaptive_attention_gate(&self, g: &mut Graph, p: &Bound, scale: usize, f: Var) -> Result<Var> {
        let pre = format!("cmpe.aag{scale}");
        let &[h, w, d] = g.shape(f) else {
            return Err(Error::dim("gate input must be h×w×d"));
        };
        let tok = g.reshape(f, &[h * w, d])?;
        let pooled = g.mean_axis(tok, 0)?;
        let pooled = g.reshape(pooled, &[1, d])?;
        let hidden = g.linear(pooled, p.get(&format!("{pre}.c1"))?, Some(p.get(&format!("{pre}.c1b"))?))?;
        let hidden = g.relu(hidden);
        let cg = g.linear(hidden, p.get(&format!("{pre}.c2"))?, Some(p.get(&format!("{pre}.c2b"))?))?;
        let cg = g.sigmoid(cg);
        let cg = g.reshape(cg, &[d])?;

        let reduced = g.mean_axis(f, 2)?;
        let reduced = g.reshape(reduced, &[1, h, w])?;
        let sg = g.conv2d(
            reduced,
            p.get(&format!("{pre}.spatial"))?,
            Some(p.get(&format!("{pre}.spatial_b"))?),
        )?;
        let sg = g.sigmoid(sg);
        let sg = g.reshape(sg, &[h, w])?;

        let out = g.contract(f, cg, "hwd,d->hwd")?;
        g.contract(out, sg, "hwd,hw->hwd")
    }

    /// Resize → gate → concat → 1×1 fuse, plus the resized deepest map.
    pub fn fuse_multiscale(&self, g: &mut Graph, p: &Bound, refined: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        if refined.len() != self.cfg.num_scales {
            return Err(Error::Config(format!(
                "coarse prior configured for {} scales, got {}",
                self.cfg.num_scales,
                refined.len()
            )));
        }
        let mut gated = Vec::with_capacity(refined.len());
        let mut resized_last = None;
        for (i, &f) in refined.iter().enumerate() {
            let r = nn::resize_hwc(g, f, out_h, out_w)?;
            gated.push(self.adaptive_attention_gate(g, p, i, r)?);
            resized_last = Some(r);
        }
        let cat = g.concat(&gated, 2)?;
        let fused = g.contract(cat, p.get("cmpe.fuse.w")?, "hwc,cd->hwd")?;
        let fused = g.add_bias(fused, p.get("cmpe.fuse.b")?)?;
        g.add(fused, resized_last.expect("non-empty"))
    }

    /// `M[k, x, y] = ⟨proj(f^M(x, y)), t_k⟩`.
    pub fn coarse_mask(&self, g: &mut Graph, p: &Bound, fused: Var, text: Var) -> Result<Var> {
        let &[h, w, d] = g.shape(fused) else {
            return Err(Error::dim("fused map must be H×W×d"));
        };
        let tok = g.reshape(fused, &[h * w, d])?;
        let proj = g.linear(tok, p.get("cmpe.proj.w")?, Some(p.get("cmpe.proj.b")?))?;
        if g.shape(proj)[1] != g.shape(text)[1] {
            return Err(Error::dim(format!(
                "projected width {} vs text width {}",
                g.shape(proj)[1],
                g.shape(text)[1]
            )));
        }
        let proj = g.reshape(proj, &[h, w, d])?;
        g.contract(proj, text, "hwd,kd->khw")
    }

    /// Full prior: fused map, coarse map, spatial weights, class features
    /// and query priors.
    pub fn forward(&self, g: &mut Graph, p: &Bound, refined: &[Var], out_h: usize, out_w: usize, text: Var) -> Result<CoarsePrior> {
        let fused = self.fuse_multiscale(g, p, refined, out_h, out_w)?;
        let coarse_map = self.coarse_mask(g, p, fused, text)?;
        let alpha = spatial_attention_weights(g, coarse_map)?;
        let class_feats = class_aggregate(g, alpha, fused)?;
        let class_embeds = g.linear(class_feats, p.get("cmpe.class.w")?, Some(p.get("cmpe.class.b")?))?;
        let queries = p.get("cmpe.queries")?;
        let query_priors = query_priors(g, class_embeds, queries)?;
        Ok(CoarsePrior {
            fused,
            coarse_map,
            alpha,
            class_feats,
            class_embeds,
            query_priors,
        })
    }
}

/// Softmax of each class map over all pixels.
pub fn spatial_attention_weights(g: &mut Graph, coarse_map: Var) -> Result<Var> {
    let &[k, h, w] = g.shape(coarse_map) else {
        return Err(Error::dim("coarse map must be K×H×W"));
    };
    let flat = g.reshape(coarse_map, &[k, h * w])?;
    let alpha = g.softmax(flat, 1, 1.0)?;
    g.reshape(alpha, &[k, h, w])
}

/// `f^class_k = Σ_{x,y} α_k(x, y) · f^M(x, y)`.
pub fn class_aggregate(g: &mut Graph, alpha: Var, fused: Var) -> Result<Var> {
    g.contract(alpha, fused, "khw,hwd->kd")
}

/// `q^prior_j = Σ_k softmax_k(⟨q_j, e_k⟩) · e_k`.
pub fn query_priors(g: &mut Graph, class_embeds: Var, queries: Var) -> Result<Var> {
    let logits = g.contract(queries, class_embeds, "nd,kd->nk")?;
    let mix = g.softmax(logits, 1, 1.0)?;
    g.contract(mix, class_embeds, "nk,kd->nd")
}

/// Mean per-pixel cross-entropy of `M[K, H, W]` against `labels`.
/// Ignored pixels are skipped; the loss is 0 when all are ignored.
pub fn coarse_loss(g: &mut Graph, coarse_map: Var, labels: &ClassMap) -> Result<Var> {
    let &[k, h, w] = g.shape(coarse_map) else {
        return Err(Error::dim("coarse map must be K×H×W"));
    };
    if (labels.height, labels.width) != (h, w) {
        return Err(Error::dim(format!(
            "labels {}×{} vs coarse map {h}×{w}",
            labels.height, labels.width
        )));
    }
    let targets = labels.targets(k)?;
    let hwk = g.permute(coarse_map, &[1, 2, 0])?;
    let flat = g.reshape(hwk, &[h * w, k])?;
    g.cross_entropy(flat, &targets)
}
