//! Text-conditioned segmentation head.
//!
//! Pixel decoder over the refined scales, sinusoidal positions, a query
//! decoder driven by the prompts, per-pixel mask embeddings and per-class
//! embeddings from the text rows; logits are the contraction of the two.

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::ClassMap;
use crate::nn::{self, register, Init};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_DECODER_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub decoder_layers: usize,
    /// Embedding width; mask and class embeddings share it.
    pub d: usize,
    pub num_scales: usize,
    /// Logits are divided by this. `None` means `sqrt(d)`.
    pub temperature: Option<f64>,
}

impl HeadConfig {
    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or((self.d as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be ≥ 1".into()));
        }
        if !(self.temperature() > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !self.d.is_multiple_of(4) {
            return Err(Error::Config(format!("head width {} must be divisible by 4", self.d)));
        }
        Ok(())
    }
}

/// `[H, W, d]` 2-D sinusoidal encoding. The first half of the channels
/// encode the row, the second half the column; within each half channel
/// `2i` is `sin(pos·ω_i)` and `2i+1` is `cos(pos·ω_i)` with
/// `ω_i = 10000^(-i/(d/4))`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("positional encoding width {d} must be a positive multiple of 4")));
    }
    let quarter = d / 4;
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let px = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for i in 0..quarter {
                let omega = 10000f64.powf(-(i as f64) / quarter as f64);
                px[2 * i] = (y as f64 * omega).sin();
                px[2 * i + 1] = (y as f64 * omega).cos();
                px[half + 2 * i] = (x as f64 * omega).sin();
                px[half + 2 * i + 1] = (x as f64 * omega).cos();
            }
        }
    }
    Tensor::from_vec(vec![h, w, d], data)
}

/// Graph handles of one head pass.
#[derive(Clone, Debug)]
pub struct SegPrediction {
    /// `M̂ [H, W, K]`
    pub logits: Var,
    /// `E_mask [H, W, d]`
    pub mask_embeds: Var,
    /// `E_cls [K, d]`
    pub cls_embeds: Var,
    pub query_out: Var,
    pub pixel_features: Var,
    /// Every attention weight matrix computed by the head.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
}

impl Head {
    pub fn new(cfg: HeadConfig) -> Self {
        Self { cfg }
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.d;
        for s in 0..self.cfg.num_scales.saturating_sub(1) {
            let pre = format!("head.pix{s}");
            register(store, format!("{pre}.wq"), &[d, d], Init::FanIn, rng);
            register(store, format!("{pre}.wk"), &[d, d], Init::FanIn, rng);
            register(store, format!("{pre}.wv"), &[d, d], Init::Zeros, rng);
        }
        register(store, "head.compress.w".into(), &[d, d], Init::FanIn, rng);
        register(store, "head.compress.b".into(), &[d], Init::Zeros, rng);
        for i in 0..self.cfg.decoder_layers {
            for part in ["self", "cross"] {
                let pre = format!("head.dec{i}.{part}");
                for w in ["wq", "wk", "wv"] {
                    register(store, format!("{pre}.{w}"), &[d, d], Init::FanIn, rng);
                }
                register(store, format!("{pre}.wo"), &[d, d], Init::Zeros, rng);
            }
            nn::register_mlp2(store, &format!("head.dec{i}.ffn"), (d, 2 * d, d), Init::Zeros, rng);
        }
        register(store, "head.mask.w".into(), &[d, d], Init::FanIn, rng);
        register(store, "head.mask.b".into(), &[d], Init::Zeros, rng);
        nn::register_mlp2(store, "head.cls.mlp", (d, d, d), Init::FanIn, rng);
        register(store, "head.cls.wq".into(), &[d, d], Init::FanIn, rng);
    }

    /// Coarsest scale first attends to each finer scale (pixels as queries),
    /// upsampled between stages; the result is resized to the largest grid
    /// and compressed by a 1×1 projection. Returns `(f^pix, attention)`.
    pub fn pixel_decode(&self, g: &mut Graph, p: &Bound, scales: &[Var]) -> Result<(Var, Vec<Var>)> {
        if scales.len() != self.cfg.num_scales || scales.is_empty() {
            return Err(Error::Config(format!(
                "head configured for {} scales, got {}",
                self.cfg.num_scales,
                scales.len()
            )));
        }
        let area = |g: &Graph, v: Var| g.shape(v)[0] * g.shape(v)[1];
        // Coarse-to-fine; among equal grids, deeper layers come first.
        let mut order: Vec<usize> = (0..scales.len()).collect();
        order.sort_by(|&a, &b| area(g, scales[a]).cmp(&area(g, scales[b])).then(b.cmp(&a)));
        let largest = *order.last().unwrap();
        let (out_h, out_w) = (g.shape(scales[largest])[0], g.shape(scales[largest])[1]);

        let mut x = scales[order[0]];
        let mut attention = Vec::new();
        for (stage, &si) in order[1..].iter().enumerate() {
            let s = scales[si];
            let &[h, w, d] = g.shape(s) else {
                return Err(Error::dim("pixel decoder scales must be h×w×d"));
            };
            x = nn::resize_hwc(g, x, h, w)?;
            let xt = nn::tokens(g, x)?;
            let st = nn::tokens(g, s)?;
            let pre = format!("head.pix{stage}");
            let q = g.contract(xt, p.get(&format!("{pre}.wq"))?, "pd,de->pe")?;
            let k = g.contract(st, p.get(&format!("{pre}.wk"))?, "pd,de->pe")?;
            let v = g.contract(st, p.get(&format!("{pre}.wv"))?, "pd,de->pe")?;
            let (att, weights) = nn::attention(g, q, k, v)?;
            attention.push(weights);
            let xt = g.add(xt, att)?;
            x = g.reshape(xt, &[h, w, d])?;
        }
        let x = nn::resize_hwc(g, x, out_h, out_w)?;
        let xt = nn::tokens(g, x)?;
        let c = g.linear(xt, p.get("head.compress.w")?, Some(p.get("head.compress.b")?))?;
        let d = g.shape(c)[1];
        Ok((g.reshape(c, &[out_h, out_w, d])?, attention))
    }

    fn attend(&self, g: &mut Graph, p: &Bound, pre: &str, q_in: Var, kv_in: Var) -> Result<(Var, Var)> {
        let q = g.contract(q_in, p.get(&format!("{pre}.wq"))?, "nd,de->ne")?;
        let k = g.contract(kv_in, p.get(&format!("{pre}.wk"))?, "md,de->me")?;
        let v = g.contract(kv_in, p.get(&format!("{pre}.wv"))?, "md,de->me")?;
        let (att, weights) = nn::attention(g, q, k, v)?;
        let out = g.contract(att, p.get(&format!("{pre}.wo"))?, "nd,de->ne")?;
        Ok((out, weights))
    }

    /// Stacked self-attention → cross-attention to pixels → feed-forward,
    /// each with a residual add. `pixels` is `[H·W, d]` (positions already
    /// added). Returns `(query_out, attention)`.
    pub fn transformer_decode(&self, g: &mut Graph, p: &Bound, queries: Var, pixels: Var) -> Result<(Var, Vec<Var>)> {
        self.cfg.validate()?;
        let mut q = queries;
        let mut attention = Vec::new();
        for i in 0..self.cfg.decoder_layers {
            let (sa, w1) = self.attend(g, p, &format!("head.dec{i}.self"), q, q)?;
            q = g.add(q, sa)?;
            let (ca, w2) = self.attend(g, p, &format!("head.dec{i}.cross"), q, pixels)?;
            q = g.add(q, ca)?;
            let ff = nn::mlp2(g, p, &format!("head.dec{i}.ffn"), q)?;
            q = g.add(q, ff)?;
            attention.push(w1);
            attention.push(w2);
        }
        Ok((q, attention))
    }

    /// Per-pixel projection of `f^pix [H, W, d]`, scaled channelwise by
    /// `1 + mean_n(query_out)`.
    pub fn mask_embeddings(&self, g: &mut Graph, p: &Bound, pixel_features: Var, query_out: Var) -> Result<Var> {
        let &[h, w, d] = g.shape(pixel_features) else {
            return Err(Error::dim("pixel features must be H×W×d"));
        };
        let tok = g.reshape(pixel_features, &[h * w, d])?;
        let proj = g.linear(tok, p.get("head.mask.w")?, Some(p.get("head.mask.b")?))?;
        let m = g.mean_axis(query_out, 0)?;
        let m = g.add_scalar(m, 1.0);
        let e = g.contract(proj, m, "pd,d->pd")?;
        g.reshape(e, &[h, w, d])
    }

    /// Text rows query the MLP-transformed decoder outputs; the attended
    /// result is added to the text row. `K` comes from `text` alone.
    /// Returns `(E_cls [K, d], weights [K, N])`.
    pub fn classification_embeddings(&self, g: &mut Graph, p: &Bound, query_out: Var, text: Var) -> Result<(Var, Var)> {
        let (qd, td) = (g.shape(query_out)[1], g.shape(text)[1]);
        if qd != td {
            return Err(Error::dim(format!("query width {qd} vs text width {td}")));
        }
        let z = nn::mlp2(g, p, "head.cls.mlp", query_out)?;
        let tq = g.contract(text, p.get("head.cls.wq")?, "kd,de->ke")?;
        let (att, weights) = nn::attention(g, tq, z, z)?;
        Ok((g.add(text, att)?, weights))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, scales: &[Var], queries: Var, text: Var) -> Result<SegPrediction> {
        self.cfg.validate()?;
        let (pixel_features, mut attention) = self.pixel_decode(g, p, scales)?;
        let &[h, w, d] = g.shape(pixel_features) else { unreachable!() };
        let pe = g.constant(positional_encoding(h, w, d)?);
        let enriched = g.add(pixel_features, pe)?;
        let pix_tokens = g.reshape(enriched, &[h * w, d])?;
        let (query_out, dec_attn) = self.transformer_decode(g, p, queries, pix_tokens)?;
        attention.extend(dec_attn);
        let mask_embeds = self.mask_embeddings(g, p, pixel_features, query_out)?;
        let (cls_embeds, cls_attn) = self.classification_embeddings(g, p, query_out, text)?;
        attention.push(cls_attn);
        let logits = final_prediction(g, mask_embeds, cls_embeds, self.cfg.temperature())?;
        Ok(SegPrediction {
            logits,
            mask_embeds,
            cls_embeds,
            query_out,
            pixel_features,
            attention,
        })
    }
}

/// `M̂(x, y, k) = (1/temperature) Σ_d E_mask(x, y, d) · E_cls(k, d)`.
pub fn final_prediction(g: &mut Graph, mask_embeds: Var, cls_embeds: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let raw = g.contract(mask_embeds, cls_embeds, "hwd,kd->hwk")?;
    Ok(g.scale(raw, 1.0 / temperature))
}

/// Mean per-pixel cross-entropy of `logits[H, W, K]`.
pub fn segmentation_loss(g: &mut Graph, logits: Var, labels: &ClassMap) -> Result<Var> {
    let &[h, w, k] = g.shape(logits) else {
        return Err(Error::dim("logits must be H×W×K"));
    };
    if (labels.height, labels.width) != (h, w) {
        return Err(Error::dim(format!("labels {}×{} vs logits {h}×{w}", labels.height, labels.width)));
    }
    let targets = labels.targets(k)?;
    let flat = g.reshape(logits, &[h * w, k])?;
    g.cross_entropy(flat, &targets)
}

/// Per-pixel argmax of `logits[H, W, K]`; ties go to the lowest class id.
pub fn argmax_classes(logits: &Tensor) -> Result<ClassMap> {
    let &[h, w, k] = logits.shape() else {
        return Err(Error::dim("logits must be H×W×K"));
    };
    let data = logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect();
    ClassMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg() -> HeadConfig {
        HeadConfig {
            decoder_layers: 2,
            d: 8,
            num_scales: 3,
            temperature: None,
        }
    }

    #[test]
    fn default_temperature_is_root_width() {
        assert_eq!(cfg().temperature(), 8f64.sqrt());
        assert_eq!(HeadConfig { temperature: Some(0.5), ..cfg() }.temperature(), 0.5);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4, 8).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for i in 0..2 {
                    let omega = 10000f64.powf(-(i as f64) / 2.0);
                    assert_eq!(pe.at(&[y, x, 2 * i]), (y as f64 * omega).sin());
                    assert_eq!(pe.at(&[y, x, 2 * i + 1]), (y as f64 * omega).cos());
                    assert_eq!(pe.at(&[y, x, 4 + 2 * i]), (x as f64 * omega).sin());
                    assert_eq!(pe.at(&[y, x, 4 + 2 * i + 1]), (x as f64 * omega).cos());
                }
            }
        }
        assert!(positional_encoding(2, 2, 6).is_err());
    }

    #[test]
    fn orthonormal_classes_select_with_margin() {
        let mut g = Graph::new();
        let mask = g.constant(Tensor::from_vec(vec![1, 2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let cls = g.constant(Tensor::eye(3));
        let out = final_prediction(&mut g, mask, cls, 0.25).unwrap();
        let logits = g.value(out).clone();
        assert_eq!(logits.data(), &[0.0, 4.0, 0.0, 0.0, 0.0, 4.0]);
        assert_eq!(argmax_classes(&logits).unwrap().data, vec![1, 2]);
        assert!(final_prediction(&mut g, mask, cls, 0.0).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_vec(vec![1, 1, 3], vec![2.0, 5.0, 5.0]).unwrap();
        assert_eq!(argmax_classes(&t).unwrap().data, vec![1]);
    }

    #[test]
    fn class_rows_do_not_see_each_other() {
        let head = Head::new(cfg());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        head.register(&mut store, &mut rng);
        let queries = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let text = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let embed = |rows: usize| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let q = g.constant(queries.clone());
            let t = g.constant(Tensor::from_vec(vec![rows, 8], text.data()[..rows * 8].to_vec()).unwrap());
            let (e, w) = head.classification_embeddings(&mut g, &p, q, t).unwrap();
            (g.value(e).clone(), g.value(w).clone())
        };
        let (three, w3) = embed(3);
        let (five, _) = embed(5);
        assert_eq!(three.data(), &five.data()[..24]);
        assert_eq!(w3.shape(), &[3, 3]);
    }

    #[test]
    fn forward_shapes_follow_text_bank() {
        let head = Head::new(cfg());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        head.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let scales: Vec<Var> = [(2, 2), (4, 3), (4, 3)]
            .iter()
            .map(|&(h, w)| g.constant(Tensor::randn(&[h, w, 8], 1.0, &mut rng)))
            .collect();
        let q = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let text = g.constant(Tensor::randn(&[7, 8], 1.0, &mut rng));
        let out = head.forward(&mut g, &p, &scales, q, text).unwrap();
        assert_eq!(g.shape(out.logits), &[4, 3, 7]);
        assert_eq!(g.shape(out.mask_embeds), &[4, 3, 8]);
        assert_eq!(g.shape(out.cls_embeds), &[7, 8]);
        // Two pixel-decoder stages, two attentions per decoder layer, one class attention.
        assert_eq!(out.attention.len(), 2 + 4 + 1);
    }

    #[test]
    fn scale_count_checked() {
        let head = Head::new(cfg());
        let mut store = ParamStore::new();
        head.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.constant(Tensor::zeros(&[2, 2, 8]));
        assert!(matches!(head.pixel_decode(&mut g, &p, &[s]), Err(Error::Config(_))));
    }
}
