//! Finite-difference check of every differentiable op and of the composite
//! paths (prompt layer, coarse prior, head, full model).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmpe::{self, Cmpe, CmpeConfig};
use crate::error::Result;
use crate::eval::ClassMap;
use crate::features::{synth_features, synth_text_bank, SynthConfig};
use crate::geotext::{GeoText, GeoTextConfig, PromptChain};
use crate::head::{self, Head, HeadConfig};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::{grad_check, grad_check_params, Graph, Tensor, Var};

pub const THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteItem {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl SuiteItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= THRESHOLD
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub items: Vec<SuiteItem>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(SuiteItem::passed)
    }

    pub fn worst(&self) -> f64 {
        self.items.iter().map(|i| i.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let width = self.items.iter().map(|i| i.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for i in &self.items {
            out += &format!(
                "{:<width$}  {:>6}  max rel err {:.3e}  {}\n",
                i.name,
                i.coordinates,
                i.max_rel_error,
                if i.passed() { "ok" } else { "FAIL" }
            );
        }
        out += &format!(
            "{} items, worst {:.3e}, threshold {:.0e}, {:.1}s: {}\n",
            self.items.len(),
            self.worst(),
            THRESHOLD,
            self.seconds,
            if self.passed() { "pass" } else { "FAIL" }
        );
        out
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f62);
    let r = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(*name, t.clone());
    }
    s
}

/// Replaces every parameter with Gaussian values so no branch starts at an
/// exact zero.
fn randomize(params: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

fn check<F>(name: &'static str, params: &ParamStore, f: F) -> Result<SuiteItem>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let r = grad_check_params(f, params, EPS)?;
    Ok(SuiteItem {
        name,
        max_rel_error: r.max_rel_error,
        coordinates: r.coordinates,
    })
}

/// Runs every item. Fails only on evaluation errors; threshold violations
/// are reported through [`SuiteReport::passed`].
pub fn run_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut items = Vec::new();

    let ab = store(&[("a", randn(&mut rng, &[3, 4])), ("b", randn(&mut rng, &[3, 4]))]);
    items.push(check("add/sub", &ab, |g, p| {
        let s = g.add(p.get("a")?, p.get("b")?)?;
        let d = g.sub(s, p.get("b")?)?;
        let d = g.sub(d, p.get("b")?)?;
        probe(g, d, 1)
    })?);
    items.push(check("mul", &ab, |g, p| {
        let m = g.mul(p.get("a")?, p.get("b")?)?;
        probe(g, m, 2)
    })?);
    let sc = store(&[("x", randn(&mut rng, &[2, 3])), ("s", randn(&mut rng, &[1]))]);
    items.push(check("scale/add_scalar/scalar broadcast", &sc, |g, p| {
        let y = g.scale(p.get("x")?, -1.7);
        let y = g.add_scalar(y, 0.3);
        let y = g.mul(y, p.get("s")?)?;
        probe(g, y, 3)
    })?);

    // Keep relu inputs away from the kink.
    let mut xr = randn(&mut rng, &[4, 5]);
    xr.data_mut().iter_mut().for_each(|v| *v += 0.2 * v.signum());
    items.push(check("relu", &store(&[("x", xr)]), |g, p| {
        let y = g.relu(p.get("x")?);
        probe(g, y, 4)
    })?);
    let x = store(&[("x", randn(&mut rng, &[3, 5]))]);
    items.push(check("sigmoid", &x, |g, p| {
        let y = g.sigmoid(p.get("x")?);
        probe(g, y, 5)
    })?);
    items.push(check("exp", &x, |g, p| {
        let y = g.exp(p.get("x")?);
        probe(g, y, 6)
    })?);
    let mut xp = x.get("x").expect("x").clone();
    xp.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
    items.push(check("recip", &store(&[("x", xp)]), |g, p| {
        let y = g.recip(p.get("x")?);
        probe(g, y, 6)
    })?);
    let xb = store(&[("x", randn(&mut rng, &[2, 3, 4])), ("b", randn(&mut rng, &[4]))]);
    items.push(check("add_bias", &xb, |g, p| {
        let y = g.add_bias(p.get("x")?, p.get("b")?)?;
        probe(g, y, 7)
    })?);
    let cc = store(&[("a", randn(&mut rng, &[2, 3, 2])), ("b", randn(&mut rng, &[2, 3, 3]))]);
    items.push(check("concat", &cc, |g, p| {
        let y = g.concat(&[p.get("a")?, p.get("b")?, p.get("a")?], 2)?;
        probe(g, y, 8)
    })?);
    let rp = store(&[("x", randn(&mut rng, &[2, 3, 4]))]);
    items.push(check("reshape/permute", &rp, |g, p| {
        let y = g.permute(p.get("x")?, &[2, 0, 1])?;
        let y = g.reshape(y, &[4, 6])?;
        probe(g, y, 9)
    })?);
    let ct = store(&[("m", randn(&mut rng, &[2, 2, 4])), ("c", randn(&mut rng, &[3, 4]))]);
    items.push(check("contract", &ct, |g, p| {
        let y = g.contract(p.get("m")?, p.get("c")?, "hwd,kd->hwk")?;
        probe(g, y, 10)
    })?);
    let ln = store(&[
        ("x", randn(&mut rng, &[3, 4])),
        ("w", randn(&mut rng, &[4, 2])),
        ("b", randn(&mut rng, &[2])),
    ]);
    items.push(check("linear", &ln, |g, p| {
        let y = g.linear(p.get("x")?, p.get("w")?, Some(p.get("b")?))?;
        probe(g, y, 11)
    })?);
    let sm = store(&[("x", randn(&mut rng, &[3, 5]))]);
    items.push(check("softmax", &sm, |g, p| {
        let y = g.softmax(p.get("x")?, 1, 0.7)?;
        let z = g.softmax(y, 0, 1.3)?;
        probe(g, z, 12)
    })?);
    let c1 = store(&[("x", randn(&mut rng, &[3, 4, 4])), ("k", randn(&mut rng, &[2, 3, 1, 1]))]);
    items.push(check("conv2d 1x1", &c1, |g, p| {
        let y = g.conv2d(p.get("x")?, p.get("k")?, None)?;
        probe(g, y, 13)
    })?);
    let c3 = store(&[
        ("x", randn(&mut rng, &[2, 4, 4])),
        ("k", randn(&mut rng, &[3, 2, 3, 3])),
        ("b", randn(&mut rng, &[3])),
    ]);
    items.push(check("conv2d 3x3 + bias", &c3, |g, p| {
        let y = g.conv2d(p.get("x")?, p.get("k")?, Some(p.get("b")?))?;
        probe(g, y, 14)
    })?);
    let bl = store(&[("x", randn(&mut rng, &[2, 3, 3]))]);
    items.push(check("bilinear resize", &bl, |g, p| {
        let up = g.bilinear_resize(p.get("x")?, 5, 4)?;
        let down = g.bilinear_resize(up, 2, 3)?;
        let up = g.reshape(up, &[2, 20])?;
        let down = g.reshape(down, &[2, 6])?;
        let y = g.concat(&[up, down], 1)?;
        probe(g, y, 15)
    })?);
    let sa = store(&[("x", randn(&mut rng, &[3, 4, 2]))]);
    items.push(check("sum_axis/mean_axis/mean", &sa, |g, p| {
        let a = g.sum_axis(p.get("x")?, 1)?;
        let b = g.mean_axis(a, 0)?;
        let c = probe(g, b, 16)?;
        let m = g.mean(p.get("x")?);
        g.add(c, m)
    })?);
    let ce = store(&[("x", randn(&mut rng, &[5, 3]))]);
    items.push(check("cross_entropy (with ignored rows)", &ce, |g, p| {
        g.cross_entropy(p.get("x")?, &[Some(0), None, Some(2), Some(1), None])
    })?);

    // softmax → contract → sum, as a single-tensor check.
    let x9 = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let w9 = Tensor::randn(&[4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(90));
    let err = grad_check(
        |g, x| {
            let s = g.softmax(x, 1, 1.0)?;
            let w = g.constant(w9.clone());
            let c = g.contract(s, w, "nd,de->ne")?;
            let c = g.mul(c, c)?;
            Ok(g.sum(c))
        },
        &x9,
        EPS,
    )?;
    items.push(SuiteItem {
        name: "softmax→contract→sum",
        max_rel_error: err,
        coordinates: x9.numel(),
    });

    items.push(geotext_item()?);
    items.push(aag_item()?);
    items.push(cmpe_item()?);
    items.push(pixel_decoder_item()?);
    items.push(head_item()?);
    items.push(full_model_item()?);

    Ok(SuiteReport {
        items,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn tiny_stack(layers: usize, hw: usize, d: usize, dd: usize, seed: u64) -> Result<crate::features::FeatureStack> {
    synth_features(
        "gradcheck",
        &SynthConfig {
            layers,
            height: hw,
            width: hw,
            d,
            d_depth: dd,
        },
        seed,
    )
}

fn classes(k: usize) -> Vec<String> {
    ["road", "car", "sky", "tree"][..k].iter().map(|s| s.to_string()).collect()
}

/// Two-layer prompt stack, loss over refined maps and the final prompt.
fn geotext_item() -> Result<SuiteItem> {
    let cfg = GeoTextConfig {
        num_prompts: 2,
        d: 4,
        d_depth: 3,
        layers: vec![1, 2],
        chain: PromptChain::Residual,
    };
    let gt = GeoText::new(cfg);
    let mut params = ParamStore::new();
    gt.register(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
    randomize(&mut params, 1, 0.5);
    let stack = tiny_stack(2, 2, 4, 3, 1)?;
    let text = synth_text_bank(&classes(3), 1, 4)?;
    check("GeoText layer stack", &params, |g, p| {
        let t = g.constant(text.embeddings().clone());
        let out = gt.run_encoder_stack(g, p, &stack, t)?;
        let mut loss = probe(g, out.final_prompt, 20)?;
        for (i, &(_, r)) in out.refined.iter().enumerate() {
            let l = probe(g, r, 21 + i as u64)?;
            loss = g.add(loss, l)?;
        }
        let l = probe(g, out.layers[1].next_input, 25)?;
        g.add(loss, l)
    })
}

fn aag_item() -> Result<SuiteItem> {
    let c = Cmpe::new(CmpeConfig {
        d: 8,
        num_queries: 2,
        num_scales: 1,
    });
    let mut params = ParamStore::new();
    c.register(&mut params, &mut ChaCha8Rng::seed_from_u64(12));
    randomize(&mut params, 12, 0.5);
    params.insert("f", Tensor::randn(&[3, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(120)));
    check("adaptive attention gate", &params, |g, p| {
        let y = c.adaptive_attention_gate(g, p, 0, p.get("f")?)?;
        probe(g, y, 30)
    })
}

/// Fuse → coarse map → spatial weights → class features → query priors,
/// plus the coarse loss.
fn cmpe_item() -> Result<SuiteItem> {
    let c = Cmpe::new(CmpeConfig {
        d: 4,
        num_queries: 2,
        num_scales: 2,
    });
    let mut params = ParamStore::new();
    c.register(&mut params, &mut ChaCha8Rng::seed_from_u64(13));
    randomize(&mut params, 13, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(130);
    params.insert("f1", Tensor::randn(&[3, 3, 4], 1.0, &mut rng));
    params.insert("f2", Tensor::randn(&[2, 2, 4], 1.0, &mut rng));
    let text = synth_text_bank(&classes(3), 2, 4)?;
    let labels = ClassMap::new(3, 3, vec![0, 1, 2, 2, 255, 1, 0, 0, 1])?;
    check("CMPE chain", &params, |g, p| {
        let t = g.constant(text.embeddings().clone());
        let prior = c.forward(g, p, &[p.get("f1")?, p.get("f2")?], 3, 3, t)?;
        let a = probe(g, prior.query_priors, 31)?;
        let b = cmpe::coarse_loss(g, prior.coarse_map, &labels)?;
        g.add(a, b)
    })
}

fn pixel_decoder_item() -> Result<SuiteItem> {
    let h = Head::new(HeadConfig {
        decoder_layers: 1,
        d: 4,
        num_scales: 2,
        temperature: None,
    });
    let mut params = ParamStore::new();
    h.register(&mut params, &mut ChaCha8Rng::seed_from_u64(19));
    randomize(&mut params, 19, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(190);
    params.insert("s1", Tensor::randn(&[3, 3, 4], 1.0, &mut rng));
    params.insert("s2", Tensor::randn(&[2, 2, 4], 1.0, &mut rng));
    check("pixel decoder", &params, |g, p| {
        let (f, _) = h.pixel_decode(g, p, &[p.get("s1")?, p.get("s2")?])?;
        probe(g, f, 32)
    })
}

/// Whole head from scales, queries and text to the per-pixel loss.
fn head_item() -> Result<SuiteItem> {
    let h = Head::new(HeadConfig {
        decoder_layers: 2,
        d: 4,
        num_scales: 2,
        temperature: None,
    });
    let mut params = ParamStore::new();
    h.register(&mut params, &mut ChaCha8Rng::seed_from_u64(20));
    randomize(&mut params, 20, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    params.insert("s1", Tensor::randn(&[2, 2, 4], 1.0, &mut rng));
    params.insert("s2", Tensor::randn(&[2, 2, 4], 1.0, &mut rng));
    params.insert("q", Tensor::randn(&[2, 4], 1.0, &mut rng));
    let text = synth_text_bank(&classes(3), 3, 4)?;
    let labels = ClassMap::new(2, 2, vec![0, 2, 1, 255])?;
    check("segmentation head chain", &params, |g, p| {
        let t = g.constant(text.embeddings().clone());
        let pred = h.forward(g, p, &[p.get("s1")?, p.get("s2")?], p.get("q")?, t)?;
        head::segmentation_loss(g, pred.logits, &labels)
    })
}

/// Coarse loss plus final loss through the whole model, 2×2 grid, K=2.
fn full_model_item() -> Result<SuiteItem> {
    let model = Model::new(ModelConfig {
        layers: 2,
        d: 4,
        d_depth: 2,
        num_prompts: 2,
        selected: vec![1, 2],
        decoder_layers: 1,
        ..ModelConfig::default()
    })?;
    let mut params = model.init_params(5);
    randomize(&mut params, 5, 0.5);
    let stack = tiny_stack(2, 2, 4, 2, 5)?;
    let text = synth_text_bank(&classes(2), 5, 4)?;
    let labels = ClassMap::new(2, 2, vec![0, 1, 1, 0])?;
    check("full model (coarse + final loss)", &params, |g, p| {
        let fwd = model.forward(g, p, &stack, &text)?;
        Ok(model.loss(g, &fwd, &labels, 0.4)?.total)
    })
}

/// Negative control: `sum(x ⊙ detach(x))` has true gradient `2x` but the
/// tape reports `x`.
pub fn corrupted_fixture() -> Result<SuiteItem> {
    let x = Tensor::randn(&[4], 1.0, &mut ChaCha8Rng::seed_from_u64(77));
    let err = grad_check(
        |g, x| {
            let frozen = g.detach(x);
            let y = g.mul(x, frozen)?;
            Ok(g.sum(y))
        },
        &x,
        EPS,
    )?;
    Ok(SuiteItem {
        name: "corrupted backward fixture",
        max_rel_error: err,
        coordinates: 4,
    })
}
