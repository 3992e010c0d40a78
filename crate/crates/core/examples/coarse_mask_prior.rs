//! Inspects the coarse mask prior: the class map, its spatial weights and
//! the query priors it hands to the head.

use vireo::features::{synth_features, synth_text_bank, SynthConfig};
use vireo::model::{Model, ModelConfig};
use vireo::{Graph, Result};

fn main() -> Result<()> {
    let cfg = ModelConfig { layers: 6, d: 16, d_depth: 8, num_prompts: 4, ..ModelConfig::default() };
    let model = Model::new(cfg)?;
    let params = model.init_params(5);
    let synth = SynthConfig { layers: 6, height: 16, width: 16, d: 16, d_depth: 8 };
    let stack = synth_features("img", &synth, 5)?;
    let classes: Vec<String> = ["road", "sidewalk", "car", "sky"].iter().map(|s| s.to_string()).collect();
    let bank = synth_text_bank(&classes, 5, 16)?;

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let fwd = model.forward(&mut g, &p, &stack, &bank)?;
    let prior = fwd.prior.expect("prior enabled by default");
    let m = g.value(prior.coarse_map).clone();
    let alpha = g.value(prior.alpha).clone();
    let hw = m.shape()[1] * m.shape()[2];
    println!("coarse map {:?}, fused {:?}", m.shape(), g.value(prior.fused).shape());
    for (k, name) in classes.iter().enumerate() {
        let a = &alpha.data()[k * hw..(k + 1) * hw];
        let (peak, at) = a.iter().enumerate().fold((0.0, 0), |acc, (i, &v)| if v > acc.0 { (v, i) } else { acc });
        let sum: f64 = a.iter().sum();
        println!("{name:>9}: alpha sums to {sum:.12}, peak {peak:.4} at pixel {at}");
    }
    println!("query priors {:?}", g.value(prior.query_priors).shape());
    Ok(())
}
