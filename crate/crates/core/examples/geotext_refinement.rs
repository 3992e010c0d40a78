//! Runs the prompt stack over a feature stack and reports how far each
//! selected layer moved the visual features.

use vireo::features::{synth_features, synth_text_bank, SynthConfig};
use vireo::model::{Model, ModelConfig};
use vireo::{Graph, Result};

fn main() -> Result<()> {
    let cfg = ModelConfig { layers: 6, d: 16, d_depth: 8, num_prompts: 4, ..ModelConfig::default() };
    let model = Model::new(cfg.clone())?;
    let mut params = model.init_params(3);
    // Output projections start at zero; perturb them so the refinement is visible.
    for (name, t) in params.iter_mut() {
        if name.starts_with("geotext.") && t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((i % 7) as f64 - 3.0));
        }
    }

    let synth = SynthConfig { layers: 6, height: 16, width: 16, d: 16, d_depth: 8 };
    let stack = synth_features("img", &synth, 1)?;
    let classes: Vec<String> = ["road", "car", "sky"].iter().map(|s| s.to_string()).collect();
    let bank = synth_text_bank(&classes, 1, 16)?;

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let fwd = model.forward(&mut g, &p, &stack, &bank)?;
    for ((layer, refined), lr) in fwd.stack.refined.iter().zip(&fwd.stack.layers) {
        let raw = stack.visual(*layer);
        let new = g.value(*refined);
        let shift = new.data().iter().zip(raw.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let va = g.value(lr.visual_attn);
        println!(
            "layer {layer}: grid {:?}, |refined - raw| = {shift:.4}, visual attention {:?}",
            &new.shape()[..2],
            va.shape()
        );
    }
    println!("final prompt shape {:?}", g.value(fwd.stack.final_prompt).shape());
    Ok(())
}
