//! Shows the head on its own: logits for a label set, the argmax map, and
//! the same image scored against a larger label set.

use vireo::features::{synth_features, synth_text_bank, SynthConfig};
use vireo::head::argmax_classes;
use vireo::model::{Model, ModelConfig};
use vireo::Result;

fn main() -> Result<()> {
    let cfg = ModelConfig { layers: 6, d: 16, d_depth: 8, num_prompts: 4, ..ModelConfig::default() };
    let model = Model::new(cfg)?;
    let params = model.init_params(9);
    let synth = SynthConfig { layers: 6, height: 16, width: 16, d: 16, d_depth: 8 };
    let stack = synth_features("img", &synth, 9)?;

    for names in [&["road", "car", "sky"][..], &["road", "car", "sky", "bicycle", "train"][..]] {
        let classes: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let bank = synth_text_bank(&classes, 9, 16)?;
        let logits = model.predict(&params, &stack, &bank)?;
        let map = argmax_classes(&logits)?;
        let mut counts = vec![0usize; classes.len()];
        for y in 0..map.height {
            for x in 0..map.width {
                counts[map.get(y, x) as usize] += 1;
            }
        }
        println!("K={} logits {:?}", classes.len(), logits.shape());
        for (name, c) in classes.iter().zip(counts) {
            println!("  {name:>8}: {c} pixels");
        }
    }
    Ok(())
}
