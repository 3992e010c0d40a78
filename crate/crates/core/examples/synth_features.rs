//! Generates one synthetic feature stack and a text bank, writes them as
//! VFEA files and reads them back.

use vireo::features::{load_feature_file, synth_features, synth_text_bank, Loaded, SynthConfig};
use anyhow::Result;

fn main() -> Result<()> {
    let cfg = SynthConfig { layers: 6, height: 16, width: 16, d: 16, d_depth: 8 };
    let stack = synth_features("street-0001", &cfg, 42)?;
    for l in 1..=stack.num_layers() {
        println!("layer {l}: visual {:?}, depth {:?}", stack.visual(l).shape(), stack.depth(l).shape());
    }

    let classes: Vec<String> = ["road", "car", "sky", "building"].iter().map(|s| s.to_string()).collect();
    let bank = synth_text_bank(&classes, 42, cfg.d)?;
    for (k, name) in bank.classes().iter().enumerate() {
        let norm = bank.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name:>10}: \"{}\" |t| = {norm:.6}", bank.prompts()[k]);
    }

    let dir = std::env::temp_dir().join("vireo-synth-example");
    std::fs::create_dir_all(&dir)?;
    stack.save(&dir.join("street-0001.vfea"))?;
    bank.save(&dir.join("textbank.vfea"))?;
    match load_feature_file(&dir.join("street-0001.vfea"))? {
        Loaded::Stack(back) => println!("stack round-trip: {} layers, d={}", back.num_layers(), back.d()),
        _ => unreachable!(),
    }
    match load_feature_file(&dir.join("textbank.vfea"))? {
        Loaded::Text(back) => println!("text bank round-trip: {:?}", back.classes()),
        _ => unreachable!(),
    }
    Ok(())
}
