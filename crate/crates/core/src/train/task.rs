//! Seeded synthetic segmentation task.
//!
//! Label maps are stripes overlaid with rectangles. Each pixel's visual
//! features carry `offset · t_c` for its class `c` (the class's text
//! embedding) on top of the provider noise, and its depth features carry a
//! class-keyed unit vector, so the labels are recoverable from the features.
//! Unseen classes only occur in evaluation images.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::ClassMap;
use crate::features::{synth_features, synth_text_bank, synth_text_embedding, tile_rng, FeatureStack, Modality, SynthConfig, TextBank};

/// Label vocabulary; the first `num_seen` are seen, the next `num_unseen` unseen.
pub const CLASS_NAMES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "vegetation",
    "sky",
    "car",
    "person",
    "truck",
    "terrain",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "rider",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Appearance shift applied to evaluation images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Clear,
    /// Lower contrast plus a per-image veil.
    Fog,
    /// Lower signal plus extra sensor noise.
    Night,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clear, Condition::Fog, Condition::Night];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clear => "clear",
            Condition::Fog => "fog",
            Condition::Night => "night",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition '{s}' (expected clear|fog|night)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub d: usize,
    pub d_depth: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub offset: f64,
    pub conditions: Vec<Condition>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_seen: 6,
            num_unseen: 3,
            height: 16,
            width: 16,
            layers: 6,
            d: 16,
            d_depth: 8,
            train_images: 8,
            eval_images: 4,
            offset: 0.5,
            conditions: Condition::ALL.to_vec(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_seen == 0 {
            return Err(Error::Config("task needs at least one seen class".into()));
        }
        if self.num_seen + self.num_unseen > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "at most {} classes available, asked for {}",
                CLASS_NAMES.len(),
                self.num_seen + self.num_unseen
            )));
        }
        if self.train_images == 0 {
            return Err(Error::Config("task needs at least one training image".into()));
        }
        self.synth().validate()
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            layers: self.layers,
            height: self.height,
            width: self.width,
            d: self.d,
            d_depth: self.d_depth,
        }
    }
}

/// One image's features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stack: FeatureStack,
    pub labels: ClassMap,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub cfg: TaskConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    /// One entry per configured condition.
    pub eval: Vec<(Condition, Vec<Sample>)>,
    train_bank: TextBank,
    eval_bank: TextBank,
}

impl SyntheticTask {
    pub fn new(cfg: TaskConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let all: Vec<String> = CLASS_NAMES[..cfg.num_seen + cfg.num_unseen]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let eval_bank = synth_text_bank(&all, seed, cfg.d)?;
        let train_bank = synth_text_bank(&all[..cfg.num_seen], seed, cfg.d)?;

        let seen: Vec<u32> = (0..cfg.num_seen as u32).collect();
        let everything: Vec<u32> = (0..(cfg.num_seen + cfg.num_unseen) as u32).collect();
        let unseen = &everything[cfg.num_seen..];

        let mut train = Vec::with_capacity(cfg.train_images);
        for i in 0..cfg.train_images {
            let id = format!("train-{i:04}");
            let labels = generate_labels(&id, &cfg, seed, &seen, &[])?;
            train.push(make_sample(&id, labels, &cfg, seed, &eval_bank, Condition::Clear)?);
        }
        let mut eval = Vec::with_capacity(cfg.conditions.len());
        for &cond in &cfg.conditions {
            let mut samples = Vec::with_capacity(cfg.eval_images);
            for i in 0..cfg.eval_images {
                let id = format!("eval-{i:04}");
                let labels = generate_labels(&id, &cfg, seed, &everything, unseen)?;
                samples.push(make_sample(&id, labels, &cfg, seed, &eval_bank, cond)?);
            }
            eval.push((cond, samples));
        }
        Ok(Self {
            cfg,
            seed,
            train,
            eval,
            train_bank,
            eval_bank,
        })
    }

    /// Text bank of the seen classes, `K = num_seen`.
    pub fn train_bank(&self) -> &TextBank {
        &self.train_bank
    }

    /// Text bank of seen then unseen classes, `K′ = num_seen + num_unseen`.
    pub fn eval_bank(&self) -> &TextBank {
        &self.eval_bank
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.cfg.num_seen).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (self.cfg.num_seen..self.cfg.num_seen + self.cfg.num_unseen).collect()
    }

    /// Regenerates the training features and checks they match the stored
    /// copies bit for bit and are still non-trainable.
    pub fn verify_frozen(&self) -> Result<()> {
        for (i, s) in self.train.iter().enumerate() {
            let id = format!("train-{i:04}");
            let fresh = make_sample(&id, s.labels.clone(), &self.cfg, self.seed, &self.eval_bank, Condition::Clear)?;
            for l in 1..=s.stack.num_layers() {
                for (what, a, b) in [
                    ("visual", s.stack.visual(l), fresh.stack.visual(l)),
                    ("depth", s.stack.depth(l), fresh.stack.depth(l)),
                ] {
                    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                    if !same || a.requires_grad() || a.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                        return Err(Error::Contract(format!("provider tensor {id}/{what}/layer {l} changed")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn generate_labels(id: &str, cfg: &TaskConfig, seed: u64, classes: &[u32], must_include: &[u32]) -> Result<ClassMap> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = tile_rng(id, 0, Modality::Text, seed ^ 0x6c61_6265_6c73);
    let mut map = ClassMap::filled(h, w, 0);
    let horizontal = rng.random_bool(0.5);
    let bands = rng.random_range(2..=3usize);
    let band_classes: Vec<u32> = (0..bands).map(|_| classes[rng.random_range(0..classes.len())]).collect();
    for y in 0..h {
        for x in 0..w {
            let pos = if horizontal { y * bands / h } else { x * bands / w };
            map.set(y, x, band_classes[pos]);
        }
    }
    let rects = rng.random_range(1..=3usize).max(must_include.len());
    for r in 0..rects {
        let c = must_include
            .get(r)
            .copied()
            .unwrap_or_else(|| classes[rng.random_range(0..classes.len())]);
        let rh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                map.set(y, x, c);
            }
        }
    }
    Ok(map)
}

/// Class-keyed unit vector added to depth features.
pub fn depth_key(label: &str, seed: u64, d_depth: usize) -> Vec<f64> {
    synth_text_embedding(&format!("depth of {label}"), seed, d_depth)
}

fn make_sample(id: &str, labels: ClassMap, cfg: &TaskConfig, seed: u64, bank: &TextBank, cond: Condition) -> Result<Sample> {
    let mut stack = synth_features(id, &cfg.synth(), seed)?;
    let depth_keys: Vec<Vec<f64>> = bank
        .classes()
        .iter()
        .map(|c| depth_key(c, seed, cfg.d_depth))
        .collect();
    let (d, dd) = (cfg.d, cfg.d_depth);
    let (visual, depth) = stack.layers_mut();
    for (l, (v, dp)) in visual.iter_mut().zip(depth.iter_mut()).enumerate() {
        let layer = l as u64 + 1;
        let mut cond_rng = tile_rng(&format!("{id}/{cond}"), layer, Modality::Visual, seed);
        let veil: Vec<f64> = {
            let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
            (0..d).map(|_| n.sample(&mut cond_rng)).collect()
        };
        let noise = Normal::new(0.0, 0.5 / (d as f64).sqrt()).expect("finite std");
        let vd = v.data_mut();
        let dpd = dp.data_mut();
        for (p, &c) in labels.data.iter().enumerate() {
            let t = bank.row(c as usize);
            let px = &mut vd[p * d..(p + 1) * d];
            for j in 0..d {
                let clean = px[j] + cfg.offset * t[j];
                let shifted = match cond {
                    Condition::Clear => clean,
                    Condition::Fog => 0.6 * clean + 0.4 * veil[j],
                    Condition::Night => 0.45 * clean + noise.sample(&mut cond_rng),
                };
                px[j] = shifted as f32 as f64;
            }
            let key = &depth_keys[c as usize];
            for j in 0..dd {
                let z = &mut dpd[p * dd + j];
                *z = (*z + cfg.offset * key[j]) as f32 as f64;
            }
        }
    }
    Ok(Sample { stack, labels })
}
