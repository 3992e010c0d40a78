//! Frozen feature providers: per-layer visual and depth features and
//! precomputed text embeddings.
//!
//! The synthetic providers are counter-based: each `(image, layer, modality,
//! seed)` tile seeds its own generator, so any tile can be produced
//! independently and repeated calls are bit-identical. Feature values are
//! drawn in `f32` so a save/load cycle through VFEA is exact.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vfea::{Entry, Kind, VfeaFile, DEPTH_FLAG};

pub const PROMPT_TEMPLATE: &str = "a photo of a {}.";

static TEXT_BANK_BUILDS: AtomicUsize = AtomicUsize::new(0);

/// Number of text banks synthesized so far in this process.
pub fn text_bank_builds() -> usize {
    TEXT_BANK_BUILDS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Depth,
    Text,
}

impl Modality {
    fn tag(self) -> u64 {
        match self {
            Modality::Visual => 0x5649_5355,
            Modality::Depth => 0x4445_5054,
            Modality::Text => 0x5445_5854,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one independently computable tile.
pub fn tile_seed(key: &str, index: u64, modality: Modality, seed: u64) -> u64 {
    let mut h = splitmix(fnv1a(key.as_bytes()) ^ seed);
    h = splitmix(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d));
    splitmix(h ^ modality.tag())
}

pub(crate) fn tile_rng(key: &str, index: u64, modality: Modality, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tile_seed(key, index, modality, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub layers: usize,
    pub height: usize,
    pub width: usize,
    pub d: usize,
    pub d_depth: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.height == 0 || self.width == 0 || self.d == 0 || self.d_depth == 0 {
            return Err(Error::Config(format!("all synthetic feature extents must be ≥ 1: {self:?}")));
        }
        Ok(())
    }
}

/// Visual and depth features of one image, layers `1..=L`, each `[h, w, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub image_id: String,
    visual: Vec<Tensor>,
    depth: Vec<Tensor>,
}

impl FeatureStack {
    pub fn new(image_id: impl Into<String>, visual: Vec<Tensor>, depth: Vec<Tensor>) -> Result<Self> {
        if visual.is_empty() || visual.len() != depth.len() {
            return Err(Error::Validation(format!(
                "feature stack needs matching non-empty visual/depth layers ({} vs {})",
                visual.len(),
                depth.len()
            )));
        }
        let d = visual[0].shape().get(2).copied();
        let dd = depth[0].shape().get(2).copied();
        for (i, (v, dp)) in visual.iter().zip(&depth).enumerate() {
            if v.rank() != 3 || dp.rank() != 3 {
                return Err(Error::dim(format!("layer {} tensors must be h×w×c", i + 1)));
            }
            if v.shape()[..2] != dp.shape()[..2] {
                return Err(Error::dim(format!(
                    "layer {}: visual {:?} and depth {:?} grids differ",
                    i + 1,
                    v.shape(),
                    dp.shape()
                )));
            }
            if v.shape().get(2).copied() != d || dp.shape().get(2).copied() != dd {
                return Err(Error::dim(format!("layer {} changes the embedding width", i + 1)));
            }
            if v.requires_grad() || dp.requires_grad() {
                return Err(Error::Validation(format!("layer {} is marked trainable", i + 1)));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            visual,
            depth,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.visual.len()
    }

    pub fn d(&self) -> usize {
        self.visual[0].shape()[2]
    }

    pub fn d_depth(&self) -> usize {
        self.depth[0].shape()[2]
    }

    /// Visual features of 1-based layer `l`.
    pub fn visual(&self, l: usize) -> &Tensor {
        &self.visual[l - 1]
    }

    pub fn depth(&self, l: usize) -> &Tensor {
        &self.depth[l - 1]
    }

    pub(crate) fn layers_mut(&mut self) -> (&mut [Tensor], &mut [Tensor]) {
        (&mut self.visual, &mut self.depth)
    }

    pub fn to_vfea(&self) -> VfeaFile {
        let mut f = VfeaFile::new(Kind::FeatureStack);
        let to_f32 = |t: &Tensor| t.data().iter().map(|&v| v as f32).collect::<Vec<_>>();
        for (i, t) in self.visual.iter().enumerate() {
            f.entries.push(Entry::new(i as u32 + 1, t.shape().to_vec(), to_f32(t)));
        }
        for (i, t) in self.depth.iter().enumerate() {
            f.entries.push(Entry::new((i as u32 + 1) | DEPTH_FLAG, t.shape().to_vec(), to_f32(t)));
        }
        f
    }

    pub fn from_vfea(image_id: impl Into<String>, f: &VfeaFile) -> Result<Self> {
        if f.kind != Kind::FeatureStack {
            return Err(Error::Format(format!("expected a feature stack, found {}", f.kind)));
        }
        let mut visual = Vec::new();
        let mut depth = Vec::new();
        for e in &f.entries {
            let t = Tensor::from_vec(e.shape.clone(), e.data.iter().map(|&v| v as f64).collect())?;
            if e.id & DEPTH_FLAG != 0 {
                depth.push((e.id & !DEPTH_FLAG, t));
            } else {
                visual.push((e.id, t));
            }
        }
        visual.sort_by_key(|(id, _)| *id);
        depth.sort_by_key(|(id, _)| *id);
        for (layers, what) in [(&visual, "visual"), (&depth, "depth")] {
            for (i, (id, _)) in layers.iter().enumerate() {
                if *id as usize != i + 1 {
                    return Err(Error::Validation(format!(
                        "{what} layer ids must form 1..L, found {id} at position {}",
                        i + 1
                    )));
                }
            }
        }
        Self::new(
            image_id,
            visual.into_iter().map(|(_, t)| t).collect(),
            depth.into_iter().map(|(_, t)| t).collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_vfea().write(path)
    }
}

fn gaussian_f32(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0f32, std as f32).expect("finite std");
    (0..n).map(|_| normal.sample(rng) as f64).collect()
}

/// Deterministic stand-in for the frozen visual and depth encoders.
///
/// Entries are Gaussian with standard deviation `1/sqrt(width)` so that a
/// pixel's feature vector has roughly unit norm.
pub fn synth_features(image_id: &str, config: &SynthConfig, seed: u64) -> Result<FeatureStack> {
    config.validate()?;
    let SynthConfig {
        layers,
        height: h,
        width: w,
        d,
        d_depth,
    } = *config;
    let mut visual = Vec::with_capacity(layers);
    let mut depth = Vec::with_capacity(layers);
    for l in 1..=layers {
        let mut rng = tile_rng(image_id, l as u64, Modality::Visual, seed);
        visual.push(Tensor::from_vec(
            vec![h, w, d],
            gaussian_f32(&mut rng, h * w * d, 1.0 / (d as f64).sqrt()),
        )?);
        let mut rng = tile_rng(image_id, l as u64, Modality::Depth, seed);
        depth.push(Tensor::from_vec(
            vec![h, w, d_depth],
            gaussian_f32(&mut rng, h * w * d_depth, 1.0 / (d_depth as f64).sqrt()),
        )?);
    }
    FeatureStack::new(image_id, visual, depth)
}

/// Class labels, their prompt strings and unit-norm embeddings `[K, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    classes: Vec<String>,
    prompts: Vec<String>,
    embeddings: Tensor,
}

impl TextBank {
    pub fn new(classes: Vec<String>, embeddings: Tensor) -> Result<Self> {
        validate_labels(&classes)?;
        if embeddings.rank() != 2 || embeddings.shape()[0] != classes.len() {
            return Err(Error::dim(format!(
                "{} classes but embeddings of shape {:?}",
                classes.len(),
                embeddings.shape()
            )));
        }
        let mut embeddings = embeddings;
        embeddings.set_requires_grad(false);
        let prompts = classes.iter().map(|c| prompt_for(c)).collect();
        Ok(Self {
            classes,
            prompts,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn d(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.d();
        &self.embeddings.data()[k * d..(k + 1) * d]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Bank whose row `i` is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::dim(format!("permutation of length {} for K={}", perm.len(), self.len())));
        }
        let classes = perm.iter().map(|&i| self.classes[i].clone()).collect();
        let data = perm.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        Self::new(classes, Tensor::from_vec(vec![self.len(), self.d()], data)?)
    }

    pub fn to_vfea(&self) -> VfeaFile {
        let mut f = VfeaFile::new(Kind::TextBank);
        for k in 0..self.len() {
            f.entries.push(Entry::new(
                k as u32,
                vec![self.d()],
                self.row(k).iter().map(|&v| v as f32).collect(),
            ));
        }
        f
    }

    pub fn from_vfea(f: &VfeaFile, labels: Option<Vec<String>>) -> Result<Self> {
        if f.kind != Kind::TextBank {
            return Err(Error::Format(format!("expected a text bank, found {}", f.kind)));
        }
        let mut rows: Vec<&Entry> = f.entries.iter().collect();
        rows.sort_by_key(|e| e.id);
        let d = rows.first().map(|e| e.data.len()).unwrap_or(0);
        for (i, e) in rows.iter().enumerate() {
            if e.id as usize != i || e.shape != [d] {
                return Err(Error::Validation(format!(
                    "text entry {} must be class {i} with shape [{d}], got {:?}",
                    e.id, e.shape
                )));
            }
        }
        let labels = labels.unwrap_or_else(|| (0..rows.len()).map(|i| format!("class_{i}")).collect());
        if labels.len() != rows.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} embeddings",
                labels.len(),
                rows.len()
            )));
        }
        let data = rows.iter().flat_map(|e| e.data.iter().map(|&v| v as f64)).collect();
        Self::new(labels, Tensor::from_vec(vec![rows.len(), d], data)?)
    }

    /// Writes `path` plus a `.labels` sidecar with one label per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_vfea().write(path)?;
        let side = labels_path(path);
        std::fs::write(&side, self.classes.join("\n") + "\n").map_err(|e| Error::io(side, e))
    }
}

pub fn labels_path(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

pub fn prompt_for(label: &str) -> String {
    PROMPT_TEMPLATE.replace("{}", label)
}

fn validate_labels(classes: &[String]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Validation("text bank needs at least one class".into()));
    }
    let mut seen = HashSet::new();
    for c in classes {
        if c.is_empty() {
            return Err(Error::Validation("empty class label".into()));
        }
        if !seen.insert(c.as_str()) {
            return Err(Error::Validation(format!("duplicate class label '{c}'")));
        }
    }
    Ok(())
}

/// Unit-norm synthetic text embedding for one label.
pub fn synth_text_embedding(label: &str, seed: u64, d: usize) -> Vec<f64> {
    let mut rng = tile_rng(&prompt_for(label), 0, Modality::Text, seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut row: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter_mut().for_each(|v| *v /= norm);
    row
}

/// Stand-in for the frozen text encoder. Each row depends only on its
/// label and `seed`, so reordering the labels reorders the rows.
pub fn synth_text_bank(classes: &[String], seed: u64, d: usize) -> Result<TextBank> {
    validate_labels(classes)?;
    if d == 0 {
        return Err(Error::Config("text embedding width must be ≥ 1".into()));
    }
    TEXT_BANK_BUILDS.fetch_add(1, Ordering::Relaxed);
    let data = classes.iter().flat_map(|c| synth_text_embedding(c, seed, d)).collect();
    TextBank::new(classes.to_vec(), Tensor::from_vec(vec![classes.len(), d], data)?)
}

type BankKey = (Vec<String>, u64, usize);

/// Builds each class set's embeddings once and hands out shared copies.
#[derive(Debug, Default)]
pub struct TextBankCache {
    banks: Mutex<HashMap<BankKey, Arc<TextBank>>>,
    builds: AtomicUsize,
}

impl TextBankCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, classes: &[String], seed: u64, d: usize) -> Result<Arc<TextBank>> {
        let key = (classes.to_vec(), seed, d);
        let mut banks = self.banks.lock().expect("text bank cache poisoned");
        if let Some(b) = banks.get(&key) {
            return Ok(Arc::clone(b));
        }
        let bank = Arc::new(synth_text_bank(classes, seed, d)?);
        self.builds.fetch_add(1, Ordering::Relaxed);
        banks.insert(key, Arc::clone(&bank));
        Ok(bank)
    }

    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }
}

/// Contents of a VFEA file on disk.
#[derive(Clone, Debug)]
pub enum Loaded {
    Stack(FeatureStack),
    Text(TextBank),
    Tensors(VfeaFile),
}

/// Reads a VFEA file. Text banks pick up labels from the `.labels` sidecar
/// when present.
pub fn load_feature_file(path: &Path) -> Result<Loaded> {
    let f = VfeaFile::read(path)?;
    match f.kind {
        Kind::FeatureStack => {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Loaded::Stack(FeatureStack::from_vfea(id, &f)?))
        }
        Kind::TextBank => {
            let side = labels_path(path);
            let labels = match std::fs::read_to_string(&side) {
                Ok(s) => Some(s.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => return Err(Error::io(side, e)),
            };
            Ok(Loaded::Text(TextBank::from_vfea(&f, labels)?))
        }
        Kind::Parameters => Ok(Loaded::Tensors(f)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn cfg() -> SynthConfig {
        SynthConfig {
            layers: 4,
            height: 8,
            width: 8,
            d: 16,
            d_depth: 8,
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_features("img-a", &cfg(), 1).unwrap();
        let b = synth_features("img-a", &cfg(), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_is_keyed_by_image() {
        let a = synth_features("A", &cfg(), 1).unwrap();
        let b = synth_features("B", &cfg(), 1).unwrap();
        assert!(a.visual(1).max_abs_diff(b.visual(1)) > 0.0);
    }

    #[test]
    fn synth_shapes() {
        let s = synth_features("x", &cfg(), 0).unwrap();
        assert_eq!(s.num_layers(), 4);
        for l in 1..=4 {
            assert_eq!(s.visual(l).shape(), &[8, 8, 16]);
            assert_eq!(s.depth(l).shape(), &[8, 8, 8]);
            assert!(!s.visual(l).requires_grad());
        }
    }

    #[test]
    fn zero_extent_rejected() {
        let mut c = cfg();
        c.layers = 0;
        assert!(matches!(synth_features("x", &c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn text_rows_unit_norm() {
        let bank = synth_text_bank(&labels(&["road", "car", "sky"]), 0, 12).unwrap();
        for k in 0..bank.len() {
            let n: f64 = bank.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        assert_eq!(bank.prompts()[0], "a photo of a road.");
    }

    #[test]
    fn text_rows_order_independent() {
        let a = synth_text_bank(&labels(&["road", "car"]), 5, 8).unwrap();
        let b = synth_text_bank(&labels(&["car", "road"]), 5, 8).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn nineteen_classes_pairwise_distinct() {
        let names: Vec<String> = (0..19).map(|i| format!("class{i}")).collect();
        let bank = synth_text_bank(&names, 2, 32).unwrap();
        assert_eq!(bank.embeddings().shape(), &[19, 32]);
        for i in 0..19 {
            for j in i + 1..19 {
                let cos: f64 = bank.row(i).iter().zip(bank.row(j)).map(|(a, b)| a * b).sum();
                assert!((cos - 1.0).abs() > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(matches!(
            synth_text_bank(&labels(&["car", "car"]), 0, 4),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cache_builds_once_per_class_set() {
        let cache = TextBankCache::new();
        let l = labels(&["a", "b"]);
        let x = cache.get_or_build(&l, 0, 4).unwrap();
        let y = cache.get_or_build(&l, 0, 4).unwrap();
        assert!(Arc::ptr_eq(&x, &y));
        assert_eq!(cache.builds(), 1);
        cache.get_or_build(&labels(&["a", "b", "c"]), 0, 4).unwrap();
        assert_eq!(cache.builds(), 2);
    }

    #[test]
    fn stack_roundtrip_is_bit_identical() {
        let s = synth_features("img", &cfg(), 3).unwrap();
        let bytes = s.to_vfea().encode().unwrap();
        let back = FeatureStack::from_vfea("img", &VfeaFile::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_vfea().encode().unwrap(), bytes);
    }
}
