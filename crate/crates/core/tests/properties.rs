mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use vireo::config::RunConfig;
use vireo::eval::{miou, ClassMap, ConfusionMatrix};
use vireo::pgm;
use vireo::tensor::{Graph, Tensor};
use vireo::train::poly_lr;
use vireo::vfea::{Entry, Kind, VfeaFile};

fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=5, 1..=max_rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_lanes_sum_to_one(shape in shape_strategy(3), axis_pick in 0usize..3, temp in 0.05f64..5.0, seed in 0u64..1000) {
        let axis = axis_pick % shape.len();
        let x = Tensor::randn(&shape, 3.0, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax(v, axis, temp).unwrap();
        let y = g.value(s).clone();
        let ones = Tensor::ones(&{ let mut s = shape.clone(); s[axis] = 1; s });
        let summed = {
            let mut g = Graph::new();
            let v = g.constant(y.clone());
            let r = g.sum_axis(v, axis).unwrap();
            g.value(r).clone()
        };
        prop_assert!(summed.data().iter().zip(ones.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        prop_assert!(y.max_abs_diff(&softmax_oracle(&x, axis, temp)) < 1e-12);
    }

    #[test]
    fn contract_matches_loops(spec_idx in 0usize..CONTRACT_SPECS.len(), ext in prop::collection::vec(1usize..=4, 4), seed in 0u64..1000) {
        let spec = CONTRACT_SPECS[spec_idx];
        let (ins, _) = spec.split_once("->").unwrap();
        let (la, lb) = ins.split_once(',').unwrap();
        let mut labels: Vec<char> = la.chars().chain(lb.chars()).collect();
        labels.sort();
        labels.dedup();
        let shape = |s: &str| -> Vec<usize> { s.chars().map(|c| ext[labels.iter().position(|&l| l == c).unwrap()]).collect() };
        let mut r = rng(seed);
        let a = randn(&mut r, &shape(la));
        let b = randn(&mut r, &shape(lb));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.contract(va, vb, spec).unwrap();
        prop_assert!(g.value(out).max_abs_diff(&contract_oracle(&a, &b, spec)) < 1e-10);
    }

    #[test]
    fn confusion_matrix_ignores_image_order(seed in 0u64..10_000, images in 1usize..6, k in 1usize..6) {
        let mut r = rng(seed);
        let pairs: Vec<(ClassMap, ClassMap)> = (0..images)
            .map(|_| (random_map(&mut r, 3, 4, k), random_map(&mut r, 3, 4, k)))
            .collect();
        let mut forward = ConfusionMatrix::new(k);
        for (p, t) in &pairs {
            forward.update(p, t).unwrap();
        }
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut r);
        let mut merged = ConfusionMatrix::new(k);
        for (p, t) in &shuffled {
            let mut one = ConfusionMatrix::new(k);
            one.update(p, t).unwrap();
            merged.merge(&one).unwrap();
        }
        prop_assert_eq!(forward, merged);
    }

    #[test]
    fn miou_matches_pixel_sets(seed in 0u64..10_000, h in 1usize..10, w in 1usize..10, k in 1usize..8) {
        let mut r = rng(seed);
        let pred = random_map(&mut r, h, w, k);
        let truth = random_map(&mut r, h, w, k);
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&pred, &truth).unwrap();
        let got = miou(&cm, None);
        let (per_class, mean) = miou_set_oracle(&pred, &truth, k);
        prop_assert_eq!(got.per_class, per_class);
        prop_assert_eq!(got.mean, mean);
    }

    #[test]
    fn poly_lr_decreases_within_bounds(total in 1usize..500, lr0 in 0.0f64..1.0, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for t in 0..=total + 2 {
            let lr = poly_lr(t, total, lr0, power);
            prop_assert!((0.0..=lr0).contains(&lr));
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(0, total, lr0, power), lr0);
        prop_assert_eq!(poly_lr(total, total, lr0, power), 0.0);
    }

    #[test]
    fn vfea_roundtrip_and_corruption(seed in 0u64..1000, entries in 1usize..4, flip in any::<prop::sample::Index>()) {
        let mut r = rng(seed);
        let mut f = VfeaFile::new(Kind::FeatureStack);
        for i in 0..entries {
            let t = randn(&mut r, &[2, 3, i + 1]);
            f.entries.push(Entry::new(i as u32, t.shape().to_vec(), t.data().iter().map(|&x| x as f32).collect()));
        }
        let bytes = f.encode().unwrap();
        prop_assert_eq!(VfeaFile::decode(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        let at = flip.index(bad.len());
        bad[at] ^= 0x5a;
        prop_assert!(VfeaFile::decode(&bad).is_err(), "flip at byte {} went unnoticed", at);
        prop_assert!(VfeaFile::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn pgm_roundtrip(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
        let map = random_map(&mut rng(seed), h, w, 19);
        prop_assert_eq!(pgm::decode(&pgm::encode(&map).unwrap()).unwrap(), map);
    }

    #[test]
    fn config_text_roundtrip(iters in 1usize..5000, seed in any::<u64>(), lambda in 0.0f64..2.0, prompts in 1usize..9) {
        let mut cfg = RunConfig::desk();
        cfg.train.total_iters = iters;
        cfg.train.seed = seed;
        cfg.train.lambda_c = lambda;
        cfg.model.num_prompts = prompts;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back.model.selected_layers(), cfg.model.selected_layers());
        prop_assert_eq!(back.train, cfg.train);
    }
}

#[test]
fn bilinear_same_size_and_identity_kernel() {
    let x = randn(&mut rng(1), &[2, 3, 4]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let same = g.bilinear_resize(v, 3, 4).unwrap();
    assert_eq!(g.value(same).data(), x.data());
    let mut k = Tensor::zeros(&[2, 2, 3, 3]);
    k.data_mut()[4] = 1.0;
    k.data_mut()[18 + 9 + 4] = 1.0;
    let kv = g.constant(k);
    let y = g.conv2d(v, kv, None).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}
