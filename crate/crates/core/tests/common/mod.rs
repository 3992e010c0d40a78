//! Brute-force loop oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vireo::cmpe::{class_aggregate, query_priors};
use vireo::eval::{ClassMap, IGNORE_ID};
use vireo::head::final_prediction;
use vireo::tensor::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn offset(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Every assignment of `extents` in odometer order.
pub fn odometer(extents: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = extents.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut cur = vec![0; extents.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for a in (0..extents.len()).rev() {
            cur[a] += 1;
            if cur[a] < extents[a] {
                break;
            }
            cur[a] = 0;
        }
    }
    out
}

/// Einstein summation by enumerating every label assignment.
pub fn contract_oracle(a: &Tensor, b: &Tensor, spec: &str) -> Tensor {
    let (ins, out) = spec.split_once("->").unwrap();
    let (la, lb) = ins.split_once(',').unwrap();
    let (la, lb, lo): (Vec<char>, Vec<char>, Vec<char>) = (la.chars().collect(), lb.chars().collect(), out.chars().collect());
    let mut ext = BTreeMap::new();
    for (labels, t) in [(&la, a), (&lb, b)] {
        for (c, &n) in labels.iter().zip(t.shape()) {
            ext.insert(*c, n);
        }
    }
    let labels: Vec<char> = ext.keys().copied().collect();
    let extents: Vec<usize> = labels.iter().map(|c| ext[c]).collect();
    let out_shape: Vec<usize> = lo.iter().map(|c| ext[c]).collect();
    let mut data = vec![0.0; out_shape.iter().product()];
    let pick = |assign: &[usize], want: &[char]| -> Vec<usize> {
        want.iter().map(|c| assign[labels.iter().position(|l| l == c).unwrap()]).collect()
    };
    for assign in odometer(&extents) {
        let va = a.data()[offset(a.shape(), &pick(&assign, &la))];
        let vb = b.data()[offset(b.shape(), &pick(&assign, &lb))];
        data[offset(&out_shape, &pick(&assign, &lo))] += va * vb;
    }
    Tensor::from_vec(out_shape, data).unwrap()
}

/// Zero-padded same convolution, `x[C,H,W]`, `k[O,C,s,s]`.
pub fn conv2d_oracle(x: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [o, _, s, _] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let pad = (s / 2) as isize;
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for dy in 0..s {
                        for dx in 0..s {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k.at(&[oc, ic, dy, dx]) * x.at(&[ic, sy as usize, sx as usize]);
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::from_vec(vec![o, h, w], out).unwrap()
}

/// Align-corners bilinear sampling of `x[C,H,W]`.
pub fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (sy, sx) = (coord(i, h, oh), coord(j, w, ow));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = x.at(&[ch, y0, x0]) * (1.0 - fy) * (1.0 - fx)
                    + x.at(&[ch, y0, x1]) * (1.0 - fy) * fx
                    + x.at(&[ch, y1, x0]) * fy * (1.0 - fx)
                    + x.at(&[ch, y1, x1]) * fy * fx;
                out[(ch * oh + i) * ow + j] = v;
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out).unwrap()
}

/// Softmax of `x / temperature` along `axis`, computed lane by lane.
pub fn softmax_oracle(x: &Tensor, axis: usize, temperature: f64) -> Tensor {
    let shape = x.shape().to_vec();
    let mut out = vec![0.0; x.numel()];
    let mut lane_shape = shape.clone();
    lane_shape[axis] = 1;
    for base in odometer(&lane_shape) {
        let idx = |i: usize| {
            let mut ix = base.clone();
            ix[axis] = i;
            offset(&shape, &ix)
        };
        let max = (0..shape[axis]).map(|i| x.data()[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..shape[axis]).map(|i| ((x.data()[idx(i)] - max) / temperature).exp()).sum();
        for i in 0..shape[axis] {
            out[idx(i)] = ((x.data()[idx(i)] - max) / temperature).exp() / z;
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

/// `f[k,d] = Σ_{y,x} α[k,y,x] · fused[y,x,d]`.
pub fn class_aggregate_oracle(alpha: &Tensor, fused: &Tensor) -> Tensor {
    let [k, h, w] = [alpha.shape()[0], alpha.shape()[1], alpha.shape()[2]];
    let d = fused.shape()[2];
    let mut out = vec![0.0; k * d];
    for c in 0..k {
        for y in 0..h {
            for x in 0..w {
                for e in 0..d {
                    out[c * d + e] += alpha.at(&[c, y, x]) * fused.at(&[y, x, e]);
                }
            }
        }
    }
    Tensor::from_vec(vec![k, d], out).unwrap()
}

/// `q[j] = Σ_k softmax_k(⟨queries[j], e[k]⟩) · e[k]`.
pub fn query_priors_oracle(class_embeds: &Tensor, queries: &Tensor) -> Tensor {
    let (k, d) = (class_embeds.shape()[0], class_embeds.shape()[1]);
    let n = queries.shape()[0];
    let mut out = vec![0.0; n * d];
    for j in 0..n {
        let logits: Vec<f64> = (0..k)
            .map(|c| (0..d).map(|e| queries.at(&[j, e]) * class_embeds.at(&[c, e])).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for c in 0..k {
            let wgt = (logits[c] - max).exp() / z;
            for e in 0..d {
                out[j * d + e] += wgt * class_embeds.at(&[c, e]);
            }
        }
    }
    Tensor::from_vec(vec![n, d], out).unwrap()
}

/// `M̂[y,x,k] = Σ_d mask[y,x,d] · cls[k,d] / temperature`.
pub fn final_prediction_oracle(mask: &Tensor, cls: &Tensor, temperature: f64) -> Tensor {
    let [h, w, d] = [mask.shape()[0], mask.shape()[1], mask.shape()[2]];
    let k = cls.shape()[0];
    let mut out = vec![0.0; h * w * k];
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                let dot: f64 = (0..d).map(|e| mask.at(&[y, x, e]) * cls.at(&[c, e])).sum();
                out[(y * w + x) * k + c] = dot / temperature;
            }
        }
    }
    Tensor::from_vec(vec![h, w, k], out).unwrap()
}

/// Mean IoU from pixel sets: for each class, `|P ∩ T| / |P ∪ T|` over
/// pixels where neither map is ignored; classes with an empty union are
/// left out of the mean.
pub fn miou_set_oracle(pred: &ClassMap, truth: &ClassMap, k: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let valid: Vec<usize> = (0..pred.data.len())
        .filter(|&i| pred.data[i] != IGNORE_ID && truth.data[i] != IGNORE_ID)
        .collect();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k as u32 {
        let p: HashSet<usize> = valid.iter().copied().filter(|&i| pred.data[i] == c).collect();
        let t: HashSet<usize> = valid.iter().copied().filter(|&i| truth.data[i] == c).collect();
        let inter = p.intersection(&t).count();
        let union = p.union(&t).count();
        per_class.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per_class, mean)
}

/// Random map with ids below `k`, roughly one pixel in ten ignored.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> ClassMap {
    let data = (0..h * w)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE_ID
            } else {
                rng.random_range(0..k as u32)
            }
        })
        .collect();
    ClassMap::new(h, w, data).unwrap()
}

pub const ORACLE_TOL: f64 = 1e-10;
pub const ORACLE_SEEDS: u64 = 5;
const MAX_EXTENT: usize = 5;

/// Label sets exercised by the contraction oracle.
pub const CONTRACT_SPECS: [&str; 10] = [
    "ij,jk->ik",
    "ij,kj->ik",
    "bij,bjk->bik",
    "ij,ij->i",
    "i,j->ij",
    "hwd,kd->hwk",
    "np,nd->pd",
    "khw,hwd->kd",
    "ijk,kj->i",
    "ij,jk->ki",
];

fn run1(x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v);
    g.value(out).clone()
}

fn run2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, va, vb);
    g.value(out).clone()
}

fn check(name: &str, got: &Tensor, want: &Tensor, worst: &mut f64) -> Result<(), String> {
    if got.shape() != want.shape() {
        return Err(format!("{name}: shape {:?} vs oracle {:?}", got.shape(), want.shape()));
    }
    let diff = got.max_abs_diff(want);
    *worst = worst.max(diff);
    if diff > ORACLE_TOL {
        return Err(format!("{name}: differs from its oracle by {diff:e} at shape {:?}", got.shape()));
    }
    Ok(())
}

fn extents(n: usize) -> Vec<Vec<usize>> {
    odometer(&vec![MAX_EXTENT; n])
        .into_iter()
        .map(|v| v.into_iter().map(|e| e + 1).collect())
        .collect()
}

/// Every kernel against its loop oracle over all extents in `1..=5` and
/// five seeds. Returns `(comparisons, worst difference)`.
pub fn oracle_equivalence() -> Result<(usize, f64), String> {
    let mut count = 0;
    let mut worst = 0.0f64;
    for seed in 0..ORACLE_SEEDS {
        let mut r = rng(1000 + seed);
        for spec in CONTRACT_SPECS {
            let (ins, _) = spec.split_once("->").unwrap();
            let (la, lb) = ins.split_once(',').unwrap();
            let mut labels: Vec<char> = la.chars().chain(lb.chars()).collect();
            labels.sort();
            labels.dedup();
            for ext in extents(labels.len()) {
                let shape_of = |s: &str| -> Vec<usize> {
                    s.chars().map(|c| ext[labels.iter().position(|&l| l == c).unwrap()]).collect()
                };
                let a = randn(&mut r, &shape_of(la));
                let b = randn(&mut r, &shape_of(lb));
                let got = run2(&a, &b, |g, x, y| g.contract(x, y, spec).unwrap());
                check(&format!("contract {spec}"), &got, &contract_oracle(&a, &b, spec), &mut worst)?;
                count += 1;
            }
        }
        for size in [1usize, 3] {
            for e in extents(4) {
                let (c, o, h, w) = (e[0], e[1], e[2], e[3]);
                let x = randn(&mut r, &[c, h, w]);
                let k = randn(&mut r, &[o, c, size, size]);
                let b = randn(&mut r, &[o]);
                let mut g = Graph::new();
                let (vx, vk, vb) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
                let out = g.conv2d(vx, vk, Some(vb)).unwrap();
                check("conv2d", g.value(out), &conv2d_oracle(&x, &k, Some(&b)), &mut worst)?;
                count += 1;
            }
        }
        for e in extents(5) {
            let x = randn(&mut r, &[e[0], e[1], e[2]]);
            let got = run1(&x, |g, v| g.bilinear_resize(v, e[3], e[4]).unwrap());
            check("bilinear", &got, &bilinear_oracle(&x, e[3], e[4]), &mut worst)?;
            count += 1;
        }
        for rank in 1..=3 {
            for shape in extents(rank) {
                for axis in 0..rank {
                    let temp = [1.0, 0.5, 2.0][count % 3];
                    let x = randn(&mut r, &shape);
                    let got = run1(&x, |g, v| g.softmax(v, axis, temp).unwrap());
                    check("softmax", &got, &softmax_oracle(&x, axis, temp), &mut worst)?;
                    count += 1;
                }
            }
        }
        for e in extents(4) {
            let (k, h, w, d) = (e[0], e[1], e[2], e[3]);
            let logits = randn(&mut r, &[k, h * w]);
            let alpha = softmax_oracle(&logits, 1, 1.0).reshape(&[k, h, w]).unwrap();
            let fused = randn(&mut r, &[h, w, d]);
            let got = run2(&alpha, &fused, |g, a, f| class_aggregate(g, a, f).unwrap());
            check("class_aggregate", &got, &class_aggregate_oracle(&alpha, &fused), &mut worst)?;
            count += 1;
        }
        for e in extents(3) {
            let (n, k, d) = (e[0], e[1], e[2]);
            let emb = randn(&mut r, &[k, d]);
            let q = randn(&mut r, &[n, d]);
            let got = run2(&emb, &q, |g, a, b| query_priors(g, a, b).unwrap());
            check("query_priors", &got, &query_priors_oracle(&emb, &q), &mut worst)?;
            count += 1;
        }
        for e in extents(4) {
            let (h, w, d, k) = (e[0], e[1], e[2], e[3]);
            let mask = randn(&mut r, &[h, w, d]);
            let cls = randn(&mut r, &[k, d]);
            let temp = r.random_range(0.25..4.0);
            let got = run2(&mask, &cls, |g, a, b| final_prediction(g, a, b, temp).unwrap());
            check("final_prediction", &got, &final_prediction_oracle(&mask, &cls, temp), &mut worst)?;
            count += 1;
        }
    }
    Ok((count, worst))
}
