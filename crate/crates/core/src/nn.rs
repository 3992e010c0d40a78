//! Small building blocks shared by the prompt layers, the prior and the head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// How a freshly registered weight is filled.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Gaussian with std `1/sqrt(fan_in)` where fan_in is the first extent.
    FanIn,
    Identity,
}

pub(crate) fn register<R: Rng + ?Sized>(store: &mut ParamStore, name: String, shape: &[usize], init: Init, rng: &mut R) {
    let t = match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(v) => Tensor::full(shape, v),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::FanIn => Tensor::randn(shape, 1.0 / (shape[0].max(1) as f64).sqrt(), rng),
        Init::Identity => {
            assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs a square matrix");
            Tensor::eye(shape[0])
        }
    };
    store.insert(name, t);
}

/// Single-head scaled dot-product attention.
///
/// `q[n×d]`, `k[m×d]`, `v[m×e]` → `(out[n×e], weights[n×m])`; weights rows
/// sum to one.
pub(crate) fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g
        .shape(q)
        .last()
        .ok_or_else(|| Error::dim("attention query must be a matrix"))?;
    if g.shape(k).first() == Some(&0) {
        return Err(Error::dim("attention over an empty key set"));
    }
    let logits = g.contract(q, k, "nd,md->nm")?;
    let weights = g.softmax(logits, 1, (d as f64).sqrt())?;
    let out = g.contract(weights, v, "nm,me->ne")?;
    Ok((out, weights))
}

/// `relu(x·w1 + b1)·w2 + b2` for `x[n×d]`, parameters under `prefix`.
pub(crate) fn mlp2(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = g.linear(
        x,
        p.get(&format!("{prefix}.w1"))?,
        Some(p.get(&format!("{prefix}.b1"))?),
    )?;
    let h = g.relu(h);
    g.linear(
        h,
        p.get(&format!("{prefix}.w2"))?,
        Some(p.get(&format!("{prefix}.b2"))?),
    )
}

pub(crate) fn register_mlp2<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dims: (usize, usize, usize),
    out_init: Init,
    rng: &mut R,
) {
    let (i, h, o) = dims;
    register(store, format!("{prefix}.w1"), &[i, h], Init::FanIn, rng);
    register(store, format!("{prefix}.b1"), &[h], Init::Zeros, rng);
    register(store, format!("{prefix}.w2"), &[h, o], out_init, rng);
    register(store, format!("{prefix}.b2"), &[o], Init::Zeros, rng);
}

/// `[h, w, c]` map → `[h·w, c]` tokens.
pub(crate) fn tokens(g: &mut Graph, map: Var) -> Result<Var> {
    match *g.shape(map) {
        [h, w, c] => g.reshape(map, &[h * w, c]),
        ref s => Err(Error::dim(format!("expected an h×w×c map, got {s:?}"))),
    }
}

/// Bilinear resize of a channel-last `[h, w, c]` map.
pub(crate) fn resize_hwc(g: &mut Graph, map: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let &[h, w, _] = g.shape(map) else {
        return Err(Error::dim(format!("expected an h×w×c map, got {:?}", g.shape(map))));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(map);
    }
    let chw = g.permute(map, &[2, 0, 1])?;
    let resized = g.bilinear_resize(chw, out_h, out_w)?;
    g.permute(resized, &[1, 2, 0])
}
