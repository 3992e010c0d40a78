use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::einsum::ContractSpec;
use super::kernels;
use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Recip(Var),
    AddBias { x: Var, bias: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Contract { a: Var, b: Var, spec: ContractSpec },
    Softmax { x: Var, axis: usize, temperature: f64 },
    Conv2d { x: Var, kernel: Var, bias: Option<Var> },
    Bilinear(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, counted: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Recip(..) => "recip",
            Op::AddBias { .. } => "add_bias",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Contract { .. } => "contract",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Bilinear(..) => "bilinear_resize",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Per-forward-pass tape. Nodes are appended in execution order, which is a
/// topological order; [`Graph::backward`] walks it once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the tracked leaves after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    /// Accumulates the gradient of `v` into `target.grad`.
    pub fn write_to(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.leaves.get(&v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a tensor as a leaf; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t.detached(), Op::Leaf, tracked)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = if t.requires_grad() { t.detached() } else { t };
        self.push(value, Op::Constant, false)
    }

    /// Copy of `x` cut from the tape: gradient stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).detached();
        self.push(v, Op::Constant, false)
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::dim(format!(
                "{name}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let get = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(get(ta, i), get(tb, i))).collect();
        Ok((Tensor::from_vec(shape, data)?, tracked))
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    /// Elementwise product; one side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), data).expect("shape preserved");
        let tr = self.tracked(x);
        self.push(t, op, tr)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Elementwise `1/x`.
    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), f64::recip)
    }

    /// Adds `bias` (a vector) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let last = *tx.shape().last().ok_or_else(|| Error::dim("add_bias on a scalar"))?;
        if tb.shape() != [last] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} against last axis {last}",
                tb.shape()
            )));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % last])
            .collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let tr = self.tracked(x) || self.tracked(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, tr))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!("concat on axis {axis}: {:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let tr = inputs.iter().any(|&v| self.tracked(v));
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(shape.to_vec(), self.value(x).data().to_vec())?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tr))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("permute {axes:?} on rank {rank}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| tx.shape()[a]).collect();
        let data = kernels::permute(tx.data(), tx.shape(), axes);
        let t = Tensor::from_vec(shape, data)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, tr))
    }

    /// Einstein summation over two operands, e.g. `"hwd,kd->hwk"`.
    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let spec: ContractSpec = spec.parse()?;
        self.contract_with(a, b, spec)
    }

    pub fn contract_with(&mut self, a: Var, b: Var, spec: ContractSpec) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (data, shape) = spec.apply(ta.data(), ta.shape(), tb.data(), tb.shape())?;
        let t = Tensor::from_vec(shape, data)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Contract { a, b, spec }, tr))
    }

    /// `x[n×i] · w[i×o]`, optionally plus `bias[o]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.contract(x, w, "ni,io->no")?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Numerically stable softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::dim(format!("softmax axis {axis} on rank {}", tx.rank())));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!("softmax temperature {temperature} must be positive")));
        }
        if !tx.is_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let data = kernels::softmax_forward(tx.data(), tx.shape(), axis, temperature);
        let t = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Softmax { x, axis, temperature }, tr))
    }

    /// Same-padded convolution: `x[C×H×W]`, `kernel[O×C×k×k]` with `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (xs, ks) = match (tx.shape(), tk.shape()) {
            (&[c, h, w], &[o, ci, kh, kw]) => ([c, h, w], [o, ci, kh, kw]),
            (a, b) => return Err(Error::dim(format!("conv2d expects C×H×W and O×C×k×k, got {a:?} and {b:?}"))),
        };
        if xs[0] != ks[1] {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[0], ks[1]
            )));
        }
        if ks[2] != ks[3] || !matches!(ks[2], 1 | 3) {
            return Err(Error::dim(format!("conv2d kernel {}×{} unsupported (1 or 3)", ks[2], ks[3])));
        }
        let mut data = kernels::conv2d_forward(tx.data(), xs, tk.data(), ks);
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [ks[0]] {
                return Err(Error::dim(format!("conv2d bias {:?} for {} outputs", tb.shape(), ks[0])));
            }
            let plane = xs[1] * xs[2];
            for (i, v) in data.iter_mut().enumerate() {
                *v += tb.data()[i / plane];
            }
        }
        let t = Tensor::from_vec(vec![ks[0], xs[1], xs[2]], data)?;
        let tr = self.tracked(x) || self.tracked(kernel) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(t, Op::Conv2d { x, kernel, bias }, tr))
    }

    /// Align-corners bilinear resize of `x[C×h×w]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        let &[c, h, w] = tx.shape() else {
            return Err(Error::dim(format!("bilinear_resize expects C×H×W, got {:?}", tx.shape())));
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!("bilinear_resize {h}×{w} -> {out_h}×{out_w}")));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let data = kernels::bilinear_forward(tx.data(), c, h, w, out_h, out_w);
        let t = Tensor::from_vec(vec![c, out_h, out_w], data)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Bilinear(x), tr))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::dim(format!("sum_axis {axis} on rank {}", tx.rank())));
        }
        let (outer, n, inner) = kernels::split_at_axis(tx.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += tx.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_vec(shape, data)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::SumAxis { x, axis }, tr))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("mean_axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    /// Mean softmax cross-entropy of `logits[P×K]` over non-ignored rows.
    /// Returns 0 when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let &[p, k] = t.shape() else {
            return Err(Error::dim(format!("cross_entropy expects P×K logits, got {:?}", t.shape())));
        };
        if labels.len() != p {
            return Err(Error::dim(format!("{} labels for {p} logit rows", labels.len())));
        }
        let mut total = 0.0;
        let mut counted = 0;
        for (row, label) in labels.iter().enumerate() {
            let Some(c) = *label else { continue };
            if c >= k {
                return Err(Error::Validation(format!("label {c} at row {row} not below K={k}")));
            }
            let z = &t.data()[row * k..(row + 1) * k];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[c];
            counted += 1;
        }
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        let tr = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                counted,
            },
            tr,
        ))
    }

    /// First node whose value is not finite, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, gin) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gin),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.tracked && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.numel()]);
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn reduce_broadcast(&self, target: Var, g: Vec<f64>) -> Vec<f64> {
        if self.value(target).numel() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let y = &node.value;
        let val = |v: Var| self.value(v);
        let bval = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        Ok(match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, self.reduce_broadcast(*a, g.to_vec())),
                (*b, self.reduce_broadcast(*b, g.to_vec())),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.reduce_broadcast(*a, g.to_vec())),
                (*b, self.reduce_broadcast(*b, g.iter().map(|v| -v).collect())),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = (0..g.len()).map(|i| g[i] * bval(tb, i)).collect();
                let gb = (0..g.len()).map(|i| g[i] * bval(ta, i)).collect();
                vec![
                    (*a, self.reduce_broadcast(*a, ga)),
                    (*b, self.reduce_broadcast(*b, gb)),
                ]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => {
                let tx = val(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                vec![(*x, gx)]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(y.data()).map(|(gv, e)| gv * e).collect())],
            Op::Recip(x) => vec![(*x, g.iter().zip(y.data()).map(|(gv, r)| -gv * r * r).collect())],
            Op::AddBias { x, bias } => {
                let last = val(*bias).numel();
                let mut gb = vec![0.0; last];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % last] += gv;
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = kernels::split_at_axis(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut out = Vec::with_capacity(inputs.len());
                let mut start = 0;
                for &v in inputs {
                    let ext = val(v).shape()[*axis];
                    let mut gv = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let from = (o * total + start) * inner;
                        gv.extend_from_slice(&g[from..from + ext * inner]);
                    }
                    start += ext;
                    out.push((v, gv));
                }
                out
            }
            Op::Permute { x, axes } => {
                let gx = kernels::permute(g, y.shape(), &kernels::inverse_axes(axes));
                vec![(*x, gx)]
            }
            Op::Contract { a, b, spec } => {
                let (ta, tb) = (val(*a), val(*b));
                let (ga, _) = spec.lhs_grad().apply(g, y.shape(), tb.data(), tb.shape())?;
                let (gb, _) = spec.rhs_grad().apply(g, y.shape(), ta.data(), ta.shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax { x, axis, temperature } => {
                let gx = kernels::softmax_backward(y.data(), g, y.shape(), *axis, *temperature);
                vec![(*x, gx)]
            }
            Op::Conv2d { x, kernel, bias } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let xs = [tx.shape()[0], tx.shape()[1], tx.shape()[2]];
                let s = tk.shape();
                let (gx, gk) = kernels::conv2d_backward(tx.data(), xs, tk.data(), [s[0], s[1], s[2], s[3]], g);
                let mut out = vec![(*x, gx), (*kernel, gk)];
                if let Some(b) = bias {
                    let plane = xs[1] * xs[2];
                    let gb = g.chunks(plane).map(|c| c.iter().sum()).collect();
                    out.push((*b, gb));
                }
                out
            }
            Op::Bilinear(x) => {
                let s = val(*x).shape();
                let gx = kernels::bilinear_backward(g, s[0], s[1], s[2], y.shape()[1], y.shape()[2]);
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = kernels::split_at_axis(val(*x).shape(), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::CrossEntropy { logits, labels, counted } => {
                let tl = val(*logits);
                let k = tl.shape()[1];
                let mut gx = vec![0.0; tl.numel()];
                if *counted > 0 {
                    let scale = g[0] / *counted as f64;
                    for (row, label) in labels.iter().enumerate() {
                        let Some(c) = *label else { continue };
                        let z = &tl.data()[row * k..(row + 1) * k];
                        let p = kernels::softmax_forward(z, &[k], 0, 1.0);
                        for j in 0..k {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            gx[row * k + j] = scale * (p[j] - onehot);
                        }
                    }
                }
                vec![(*logits, gx)]
            }
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
