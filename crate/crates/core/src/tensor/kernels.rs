//! Raw slice kernels shared by forward and backward passes.

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `x` transposed so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return x.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// (outer, extent, inner) decomposition around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize, temperature: f64) -> Vec<f64> {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n)
                .map(|j| x[base + j * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = ((x[base + j * inner] - max) / temperature).exp();
                y[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                y[base + j * inner] /= total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], gy: &[f64], shape: &[usize], axis: usize, temperature: f64) -> Vec<f64> {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n).map(|j| y[base + j * inner] * gy[base + j * inner]).sum();
            for j in 0..n {
                let k = base + j * inner;
                gx[k] = y[k] * (gy[k] - dot) / temperature;
            }
        }
    }
    gx
}

/// Same-padded 2-D convolution of `x[C×H×W]` with `k[O×C×kh×kw]`.
pub(crate) fn conv2d_forward(x: &[f64], xs: [usize; 3], k: &[f64], ks: [usize; 4]) -> Vec<f64> {
    let [c_in, h, w] = xs;
    let [c_out, _, kh, kw] = ks;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for c in 0..c_in {
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = k[((o * c_in + c) * kh + dy) * kw + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = (c * h + sy as usize) * w;
                        let dst_row = (o * h + y) * w;
                        for xx in 0..w {
                            let sx = xx as isize + dx as isize - pw as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[dst_row + xx] += kv * x[src_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    xs: [usize; 3],
    k: &[f64],
    ks: [usize; 4],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [c_in, h, w] = xs;
    let [c_out, _, kh, kw] = ks;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for o in 0..c_out {
        for c in 0..c_in {
            for dy in 0..kh {
                for dx in 0..kw {
                    let ki = ((o * c_in + c) * kh + dy) * kw + dx;
                    let kv = k[ki];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = (c * h + sy as usize) * w;
                        let dst_row = (o * h + y) * w;
                        for xx in 0..w {
                            let sx = xx as isize + dx as isize - pw as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let g = gout[dst_row + xx];
                            acc += g * x[src_row + sx as usize];
                            gx[src_row + sx as usize] += g * kv;
                        }
                    }
                    gk[ki] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// Align-corners sampling table for one axis: `(lo, hi, weight_of_hi)` per output index.
pub(crate) fn align_corners_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = align_corners_table(h, oh);
    let tx = align_corners_table(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[(ch * oh + i) * ow + j] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = align_corners_table(h, oh);
    let tx = align_corners_table(w, ow);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = g[(ch * oh + i) * ow + j];
                plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                plane[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    gx
}
