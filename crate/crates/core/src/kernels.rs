//! Raw forward/backward loops on flat row-major buffers.
//!
//! The graph layer owns shapes and bookkeeping; these functions assume their
//! arguments were validated. Inner loops run along contiguous image rows so
//! they vectorize, and every reduction has a fixed order so results are
//! reproducible bit for bit.

use crate::real::Real;

/// Dot product with eight independent accumulators in a fixed combine order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Geometry of a "same"-padded stride-1 convolution over one image.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    /// For kernel offset `d` (in -pad..=pad), the output index range whose
    /// source index `o + d` lies inside `0..n`.
    #[inline]
    fn valid(n: usize, d: isize) -> (usize, usize) {
        let lo = if d < 0 { (-d) as usize } else { 0 };
        let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
        (lo.min(hi), hi)
    }
}

/// Position-major patch matrix: row `p` holds the `c_in * k * k` inputs seen
/// by output pixel `p`, in kernel layout order. Out-of-image taps are left
/// untouched, so `col` must arrive zeroed.
fn im2col_t<T: Real>(g: ConvGeom, input: &[T], col: &mut [T]) {
    let ConvGeom { c_in, h, w, k, .. } = g;
    let pad = (k / 2) as isize;
    let r = c_in * k * k;
    for ci in 0..c_in {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = ConvGeom::valid(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = ConvGeom::valid(w, dx);
                let j = (ci * k + ky) * k + kx;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    for x in x0..x1 {
                        col[(y * w + x) * r + j] = src[sy * w + (x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

fn col2im_t<T: Real>(g: ConvGeom, col: &[T], grad_in: &mut [T]) {
    let ConvGeom { c_in, h, w, k, .. } = g;
    let pad = (k / 2) as isize;
    let r = c_in * k * k;
    for ci in 0..c_in {
        let dst = &mut grad_in[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = ConvGeom::valid(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = ConvGeom::valid(w, dx);
                let j = (ci * k + ky) * k + kx;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    for x in x0..x1 {
                        dst[sy * w + (x as isize + dx) as usize] += col[(y * w + x) * r + j];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let plane = g.h * g.w;
    let r = g.c_in * g.k * g.k;
    let mut col = alloc::vec![T::zero(); plane * r];
    im2col_t(g, input, &mut col);
    for co in 0..g.c_out {
        let wrow = &kernel[co * r..(co + 1) * r];
        let b = bias.map_or(T::zero(), |b| b[co]);
        let o = &mut out[co * plane..(co + 1) * plane];
        for (p, v) in o.iter_mut().enumerate() {
            *v = b + dot(wrow, &col[p * r..(p + 1) * r]);
        }
    }
}

pub fn conv2d_backward<T: Real>(
    g: ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let plane = g.h * g.w;
    let r = g.c_in * g.k * g.k;
    if let Some(gb) = grad_bias {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
        }
    }
    if let Some(gk) = grad_kernel {
        let mut col = alloc::vec![T::zero(); plane * r];
        im2col_t(g, input, &mut col);
        for co in 0..g.c_out {
            let go = &grad_out[co * plane..(co + 1) * plane];
            let gw = &mut gk[co * r..(co + 1) * r];
            for (p, &d) in go.iter().enumerate() {
                if d != T::zero() {
                    axpy(d, &col[p * r..(p + 1) * r], gw);
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        let mut gcol = alloc::vec![T::zero(); plane * r];
        for p in 0..plane {
            let gc = &mut gcol[p * r..(p + 1) * r];
            for co in 0..g.c_out {
                let d = grad_out[co * plane + p];
                if d != T::zero() {
                    axpy(d, &kernel[co * r..(co + 1) * r], gc);
                }
            }
        }
        col2im_t(g, &gcol, gi);
    }
}

/// 2x2 stride-2 max pooling. `argmax` receives, per output, the flat input
/// index of the first maximum in row-major window order.
pub fn maxpool2_forward<T: Real>(c: usize, h: usize, w: usize, input: &[T], out: &mut [T], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2. Kernel layout is
/// `[c_out, c_in, 2, 2]`; output extents are exactly doubled.
pub fn upconv2_forward<T: Real>(
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let plane = h * w;
    let mut row = alloc::vec![T::zero(); w];
    for co in 0..c_out {
        let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
        let b = bias.map_or(T::zero(), |b| b[co]);
        o.iter_mut().for_each(|v| *v = b);
        for a in 0..2 {
            for bb in 0..2 {
                for y in 0..h {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    for ci in 0..c_in {
                        let wv = kernel[((co * c_in + ci) * 2 + a) * 2 + bb];
                        axpy(wv, &input[ci * plane + y * w..ci * plane + (y + 1) * w], &mut row);
                    }
                    let orow = &mut o[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                    for x in 0..w {
                        orow[2 * x + bb] += row[x];
                    }
                }
            }
        }
    }
}

pub fn upconv2_backward<T: Real>(
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let (oh, ow) = (2 * h, 2 * w);
    let plane = h * w;
    if let Some(gb) = grad_bias {
        for co in 0..c_out {
            gb[co] += grad_out[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
        }
    }
    // Gather the strided output gradient for each (a, b) phase into a dense
    // h*w plane once, then everything is dot/axpy on contiguous rows.
    let mut phase = alloc::vec![T::zero(); plane];
    for co in 0..c_out {
        let go = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for a in 0..2 {
            for bb in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        phase[y * w + x] = go[(2 * y + a) * ow + 2 * x + bb];
                    }
                }
                for ci in 0..c_in {
                    let kidx = ((co * c_in + ci) * 2 + a) * 2 + bb;
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        gk[kidx] += dot(&phase, &input[ci * plane..(ci + 1) * plane]);
                    }
                    if let Some(gi) = grad_in.as_deref_mut() {
                        axpy(kernel[kidx], &phase, &mut gi[ci * plane..(ci + 1) * plane]);
                    }
                }
            }
        }
    }
}

/// `out = weight · x + bias` with `weight` laid out `[out, in]`.
pub fn dense_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot(&weight[o * n_in..(o + 1) * n_in], x) + bias.map_or(T::zero(), |b| b[o]);
    }
}

pub fn dense_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let n_in = x.len();
    if let Some(gw) = grad_w {
        for (o, &g) in grad_out.iter().enumerate() {
            axpy(g, x, &mut gw[o * n_in..(o + 1) * n_in]);
        }
    }
    if let Some(gx) = grad_x {
        for (o, &g) in grad_out.iter().enumerate() {
            axpy(g, &weight[o * n_in..(o + 1) * n_in], gx);
        }
    }
    if let Some(gb) = grad_b {
        for (b, &g) in gb.iter_mut().zip(grad_out) {
            *b += g;
        }
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial plane followed by an affine map.
/// Fills `xhat` and `inv_std` for the backward pass.
pub fn instance_norm_forward<T: Real>(
    c: usize,
    plane: usize,
    input: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    xhat: &mut [T],
    inv_std: &mut [T],
) {
    let n = T::of(plane as f64);
    let eps = T::of(INSTANCE_NORM_EPS);
    for ch in 0..c {
        let x = &input[ch * plane..(ch + 1) * plane];
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let xh = &mut xhat[ch * plane..(ch + 1) * plane];
        let o = &mut out[ch * plane..(ch + 1) * plane];
        for i in 0..plane {
            xh[i] = (x[i] - mean) * is;
            o[i] = gamma[ch] * xh[i] + beta[ch];
        }
    }
}

pub fn instance_norm_backward<T: Real>(
    c: usize,
    plane: usize,
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    mut grad_gamma: Option<&mut [T]>,
    mut grad_beta: Option<&mut [T]>,
) {
    let n = T::of(plane as f64);
    let mut grad_in = grad_in;
    for ch in 0..c {
        let go = &grad_out[ch * plane..(ch + 1) * plane];
        let xh = &xhat[ch * plane..(ch + 1) * plane];
        let sum_g = go.iter().copied().sum::<T>();
        let sum_gx = dot(go, xh);
        if let Some(gg) = grad_gamma.as_deref_mut() {
            gg[ch] += sum_gx;
        }
        if let Some(gb) = grad_beta.as_deref_mut() {
            gb[ch] += sum_g;
        }
        if let Some(gi) = grad_in.as_deref_mut() {
            let k = gamma[ch] * inv_std[ch] / n;
            let gi = &mut gi[ch * plane..(ch + 1) * plane];
            for i in 0..plane {
                gi[i] += k * (n * go[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
}

/// Softmax across the leading axis: `input` is `[c, positions]`.
pub fn softmax_axis0_forward<T: Real>(c: usize, positions: usize, input: &[T], out: &mut [T]) {
    let mut maxv = alloc::vec![T::neg_infinity(); positions];
    for ch in 0..c {
        for p in 0..positions {
            maxv[p] = maxv[p].max(input[ch * positions + p]);
        }
    }
    let mut sum = alloc::vec![T::zero(); positions];
    for ch in 0..c {
        for p in 0..positions {
            let e = (input[ch * positions + p] - maxv[p]).exp();
            out[ch * positions + p] = e;
            sum[p] += e;
        }
    }
    for ch in 0..c {
        for p in 0..positions {
            out[ch * positions + p] /= sum[p];
        }
    }
}

pub fn softmax_axis0_backward<T: Real>(c: usize, positions: usize, out: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let mut inner = alloc::vec![T::zero(); positions];
    for ch in 0..c {
        for p in 0..positions {
            inner[p] += grad_out[ch * positions + p] * out[ch * positions + p];
        }
    }
    for ch in 0..c {
        for p in 0..positions {
            let i = ch * positions + p;
            grad_in[i] += out[i] * (grad_out[i] - inner[p]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum_order_independent_of_length() {
        let a: alloc::vec::Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: alloc::vec::Vec<f64> = (0..19).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn conv_valid_ranges() {
        assert_eq!(ConvGeom::valid(4, -1), (1, 4));
        assert_eq!(ConvGeom::valid(4, 1), (0, 3));
        assert_eq!(ConvGeom::valid(1, 1), (0, 0));
    }
}
