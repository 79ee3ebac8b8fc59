//! Stride-2 "same"-padded convolution kernels and their adjoints, shared by
//! the encoder (forward = downsampling conv) and the decoder (forward =
//! transposed conv, i.e. the adjoint scatter). All tensors are flat `f64`
//! slices in channel-major layout `[c][y][x]`.

/// Every layer halves the spatial size: `out = ceil(in / 2)`.
pub const STRIDE: usize = 2;

/// Per-layer spatial geometry. Padding follows the usual "same" rule for
/// stride 2: `pad_total = max((out−1)·2 + k − in, 0)`, split with the extra
/// pixel at bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same_stride2(in_h: usize, in_w: usize, k: usize) -> Self {
        let out_h = in_h.div_ceil(STRIDE);
        let out_w = in_w.div_ceil(STRIDE);
        let pad_h = ((out_h - 1) * STRIDE + k).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * STRIDE + k).saturating_sub(in_w);
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            k,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }
}

macro_rules! dispatch_k {
    ($k:expr, $fn:ident, $($arg:expr),*) => {
        match $k {
            3 => $fn::<3>($($arg),*),
            5 => $fn::<5>($($arg),*),
            k => panic!("unsupported kernel size {k}"),
        }
    };
}

/// y[oc] = bias[oc] + Σ_ic w[oc][ic] ⋆ x[ic], stride 2.
pub fn conv_fwd(
    x: &[f64],
    in_c: usize,
    w: &[f64],
    bias: &[f64],
    y: &mut [f64],
    out_c: usize,
    g: &ConvGeom,
) {
    dispatch_k!(g.k, conv_fwd_k, x, in_c, w, bias, y, out_c, g)
}

/// Adjoint with respect to the input: scatters `gy` (the small image)
/// through the kernel into `gx` (the large image). Also the forward pass of
/// a transposed convolution, minus the bias.
pub fn conv_bwd_input(
    gy: &[f64],
    out_c: usize,
    w: &[f64],
    gx: &mut [f64],
    in_c: usize,
    g: &ConvGeom,
) {
    dispatch_k!(g.k, conv_bwd_input_k, gy, out_c, w, gx, in_c, g)
}

/// Gradient with respect to the kernel: gw[oc][ic][ky][kx] accumulates
/// x[ic] against gy[oc] over all aligned positions. `gw` is accumulated
/// into, not overwritten.
pub fn conv_bwd_kernel(
    x: &[f64],
    in_c: usize,
    gy: &[f64],
    out_c: usize,
    gw: &mut [f64],
    g: &ConvGeom,
) {
    dispatch_k!(g.k, conv_bwd_kernel_k, x, in_c, gy, out_c, gw, g)
}

/// Sum of each channel plane; the bias gradient.
pub fn channel_sums(t: &[f64], c: usize, plane: usize, out: &mut [f64]) {
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        *o += t[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
    }
}

/// Interior column range [lo, hi) where every kernel tap is in bounds:
/// `ox·2 − pad ≥ 0` and `ox·2 − pad + K ≤ in_w`.
#[inline]
fn interior(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = g.pad_left.div_ceil(2);
    let hi = if g.in_w + g.pad_left >= k {
        (((g.in_w + g.pad_left - k) / 2) + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_fwd_k<const K: usize>(
    x: &[f64],
    in_c: usize,
    w: &[f64],
    bias: &[f64],
    y: &mut [f64],
    out_c: usize,
    g: &ConvGeom,
) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (ox_lo, ox_hi) = interior(g, K);
    for oc in 0..out_c {
        let ybase = oc * oh * ow;
        y[ybase..ybase + oh * ow].fill(bias[oc]);
        for ic in 0..in_c {
            let xbase = ic * ih * iw;
            let wbase = (oc * in_c + ic) * K * K;
            for ky in 0..K {
                let wrow: &[f64; K] = w[wbase + ky * K..wbase + ky * K + K].try_into().unwrap();
                for oy in 0..oh {
                    let iy = (oy * STRIDE + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let xrow = &x[xbase + iy as usize * iw..xbase + (iy as usize + 1) * iw];
                    let yrow = &mut y[ybase + oy * ow..ybase + (oy + 1) * ow];
                    for (ox, yv) in yrow.iter_mut().enumerate().take(ox_lo) {
                        *yv += edge_dot::<K>(wrow, xrow, ox, g.pad_left);
                    }
                    for (ox, yv) in yrow.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                        let ix0 = ox * STRIDE - g.pad_left;
                        let mut acc = 0.0;
                        for kx in 0..K {
                            acc += wrow[kx] * xrow[ix0 + kx];
                        }
                        *yv += acc;
                    }
                    for (ox, yv) in yrow.iter_mut().enumerate().skip(ox_hi) {
                        *yv += edge_dot::<K>(wrow, xrow, ox, g.pad_left);
                    }
                }
            }
        }
    }
}

#[inline]
fn edge_dot<const K: usize>(wrow: &[f64; K], xrow: &[f64], ox: usize, pad_left: usize) -> f64 {
    let ix0 = (ox * STRIDE) as isize - pad_left as isize;
    let mut acc = 0.0;
    for (kx, &wv) in wrow.iter().enumerate() {
        let ix = ix0 + kx as isize;
        if ix >= 0 && (ix as usize) < xrow.len() {
            acc += wv * xrow[ix as usize];
        }
    }
    acc
}

fn conv_bwd_input_k<const K: usize>(
    gy: &[f64],
    out_c: usize,
    w: &[f64],
    gx: &mut [f64],
    in_c: usize,
    g: &ConvGeom,
) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (ox_lo, ox_hi) = interior(g, K);
    gx.fill(0.0);
    for oc in 0..out_c {
        let ybase = oc * oh * ow;
        for ic in 0..in_c {
            let xbase = ic * ih * iw;
            let wbase = (oc * in_c + ic) * K * K;
            for ky in 0..K {
                let wrow: &[f64; K] = w[wbase + ky * K..wbase + ky * K + K].try_into().unwrap();
                for oy in 0..oh {
                    let iy = (oy * STRIDE + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let gxrow = &mut gx[xbase + iy as usize * iw..xbase + (iy as usize + 1) * iw];
                    let gyrow = &gy[ybase + oy * ow..ybase + (oy + 1) * ow];
                    for (ox, &v) in gyrow.iter().enumerate().take(ox_lo) {
                        edge_scatter::<K>(wrow, gxrow, ox, g.pad_left, v);
                    }
                    for (ox, &v) in gyrow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                        let ix0 = ox * STRIDE - g.pad_left;
                        for kx in 0..K {
                            gxrow[ix0 + kx] += wrow[kx] * v;
                        }
                    }
                    for (ox, &v) in gyrow.iter().enumerate().skip(ox_hi) {
                        edge_scatter::<K>(wrow, gxrow, ox, g.pad_left, v);
                    }
                }
            }
        }
    }
}

#[inline]
fn edge_scatter<const K: usize>(
    wrow: &[f64; K],
    gxrow: &mut [f64],
    ox: usize,
    pad_left: usize,
    v: f64,
) {
    let ix0 = (ox * STRIDE) as isize - pad_left as isize;
    for (kx, &wv) in wrow.iter().enumerate() {
        let ix = ix0 + kx as isize;
        if ix >= 0 && (ix as usize) < gxrow.len() {
            gxrow[ix as usize] += wv * v;
        }
    }
}

fn conv_bwd_kernel_k<const K: usize>(
    x: &[f64],
    in_c: usize,
    gy: &[f64],
    out_c: usize,
    gw: &mut [f64],
    g: &ConvGeom,
) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (ox_lo, ox_hi) = interior(g, K);
    for oc in 0..out_c {
        let ybase = oc * oh * ow;
        for ic in 0..in_c {
            let xbase = ic * ih * iw;
            let wbase = (oc * in_c + ic) * K * K;
            for ky in 0..K {
                let mut acc = [0.0f64; K];
                for oy in 0..oh {
                    let iy = (oy * STRIDE + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let xrow = &x[xbase + iy as usize * iw..xbase + (iy as usize + 1) * iw];
                    let gyrow = &gy[ybase + oy * ow..ybase + (oy + 1) * ow];
                    for (ox, &v) in gyrow.iter().enumerate().take(ox_lo) {
                        edge_corr::<K>(&mut acc, xrow, ox, g.pad_left, v);
                    }
                    for (ox, &v) in gyrow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                        let ix0 = ox * STRIDE - g.pad_left;
                        for kx in 0..K {
                            acc[kx] += xrow[ix0 + kx] * v;
                        }
                    }
                    for (ox, &v) in gyrow.iter().enumerate().skip(ox_hi) {
                        edge_corr::<K>(&mut acc, xrow, ox, g.pad_left, v);
                    }
                }
                for kx in 0..K {
                    gw[wbase + ky * K + kx] += acc[kx];
                }
            }
        }
    }
}

#[inline]
fn edge_corr<const K: usize>(acc: &mut [f64; K], xrow: &[f64], ox: usize, pad_left: usize, v: f64) {
    let ix0 = (ox * STRIDE) as isize - pad_left as isize;
    for (kx, a) in acc.iter_mut().enumerate() {
        let ix = ix0 + kx as isize;
        if ix >= 0 && (ix as usize) < xrow.len() {
            *a += xrow[ix as usize] * v;
        }
    }
}
