//! Convolutional autoencoder: three stride-2 conv layers (kernels 5,3,3)
//! with ReLU, a mirrored transposed-conv decoder, full manual
//! backpropagation including the subspace-clustering pull on the encoder,
//! and Adam. For 28×28 inputs with 20-10-5 channels the flattened latent
//! dimension is 80.
//!
//! Batches are processed in fixed-size sample chunks; gradients reduce in
//! chunk order, so results do not depend on the worker-thread count.

mod checkpoint;
mod conv;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::ConvGeom;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ksc::{Membership, SubspaceSet};
use crate::linalg::Matrix;
use conv::{channel_sums, conv_bwd_input, conv_bwd_kernel, conv_fwd};

/// Encoder kernel sizes, first layer to last. The decoder mirrors them.
pub const KERNELS: [usize; 3] = [5, 3, 3];

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Samples per parallel work unit; fixed so gradient reduction order is
/// independent of the thread count.
const PAR_CHUNK: usize = 32;

/// Static network geometry derived from the input shape and channel plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaeArch {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub channels: [usize; 3],
    enc_geoms: [ConvGeom; 3],
    latent_dim: usize,
}

impl CaeArch {
    pub fn new(
        height: usize,
        width: usize,
        in_channels: usize,
        channels: [usize; 3],
    ) -> Result<Self> {
        if height == 0 || width == 0 || in_channels == 0 || channels.contains(&0) {
            return Err(Error::Config(format!(
                "degenerate architecture {height}x{width}x{in_channels}, channels {channels:?}"
            )));
        }
        let g0 = ConvGeom::same_stride2(height, width, KERNELS[0]);
        let g1 = ConvGeom::same_stride2(g0.out_h, g0.out_w, KERNELS[1]);
        let g2 = ConvGeom::same_stride2(g1.out_h, g1.out_w, KERNELS[2]);
        let latent_dim = channels[2] * g2.out_h * g2.out_w;
        Ok(Self {
            height,
            width,
            in_channels,
            channels,
            enc_geoms: [g0, g1, g2],
            latent_dim,
        })
    }

    /// The standard configuration for 28×28 grayscale images: channels 20-10-5,
    /// latent dimension 80.
    pub fn mnist() -> Self {
        Self::new(28, 28, 1, [20, 10, 5]).expect("static architecture")
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.in_channels
    }

    /// Spatial sizes along the encoder, input included.
    pub fn encoder_sizes(&self) -> [(usize, usize); 4] {
        [
            (self.height, self.width),
            (self.enc_geoms[0].out_h, self.enc_geoms[0].out_w),
            (self.enc_geoms[1].out_h, self.enc_geoms[1].out_w),
            (self.enc_geoms[2].out_h, self.enc_geoms[2].out_w),
        ]
    }

    fn enc_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.channels[l - 1]
        }
    }

    /// Decoder layer l maps channels[2−l] feature maps up one level.
    fn dec_in_channels(&self, l: usize) -> usize {
        self.channels[2 - l]
    }

    fn dec_out_channels(&self, l: usize) -> usize {
        if l < 2 {
            self.channels[1 - l]
        } else {
            self.in_channels
        }
    }

    fn dec_geom(&self, l: usize) -> &ConvGeom {
        &self.enc_geoms[2 - l]
    }

    fn enc_w_len(&self, l: usize) -> usize {
        self.channels[l] * self.enc_in_channels(l) * KERNELS[l] * KERNELS[l]
    }

    fn dec_w_len(&self, l: usize) -> usize {
        let k = KERNELS[2 - l];
        self.dec_in_channels(l) * self.dec_out_channels(l) * k * k
    }
}

/// Adam first/second moment buffers plus the shared timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    fn zeros(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

/// All weights and biases of the autoencoder, plus optimizer state.
///
/// Tensor declaration order (used by Adam and the checkpoint format):
/// encoder weight/bias pairs from first to last layer, then decoder pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CaeParams {
    pub arch: CaeArch,
    enc_w: Vec<Vec<f64>>,
    enc_b: Vec<Vec<f64>>,
    dec_w: Vec<Vec<f64>>,
    dec_b: Vec<Vec<f64>>,
    pub adam: AdamState,
}

impl CaeParams {
    /// He-uniform weights (fan-in scaling), zero biases, seeded.
    pub fn init(arch: CaeArch, seed: u64) -> Self {
        Self::init_with_rng(arch, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng(arch: CaeArch, rng: &mut impl Rng) -> Self {
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        for l in 0..3 {
            let fan_in = (arch.enc_in_channels(l) * KERNELS[l] * KERNELS[l]) as f64;
            let limit = (6.0 / fan_in).sqrt();
            enc_w.push(
                (0..arch.enc_w_len(l))
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect(),
            );
            enc_b.push(vec![0.0; arch.channels[l]]);
        }
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        for l in 0..3 {
            let k = KERNELS[2 - l];
            let fan_in = (arch.dec_in_channels(l) * k * k) as f64;
            let limit = (6.0 / fan_in).sqrt();
            dec_w.push(
                (0..arch.dec_w_len(l))
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect(),
            );
            dec_b.push(vec![0.0; arch.dec_out_channels(l)]);
        }
        let sizes: Vec<usize> = tensor_sizes(&arch);
        Self {
            arch,
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            adam: AdamState::zeros(&sizes),
        }
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(12);
        for l in 0..3 {
            out.push(&self.enc_w[l]);
            out.push(&self.enc_b[l]);
        }
        for l in 0..3 {
            out.push(&self.dec_w[l]);
            out.push(&self.dec_b[l]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.enc_w
            .iter_mut()
            .zip(self.enc_b.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .chain(
                self.dec_w
                    .iter_mut()
                    .zip(self.dec_b.iter_mut())
                    .flat_map(|(w, b)| [w, b]),
            )
            .collect()
    }

    /// Kind and length of each parameter tensor, in the flat declaration
    /// order used by [`parameter`](Self::parameter) and the checkpoint
    /// format: encoder weight/bias pairs, then decoder pairs.
    pub fn parameter_layout(&self) -> Vec<(TensorKind, usize)> {
        self.tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let kind = if i % 2 == 0 {
                    TensorKind::Weight
                } else {
                    TensorKind::Bias
                };
                (kind, t.len())
            })
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Reads a parameter by flat index in declaration order.
    pub fn parameter(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Writes a parameter by flat index in declaration order.
    pub fn set_parameter(&mut self, mut i: usize, v: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }
}

/// Role of a parameter tensor in [`CaeParams::parameter_layout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

fn tensor_sizes(arch: &CaeArch) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(12);
    for l in 0..3 {
        sizes.push(arch.enc_w_len(l));
        sizes.push(arch.channels[l]);
    }
    for l in 0..3 {
        sizes.push(arch.dec_w_len(l));
        sizes.push(arch.dec_out_channels(l));
    }
    sizes
}

/// Parameter gradients, shaped exactly like the parameter tensors.
#[derive(Clone, Debug)]
pub struct CaeGrads {
    enc_w: Vec<Vec<f64>>,
    enc_b: Vec<Vec<f64>>,
    dec_w: Vec<Vec<f64>>,
    dec_b: Vec<Vec<f64>>,
}

impl CaeGrads {
    pub fn zeros(arch: &CaeArch) -> Self {
        Self {
            enc_w: (0..3).map(|l| vec![0.0; arch.enc_w_len(l)]).collect(),
            enc_b: (0..3).map(|l| vec![0.0; arch.channels[l]]).collect(),
            dec_w: (0..3).map(|l| vec![0.0; arch.dec_w_len(l)]).collect(),
            dec_b: (0..3)
                .map(|l| vec![0.0; arch.dec_out_channels(l)])
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &CaeGrads) {
        let pairs = [
            (&mut self.enc_w, &other.enc_w),
            (&mut self.enc_b, &other.enc_b),
            (&mut self.dec_w, &other.dec_w),
            (&mut self.dec_b, &other.dec_b),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                for (a, b) in d.iter_mut().zip(s.iter()) {
                    *a += b;
                }
            }
        }
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(12);
        for l in 0..3 {
            out.push(&self.enc_w[l]);
            out.push(&self.enc_b[l]);
        }
        for l in 0..3 {
            out.push(&self.dec_w[l]);
            out.push(&self.dec_b[l]);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// All gradients flattened in the parameters' declaration order.
    pub fn flattened(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Encoder forward for one sample; returns the per-layer pre-activations
/// when a cache is requested.
fn encode_sample(params: &CaeParams, x: &[f64], mut cache: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
    let arch = &params.arch;
    let mut act = x.to_vec();
    for l in 0..3 {
        let g = &arch.enc_geoms[l];
        let mut pre = vec![0.0; arch.channels[l] * g.out_h * g.out_w];
        conv_fwd(
            &act,
            arch.enc_in_channels(l),
            &params.enc_w[l],
            &params.enc_b[l],
            &mut pre,
            arch.channels[l],
            g,
        );
        if let Some(c) = cache.as_deref_mut() {
            c.push(pre.clone());
        }
        relu_inplace(&mut pre);
        act = pre;
    }
    act
}

/// Decoder forward for one sample (transposed convolutions).
fn decode_sample(params: &CaeParams, z: &[f64], mut cache: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
    let arch = &params.arch;
    let mut act = z.to_vec();
    for l in 0..3 {
        let g = arch.dec_geom(l);
        let co = arch.dec_out_channels(l);
        let ci = arch.dec_in_channels(l);
        let mut pre = vec![0.0; co * g.in_h * g.in_w];
        conv_bwd_input(&act, ci, &params.dec_w[l], &mut pre, co, g);
        let plane = g.in_h * g.in_w;
        for c in 0..co {
            let b = params.dec_b[l][c];
            for v in pre[c * plane..(c + 1) * plane].iter_mut() {
                *v += b;
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.push(pre.clone());
        }
        relu_inplace(&mut pre);
        act = pre;
    }
    act
}

fn check_batch(params: &CaeParams, images: &[f64]) -> Result<usize> {
    let sz = params.arch.pixels_per_image();
    if sz == 0 || !images.len().is_multiple_of(sz) {
        return Err(Error::Dim(format!(
            "batch of {} values does not divide into {sz}-pixel images",
            images.len()
        )));
    }
    Ok(images.len() / sz)
}

/// Encodes a batch (concatenated images) into an n×d latent matrix.
pub fn encode(params: &CaeParams, images: &[f64]) -> Result<Matrix> {
    let n = check_batch(params, images)?;
    let sz = params.arch.pixels_per_image();
    let d = params.arch.latent_dim();
    let latents: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| encode_sample(params, &images[i * sz..(i + 1) * sz], None))
        .collect();
    let mut flat = Vec::with_capacity(n * d);
    for z in latents {
        flat.extend(z);
    }
    Matrix::from_vec(n, d, flat)
}

/// Decodes an n×d latent matrix back to a batch of images.
pub fn decode(params: &CaeParams, latents: &Matrix) -> Result<Vec<f64>> {
    if latents.cols() != params.arch.latent_dim() {
        return Err(Error::Dim(format!(
            "latents of dim {} vs architecture dim {}",
            latents.cols(),
            params.arch.latent_dim()
        )));
    }
    let out: Vec<Vec<f64>> = (0..latents.rows())
        .into_par_iter()
        .map(|i| decode_sample(params, latents.row(i), None))
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Reconstruction loss `Σ_j ‖x_j − decode(encode(x_j))‖²` over the batch.
pub fn recon_loss(params: &CaeParams, images: &[f64]) -> Result<f64> {
    let n = check_batch(params, images)?;
    let sz = params.arch.pixels_per_image();
    let per: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &images[i * sz..(i + 1) * sz];
            let z = encode_sample(params, x, None);
            let xhat = decode_sample(params, &z, None);
            x.iter()
                .zip(xhat.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    Ok(per.iter().sum())
}

/// Combined loss: reconstruction plus `lambda` times the sum of residuals
/// of each latent to its assigned subspace.
pub fn total_loss(
    params: &CaeParams,
    images: &[f64],
    subs: &SubspaceSet,
    m: &Membership,
    lambda: f64,
) -> Result<f64> {
    let n = check_batch(params, images)?;
    if m.len() != n {
        return Err(Error::Dim(format!(
            "membership of {} labels for a batch of {n}",
            m.len()
        )));
    }
    let ae = recon_loss(params, images)?;
    let latents = encode(params, images)?;
    let mut ksc = 0.0;
    for j in 0..n {
        ksc += crate::ksc::residual(latents.row(j), subs.get(m.label(j)))?;
    }
    Ok(ae + lambda * ksc)
}

/// One sample's contribution to the gradients, plus its two loss terms.
fn backward_sample(
    params: &CaeParams,
    x: &[f64],
    ksc: Option<(&SubspaceSet, usize, f64)>,
    grads: &mut CaeGrads,
) -> (f64, f64) {
    let arch = &params.arch;

    let mut enc_pre: Vec<Vec<f64>> = Vec::with_capacity(3);
    let latent = encode_sample(params, x, Some(&mut enc_pre));
    let mut dec_pre: Vec<Vec<f64>> = Vec::with_capacity(3);
    let xhat = decode_sample(params, &latent, Some(&mut dec_pre));

    let loss_ae: f64 = x
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    // dL/d(reconstruction)
    let mut g: Vec<f64> = x
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| 2.0 * (b - a))
        .collect();

    // Decoder backward, last layer first.
    let mut dec_acts: Vec<Vec<f64>> = Vec::with_capacity(3); // inputs to each dec layer
    dec_acts.push(latent.clone());
    for pre in &dec_pre[..2] {
        let mut a = pre.clone();
        relu_inplace(&mut a);
        dec_acts.push(a);
    }
    for l in (0..3).rev() {
        let geo = arch.dec_geom(l);
        let ci = arch.dec_in_channels(l);
        let co = arch.dec_out_channels(l);
        // Through the output ReLU.
        for (gv, &pre) in g.iter_mut().zip(dec_pre[l].iter()) {
            if pre <= 0.0 {
                *gv = 0.0;
            }
        }
        channel_sums(&g, co, geo.in_h * geo.in_w, &mut grads.dec_b[l]);
        conv_bwd_kernel(&g, co, &dec_acts[l], ci, &mut grads.dec_w[l], geo);
        // Gradient w.r.t. this layer's (small) input.
        let mut g_in = vec![0.0; ci * geo.out_h * geo.out_w];
        conv_fwd(&g, co, &params.dec_w[l], &vec![0.0; ci], &mut g_in, ci, geo);
        g = g_in;
    }

    // Subspace pull on the latent: d/dz ‖z − SSᵀz‖² = 2(I − SSᵀ)z.
    let mut loss_ksc = 0.0;
    if let Some((subs, label, lambda)) = ksc {
        let basis = subs.get(label).matrix();
        let w = basis.tr_mul_vec(&latent).expect("latent dim");
        let back = basis.mul_vec(&w).expect("latent dim");
        for i in 0..latent.len() {
            g[i] += lambda * 2.0 * (latent[i] - back[i]);
        }
        // Stable form ‖z‖² − ‖Sᵀz‖² of the residual.
        let znorm: f64 = latent.iter().map(|v| v * v).sum();
        let wnorm: f64 = w.iter().map(|v| v * v).sum();
        loss_ksc = (znorm - wnorm).max(0.0);
    }

    // Encoder backward.
    let mut enc_acts: Vec<Vec<f64>> = Vec::with_capacity(3);
    enc_acts.push(x.to_vec());
    for pre in &enc_pre[..2] {
        let mut a = pre.clone();
        relu_inplace(&mut a);
        enc_acts.push(a);
    }
    for l in (0..3).rev() {
        let geo = &arch.enc_geoms[l];
        let ci = arch.enc_in_channels(l);
        let co = arch.channels[l];
        for (gv, &pre) in g.iter_mut().zip(enc_pre[l].iter()) {
            if pre <= 0.0 {
                *gv = 0.0;
            }
        }
        channel_sums(&g, co, geo.out_h * geo.out_w, &mut grads.enc_b[l]);
        conv_bwd_kernel(&enc_acts[l], ci, &g, co, &mut grads.enc_w[l], geo);
        if l > 0 {
            let mut g_in = vec![0.0; ci * geo.in_h * geo.in_w];
            conv_bwd_input(&g, co, &params.enc_w[l], &mut g_in, ci, geo);
            g = g_in;
        }
    }

    (loss_ae, loss_ksc)
}

/// Full-batch backpropagation. With `ksc = Some((subs, m, lambda))` the
/// encoder also receives the subspace-clustering gradient; the decoder only
/// ever sees the reconstruction term. Returns `(grads, loss_ae, loss_ksc)`
/// where `loss_ksc` is the unweighted residual sum.
pub fn backward(
    params: &CaeParams,
    images: &[f64],
    ksc: Option<(&SubspaceSet, &Membership, f64)>,
) -> Result<(CaeGrads, f64, f64)> {
    let n = check_batch(params, images)?;
    let sz = params.arch.pixels_per_image();
    if let Some((subs, m, _)) = ksc {
        if m.len() != n {
            return Err(Error::Dim(format!(
                "membership of {} labels for a batch of {n}",
                m.len()
            )));
        }
        if subs.ambient_dim() != params.arch.latent_dim() {
            return Err(Error::Dim(format!(
                "subspaces in dim {} vs latent dim {}",
                subs.ambient_dim(),
                params.arch.latent_dim()
            )));
        }
    }

    let chunks: Vec<(CaeGrads, f64, f64)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(PAR_CHUNK)
        .map(|chunk| {
            let mut grads = CaeGrads::zeros(&params.arch);
            let mut ae = 0.0;
            let mut kl = 0.0;
            for &i in chunk {
                let x = &images[i * sz..(i + 1) * sz];
                let sample_ksc = ksc
                    .as_ref()
                    .map(|(subs, m, lambda)| (*subs, m.label(i), *lambda))
                    .filter(|&(_, _, lambda)| lambda != 0.0);
                let (a, k) = backward_sample(params, x, sample_ksc, &mut grads);
                ae += a;
                kl += k;
            }
            (grads, ae, kl)
        })
        .collect();

    let mut grads = CaeGrads::zeros(&params.arch);
    let mut loss_ae = 0.0;
    let mut loss_ksc = 0.0;
    for (g, a, k) in &chunks {
        grads.add_assign(g);
        loss_ae += a;
        loss_ksc += k;
    }
    Ok((grads, loss_ae, loss_ksc))
}

/// Standard Adam update with bias correction; increments the timestep.
pub fn adam_step(params: &mut CaeParams, grads: &CaeGrads, lr: f64) {
    params.adam.t += 1;
    let t = params.adam.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let CaeParams {
        enc_w,
        enc_b,
        dec_w,
        dec_b,
        adam,
        ..
    } = params;
    let mut param_tensors: Vec<&mut Vec<f64>> = enc_w
        .iter_mut()
        .zip(enc_b.iter_mut())
        .flat_map(|(w, b)| [w, b])
        .chain(
            dec_w
                .iter_mut()
                .zip(dec_b.iter_mut())
                .flat_map(|(w, b)| [w, b]),
        )
        .collect();
    let grad_tensors = grads.tensors();

    for (idx, g) in grad_tensors.iter().enumerate() {
        let p = &mut param_tensors[idx];
        let m = &mut adam.m[idx];
        let v = &mut adam.v[idx];
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}
