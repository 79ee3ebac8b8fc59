//! Training orchestration: autoencoder pretraining, subspace initialization
//! (k-means plus per-cluster PCA), and the two fine-tuning loops — per-epoch
//! SVD subspace updates, or per-epoch Riemannian steps along gradients
//! accumulated over the epoch's batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines;
use crate::cae::{self, CaeArch, CaeParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grassmann::SubspaceBasis;
use crate::ksc::{
    assign, euclidean_subspace_grad, reseed_empty_clusters, step_with_backoff, svd_update,
    Membership, SubspaceSet,
};
use crate::linalg::{dot, top_p_left_singular_vectors, Matrix};
use crate::metrics::ClusterMetrics;

/// Which subspace update rule fine-tuning uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Svd,
    Grassmann,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(Variant::Svd),
            "grassmann" => Ok(Variant::Grassmann),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// All training knobs. The defaults are the MNIST configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub k: usize,
    pub p: usize,
    pub lambda: f64,
    pub batch_size: usize,
    /// Fine-tuning epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub lr: f64,
    /// Base Grassmann step; each subspace uses `grass_eta / n_i` where n_i
    /// counts the points it received during the epoch.
    pub grass_eta: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
    pub kmeans_restarts: usize,
    pub channels: [usize; 3],
}

impl TrainConfig {
    /// MNIST: subspace dimension 7, lambda 0.08, Adam at 1e-3, 200
    /// pretraining epochs, channels 20-10-5.
    pub fn mnist() -> Self {
        Self {
            k: 10,
            p: 7,
            lambda: 0.08,
            batch_size: 256,
            epochs: 20,
            pretrain_epochs: 200,
            lr: 1e-3,
            grass_eta: 1e-3,
            outlier_fraction: 0.1,
            seed: 0,
            variant: Variant::Svd,
            kmeans_restarts: 20,
            channels: [20, 10, 5],
        }
    }

    /// Fashion-MNIST: subspace dimension 11, lambda 0.11.
    pub fn fashion() -> Self {
        Self {
            p: 11,
            lambda: 0.11,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "k = {}, p = {}, batch_size = {}",
                self.k, self.p, self.batch_size
            )));
        }
        if self.lambda < 0.0 || !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "lambda = {}, outlier_fraction = {}",
                self.lambda, self.outlier_fraction
            )));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts = 0".into()));
        }
        Ok(())
    }

    fn arch_for(&self, data: &Dataset) -> Result<CaeArch> {
        let arch = CaeArch::new(data.height, data.width, data.channels, self.channels)?;
        if self.p > arch.latent_dim() {
            return Err(Error::Config(format!(
                "p = {} exceeds latent dimension {}",
                self.p,
                arch.latent_dim()
            )));
        }
        Ok(arch)
    }
}

/// One fine-tuning epoch's summary. `loss_ksc` is the unweighted residual
/// sum accumulated over the epoch's batches; `loss_total` folds in lambda.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ae: f64,
    pub loss_ksc: f64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub seconds: f64,
}

/// Per-epoch records for a whole run.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes"))
            .fold(String::new(), |mut s, line| {
                s.push_str(&line);
                s.push('\n');
                s
            })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

const STREAM_EPOCH_BASE: u64 = 1000;

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EPOCH_BASE + epoch as u64);
    rng
}

/// Copies sample `idx` into `buf` in the channel-major layout the CAE
/// expects. A straight copy for single-channel data.
fn sample_into(buf: &mut [f64], data: &Dataset, idx: usize) {
    let img = data.image(idx);
    let (h, w, c) = (data.height, data.width, data.channels);
    if c == 1 {
        buf.copy_from_slice(img);
    } else {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    buf[ch * h * w + y * w + x] = img[(y * w + x) * c + ch];
                }
            }
        }
    }
}

/// Encodes the whole dataset into an n×d latent matrix.
pub fn encode_dataset(params: &CaeParams, data: &Dataset) -> Result<Matrix> {
    let pixels = params.arch.pixels_per_image();
    if data.channels == 1 {
        cae::encode(params, &data.images)
    } else {
        let mut buf = vec![0.0; data.n * pixels];
        for i in 0..data.n {
            sample_into(&mut buf[i * pixels..(i + 1) * pixels], data, i);
        }
        cae::encode(params, &buf)
    }
}

/// Per-subspace gradient accumulator for the Grassmann variant.
struct GradAccum {
    grads: Vec<Matrix>,
    counts: Vec<usize>,
}

/// One pass over the data in shuffled batches, updating the autoencoder via
/// Adam. With subspaces present, each batch is assigned by nearest subspace
/// first (memberships are recomputed per batch) and the encoder receives the
/// clustering gradient. Returns the summed reconstruction and clustering
/// losses.
fn run_epoch(
    params: &mut CaeParams,
    data: &Dataset,
    cfg: &TrainConfig,
    subs: Option<&SubspaceSet>,
    mut accum: Option<&mut GradAccum>,
    epoch_index: usize,
) -> Result<(f64, f64)> {
    let pixels = params.arch.pixels_per_image();
    let mut order: Vec<usize> = (0..data.n).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch_index));

    let mut buf = vec![0.0; cfg.batch_size * pixels];
    let mut loss_ae = 0.0;
    let mut loss_ksc = 0.0;

    for batch in order.chunks(cfg.batch_size) {
        let blen = batch.len();
        for (slot, &idx) in batch.iter().enumerate() {
            sample_into(&mut buf[slot * pixels..(slot + 1) * pixels], data, idx);
        }
        let images = &buf[..blen * pixels];

        let membership = match subs {
            Some(s) => {
                let z = cae::encode(params, images)?;
                let m = assign(&z, s)?;
                if let Some(acc) = accum.as_deref_mut() {
                    for c in 0..s.k() {
                        let g = euclidean_subspace_grad(&z, &m, c, s.get(c))?;
                        acc.grads[c] = acc.grads[c].add(&g)?;
                    }
                    for &l in m.as_slice() {
                        acc.counts[l] += 1;
                    }
                }
                Some(m)
            }
            None => None,
        };

        let ksc_arg = subs
            .zip(membership.as_ref())
            .map(|(s, m)| (s, m, cfg.lambda));
        let (grads, ae, kl) = cae::backward(params, images, ksc_arg)?;
        cae::adam_step(params, &grads, cfg.lr);
        loss_ae += ae;
        loss_ksc += kl;
    }
    Ok((loss_ae, loss_ksc))
}

/// Continues autoencoder-only training from existing parameters for
/// `epochs` passes; `start_epoch` keeps the shuffle stream aligned with the
/// global epoch counter. Returns the per-epoch reconstruction losses.
pub fn pretrain_from(
    params: &mut CaeParams,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    start_epoch: usize,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let (ae, _) = run_epoch(params, data, cfg, None, None, start_epoch + e)?;
        losses.push(ae);
    }
    Ok(losses)
}

/// Pretrains the autoencoder on reconstruction alone from a seeded random
/// initialization. Returns the parameters and the per-epoch loss trace.
pub fn pretrain(data: &Dataset, cfg: &TrainConfig) -> Result<(CaeParams, Vec<f64>)> {
    cfg.validate()?;
    if data.n == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    let arch = cfg.arch_for(data)?;
    let mut params = CaeParams::init_with_rng(arch, &mut init_rng(cfg.seed));
    let losses = pretrain_from(&mut params, data, cfg, cfg.pretrain_epochs, 0)?;
    Ok((params, losses))
}

/// Fits one basis to a set of sample rows: top-p left singular vectors,
/// completed against canonical axes when the points cannot pin down p
/// directions.
fn fit_cluster_basis(latents: &Matrix, members: &[usize], p: usize) -> Result<SubspaceBasis> {
    let d = latents.cols();
    let cols: Vec<Vec<f64>> = members.iter().map(|&j| latents.row(j).to_vec()).collect();
    let z = Matrix::from_cols(&cols)?;
    let rank = p.min(members.len());
    let partial = top_p_left_singular_vectors(&z, rank)?;
    if rank == p {
        return SubspaceBasis::new(partial);
    }
    let mut basis_cols: Vec<Vec<f64>> = (0..rank).map(|j| partial.col(j)).collect();
    let mut axis = 0usize;
    while basis_cols.len() < p && axis < d {
        let mut w = vec![0.0; d];
        w[axis] = 1.0;
        for b in &basis_cols {
            let c = dot(&w, b);
            for (wi, bi) in w.iter_mut().zip(b.iter()) {
                *wi -= c * bi;
            }
        }
        let n = dot(&w, &w).sqrt();
        if n > 1e-8 {
            for wi in w.iter_mut() {
                *wi /= n;
            }
            basis_cols.push(w);
        }
        axis += 1;
    }
    SubspaceBasis::new(Matrix::from_cols(&basis_cols)?)
}

/// Initial subspaces: k-means on the latents (k-means++, `kmeans_restarts`
/// restarts), then a per-cluster PCA basis. Empty k-means clusters are
/// reseeded from the points farthest from their subspaces.
pub fn init_subspaces(latents: &Matrix, cfg: &TrainConfig) -> Result<(SubspaceSet, Membership)> {
    let n = latents.rows();
    if n < cfg.k * cfg.p {
        return Err(Error::Config(format!(
            "{n} points cannot support {} subspaces of dimension {}",
            cfg.k, cfg.p
        )));
    }
    let km = baselines::kmeans(
        latents,
        cfg.k,
        cfg.kmeans_restarts,
        splitmix(cfg.seed ^ 0x6b6d65616e73),
    )?;
    let mut m = km.membership;
    let mut bases: Vec<SubspaceBasis> = Vec::with_capacity(cfg.k);
    let mut empties = Vec::new();
    for c in 0..cfg.k {
        let members = m.members(c);
        if members.is_empty() {
            empties.push(c);
            // Deterministic placeholder, replaced by reseeding below.
            bases.push(fit_cluster_basis(latents, &[0], cfg.p)?);
        } else {
            bases.push(fit_cluster_basis(latents, &members, cfg.p)?);
        }
    }
    let mut subs = SubspaceSet::new(bases)?;
    if !empties.is_empty() {
        reseed_empty_clusters(latents, &mut m, &mut subs, cfg.p)?;
    }
    Ok((subs, m))
}

fn epoch_metrics(m: &Membership, labels: Option<&Vec<usize>>) -> Option<ClusterMetrics> {
    labels.and_then(|l| ClusterMetrics::compute(m.as_slice(), l).ok())
}

fn push_record(
    report: &mut TrainReport,
    epoch: usize,
    loss_ae: f64,
    loss_ksc: f64,
    lambda: f64,
    metrics: Option<ClusterMetrics>,
    started: Instant,
) {
    report.epochs.push(EpochRecord {
        epoch,
        loss_total: loss_ae + lambda * loss_ksc,
        loss_ae,
        loss_ksc,
        acc: metrics.map(|m| m.acc),
        nmi: metrics.map(|m| m.nmi),
        ari: metrics.map(|m| m.ari),
        seconds: started.elapsed().as_secs_f64(),
    });
}

type TrainOutcome = (CaeParams, SubspaceSet, Membership, TrainReport);

/// Fine-tuning with per-epoch SVD subspace updates: every epoch runs the
/// batched autoencoder updates (memberships fixed per batch), then
/// re-encodes the whole dataset, reassigns every point, trims each
/// cluster's farthest fraction, and refits each basis by truncated SVD.
pub fn train_kscn_svd(
    data: &Dataset,
    cfg: &TrainConfig,
    init_params: Option<CaeParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = match init_params {
        Some(p) => p,
        None => pretrain(data, cfg)?.0,
    };
    let latents = encode_dataset(&params, data)?;
    let (mut subs, mut m) = init_subspaces(&latents, cfg)?;
    let mut report = TrainReport::default();

    for e in 0..cfg.epochs {
        let started = Instant::now();
        let (ae, kl) = run_epoch(
            &mut params,
            data,
            cfg,
            Some(&subs),
            None,
            cfg.pretrain_epochs + e,
        )?;
        let latents = encode_dataset(&params, data)?;
        m = assign(&latents, &subs)?;
        reseed_empty_clusters(&latents, &mut m, &mut subs, cfg.p)?;
        for c in 0..cfg.k {
            let updated = svd_update(&latents, &m, c, cfg.p, cfg.outlier_fraction, subs.get(c))?;
            subs.replace(c, updated)?;
        }
        let metrics = epoch_metrics(&m, data.labels.as_ref());
        push_record(&mut report, e + 1, ae, kl, cfg.lambda, metrics, started);
    }
    Ok((params, subs, m, report))
}

/// Fine-tuning with per-epoch Grassmann updates: batches assign and
/// accumulate Euclidean subspace gradients while the autoencoder trains;
/// after the batch loop each subspace takes one Riemannian step along its
/// accumulated gradient with step `grass_eta / n_i` (halved on retraction
/// failures, skipped after 10 halvings).
pub fn train_kscn_grassmann(
    data: &Dataset,
    cfg: &TrainConfig,
    init_params: Option<CaeParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = match init_params {
        Some(p) => p,
        None => pretrain(data, cfg)?.0,
    };
    let latents = encode_dataset(&params, data)?;
    let (mut subs, mut m) = init_subspaces(&latents, cfg)?;
    let d = subs.ambient_dim();
    let mut report = TrainReport::default();

    for e in 0..cfg.epochs {
        let started = Instant::now();
        let mut accum = GradAccum {
            grads: vec![Matrix::zeros(d, cfg.p); cfg.k],
            counts: vec![0; cfg.k],
        };
        let (ae, kl) = run_epoch(
            &mut params,
            data,
            cfg,
            Some(&subs),
            Some(&mut accum),
            cfg.pretrain_epochs + e,
        )?;
        for c in 0..cfg.k {
            if accum.counts[c] == 0 {
                continue;
            }
            let eta = cfg.grass_eta / accum.counts[c] as f64;
            if let Some(stepped) = step_with_backoff(subs.get(c), &accum.grads[c], eta) {
                subs.replace(c, stepped)?;
            }
        }
        let latents = encode_dataset(&params, data)?;
        m = assign(&latents, &subs)?;
        reseed_empty_clusters(&latents, &mut m, &mut subs, cfg.p)?;
        let metrics = epoch_metrics(&m, data.labels.as_ref());
        push_record(&mut report, e + 1, ae, kl, cfg.lambda, metrics, started);
    }
    Ok((params, subs, m, report))
}

/// Dispatches on `cfg.variant`.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    init_params: Option<CaeParams>,
) -> Result<TrainOutcome> {
    match cfg.variant {
        Variant::Svd => train_kscn_svd(data, cfg, init_params),
        Variant::Grassmann => train_kscn_grassmann(data, cfg, init_params),
    }
}
