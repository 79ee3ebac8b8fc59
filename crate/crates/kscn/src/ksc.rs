//! The k-subspace clustering engine: residuals, nearest-subspace assignment,
//! SVD subspace re-estimation with outlier trimming, Euclidean subspace
//! gradients, and the plain alternating loops (SVD and Grassmann variants).
//!
//! Points are rows of a `Matrix`; every function treats row `j` as the j-th
//! latent point. Parallel maps collect per-point values and reduce
//! sequentially, so results are bit-identical to the sequential path.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grassmann::{riemannian_step, SubspaceBasis};
use crate::linalg::{dot, thin_qr_q, top_p_left_singular_vectors, Matrix};

/// Hard assignment of each of n samples to one of k clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    assignment: Vec<usize>,
    k: usize,
}

impl Membership {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("membership with k = 0".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::Config(format!("cluster index {bad} >= k = {k}")));
        }
        Ok(Self { assignment, k })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn label(&self, j: usize) -> usize {
        self.assignment[j]
    }

    pub fn set_label(&mut self, j: usize, c: usize) {
        assert!(c < self.k);
        self.assignment[j] = c;
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.assignment
    }

    /// Indices of the points assigned to cluster `c`, in sample order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&j| self.assignment[j] == c)
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &c in &self.assignment {
            counts[c] += 1;
        }
        counts
    }
}

/// A set of k subspaces sharing ambient dimension d and rank p.
#[derive(Clone, Debug)]
pub struct SubspaceSet {
    subspaces: Vec<SubspaceBasis>,
}

impl SubspaceSet {
    pub fn new(subspaces: Vec<SubspaceBasis>) -> Result<Self> {
        let first = subspaces
            .first()
            .ok_or_else(|| Error::Config("empty subspace set".into()))?;
        let (d, p) = (first.ambient_dim(), first.subspace_dim());
        if subspaces
            .iter()
            .any(|s| s.ambient_dim() != d || s.subspace_dim() != p)
        {
            return Err(Error::Dim("subspace set with mixed shapes".into()));
        }
        Ok(Self { subspaces })
    }

    pub fn k(&self) -> usize {
        self.subspaces.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.subspaces[0].ambient_dim()
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspaces[0].subspace_dim()
    }

    pub fn get(&self, i: usize) -> &SubspaceBasis {
        &self.subspaces[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &SubspaceBasis> {
        self.subspaces.iter()
    }

    pub fn replace(&mut self, i: usize, basis: SubspaceBasis) -> Result<()> {
        if basis.ambient_dim() != self.ambient_dim() || basis.subspace_dim() != self.subspace_dim()
        {
            return Err(Error::Dim("replacement basis has wrong shape".into()));
        }
        self.subspaces[i] = basis;
        Ok(())
    }
}

/// Configuration for the plain alternating loops.
#[derive(Clone, Debug)]
pub struct KscConfig {
    pub k: usize,
    pub p: usize,
    /// Fraction of each cluster's farthest points excluded from basis
    /// re-estimation.
    pub outlier_fraction: f64,
    pub max_iters: usize,
    /// Relative objective change below which the loop stops.
    pub tol: f64,
}

impl Default for KscConfig {
    fn default() -> Self {
        Self {
            k: 1,
            p: 1,
            outlier_fraction: 0.0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl KscConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k = 0".into()));
        }
        if self.p == 0 || self.p > d {
            return Err(Error::Config(format!("p = {} with d = {d}", self.p)));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction = {}",
                self.outlier_fraction
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters = 0".into()));
        }
        Ok(())
    }
}

/// Squared distance from a point to a subspace: `‖z − SSᵀz‖²`, computed in
/// the stable form `‖z‖² − ‖Sᵀz‖²`.
pub fn residual(z: &[f64], s: &SubspaceBasis) -> Result<f64> {
    let b = s.matrix();
    if z.len() != b.rows() {
        return Err(Error::Dim(format!(
            "residual: point of dim {} vs ambient dim {}",
            z.len(),
            b.rows()
        )));
    }
    Ok(residual_unchecked(z, s))
}

#[inline]
fn residual_unchecked(z: &[f64], s: &SubspaceBasis) -> f64 {
    let b = s.matrix();
    let (d, p) = (b.rows(), b.cols());
    let mut proj_sq = 0.0;
    for q in 0..p {
        let mut acc = 0.0;
        for i in 0..d {
            acc += b.get(i, q) * z[i];
        }
        proj_sq += acc * acc;
    }
    (dot(z, z) - proj_sq).max(0.0)
}

/// Assigns each point to its nearest subspace; ties break to the lowest
/// cluster index.
pub fn assign(points: &Matrix, subs: &SubspaceSet) -> Result<Membership> {
    if points.cols() != subs.ambient_dim() {
        return Err(Error::Dim(format!(
            "assign: points of dim {} vs subspaces in dim {}",
            points.cols(),
            subs.ambient_dim()
        )));
    }
    let labels: Vec<usize> = (0..points.rows())
        .into_par_iter()
        .map(|j| {
            let z = points.row(j);
            let mut best = 0usize;
            let mut best_res = f64::INFINITY;
            for (c, s) in subs.iter().enumerate() {
                let r = residual_unchecked(z, s);
                if r < best_res {
                    best_res = r;
                    best = c;
                }
            }
            best
        })
        .collect();
    Membership::new(labels, subs.k())
}

/// Sum of residuals of every point to its assigned subspace.
pub fn objective(points: &Matrix, subs: &SubspaceSet, m: &Membership) -> Result<f64> {
    if points.rows() != m.len() {
        return Err(Error::Dim(format!(
            "objective: {} points vs {} labels",
            points.rows(),
            m.len()
        )));
    }
    if points.cols() != subs.ambient_dim() || m.k() != subs.k() {
        return Err(Error::Dim("objective: inconsistent shapes".into()));
    }
    let residuals: Vec<f64> = (0..points.rows())
        .into_par_iter()
        .map(|j| residual_unchecked(points.row(j), subs.get(m.label(j))))
        .collect();
    Ok(residuals.iter().sum())
}

/// Re-estimates one cluster's basis: sorts its points by residual to the
/// current basis, drops the farthest `ceil(outlier_fraction · n)` (never
/// below p survivors), and takes the top-p left singular vectors of the
/// survivor matrix. When fewer than p survivors exist, the remaining
/// directions are filled from the previous basis, orthogonalized.
pub fn svd_update(
    points: &Matrix,
    m: &Membership,
    cluster: usize,
    p: usize,
    outlier_fraction: f64,
    current: &SubspaceBasis,
) -> Result<SubspaceBasis> {
    let mut idx = m.members(cluster);
    if idx.is_empty() {
        return Err(Error::EmptyCluster(cluster));
    }
    let d = points.cols();

    let n_c = idx.len();
    let trim = ((outlier_fraction * n_c as f64).ceil() as usize).min(n_c.saturating_sub(p));
    if trim > 0 {
        let res: Vec<f64> = idx
            .iter()
            .map(|&j| residual_unchecked(points.row(j), current))
            .collect();
        let mut order: Vec<usize> = (0..n_c).collect();
        order.sort_by(|&a, &b| {
            res[a]
                .partial_cmp(&res[b])
                .unwrap()
                .then(idx[a].cmp(&idx[b]))
        });
        idx = order[..n_c - trim].iter().map(|&o| idx[o]).collect();
        idx.sort_unstable();
    }

    let survivors = idx.len();
    let rank = p.min(survivors);
    let cols: Vec<Vec<f64>> = idx.iter().map(|&j| points.row(j).to_vec()).collect();
    let z = Matrix::from_cols(&cols)?;
    let partial = top_p_left_singular_vectors(&z, rank)?;
    if rank == p {
        return SubspaceBasis::new(partial);
    }

    // Fill missing directions from the previous basis, orthogonalized
    // against what the survivors determined.
    let mut basis_cols: Vec<Vec<f64>> = (0..rank).map(|j| partial.col(j)).collect();
    let prev = current.matrix();
    for j in 0..prev.cols() {
        if basis_cols.len() == p {
            break;
        }
        let mut w = prev.col(j);
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
    }
    // Degenerate previous basis: complete against canonical directions.
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

/// Euclidean gradient of the clustering loss with respect to one cluster's
/// basis, for fixed assignments: `−2 · Σ_{j in cluster} z_j z_jᵀ S`.
pub fn euclidean_subspace_grad(
    points: &Matrix,
    m: &Membership,
    cluster: usize,
    s: &SubspaceBasis,
) -> Result<Matrix> {
    let b = s.matrix();
    let (d, p) = (b.rows(), b.cols());
    if points.cols() != d || points.rows() != m.len() {
        return Err(Error::Dim(
            "euclidean_subspace_grad: inconsistent shapes".into(),
        ));
    }
    let mut g = Matrix::zeros(d, p);
    for j in 0..points.rows() {
        if m.label(j) != cluster {
            continue;
        }
        let z = points.row(j);
        let w = b.tr_mul_vec(z)?; // Sᵀz
        for i in 0..d {
            let zi = -2.0 * z[i];
            if zi == 0.0 {
                continue;
            }
            for (q, &wq) in w.iter().enumerate() {
                let cur = g.get(i, q);
                g.set(i, q, cur + zi * wq);
            }
        }
    }
    Ok(g)
}

/// Builds k random p-dimensional subspaces of ℝᵈ by orthonormalizing
/// Gaussian matrices.
pub fn random_subspace_set(
    k: usize,
    d: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<SubspaceSet> {
    let mut subs = Vec::with_capacity(k);
    for _ in 0..k {
        subs.push(random_basis(d, p, rng)?);
    }
    SubspaceSet::new(subs)
}

fn random_basis(d: usize, p: usize, rng: &mut impl Rng) -> Result<SubspaceBasis> {
    use rand_distr::StandardNormal;
    loop {
        let data: Vec<f64> = (0..d * p).map(|_| rng.sample(StandardNormal)).collect();
        let a = Matrix::from_vec(d, p, data)?;
        match thin_qr_q(&a) {
            Ok(q) => return SubspaceBasis::new(q),
            Err(Error::RankDeficient(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Repairs empty clusters by reseeding each with a rank-p basis fitted to
/// the p points farthest from their currently assigned subspaces; those
/// points move to the reseeded cluster. Returns how many clusters were
/// reseeded.
pub fn reseed_empty_clusters(
    points: &Matrix,
    m: &mut Membership,
    subs: &mut SubspaceSet,
    p: usize,
) -> Result<usize> {
    let counts = m.counts();
    let empties: Vec<usize> = (0..subs.k()).filter(|&c| counts[c] == 0).collect();
    if empties.is_empty() {
        return Ok(0);
    }

    let mut res: Vec<(f64, usize)> = (0..points.rows())
        .map(|j| (residual_unchecked(points.row(j), subs.get(m.label(j))), j))
        .collect();
    // Farthest first; ties break to the lower sample index.
    res.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut next = 0usize;
    for &c in &empties {
        let mut chosen = Vec::with_capacity(p);
        while chosen.len() < p && next < res.len() {
            let j = res[next].1;
            next += 1;
            // Do not drain a donor cluster entirely.
            if m.counts()[m.label(j)] <= 1 {
                continue;
            }
            chosen.push(j);
            m.set_label(j, c);
        }
        if chosen.len() < p {
            return Err(Error::EmptyCluster(c));
        }
        let cols: Vec<Vec<f64>> = chosen.iter().map(|&j| points.row(j).to_vec()).collect();
        let z = Matrix::from_cols(&cols)?;
        let basis = top_p_left_singular_vectors(&z, p.min(chosen.len()))?;
        let basis = if basis.cols() == p {
            SubspaceBasis::new(basis)?
        } else {
            // Should not happen (chosen.len() == p), kept for safety.
            return Err(Error::EmptyCluster(c));
        };
        subs.replace(c, basis)?;
    }
    Ok(empties.len())
}

fn converged(trace: &[f64], tol: f64) -> bool {
    let t = trace.len();
    if t < 2 {
        return false;
    }
    let prev = trace[t - 2];
    let cur = trace[t - 1];
    (prev - cur).abs() <= tol * prev.max(f64::MIN_POSITIVE)
}

/// Plain alternating k-subspace clustering: assign to nearest subspace,
/// re-estimate each basis by truncated SVD, repeat until the relative
/// objective change drops below `cfg.tol` or `cfg.max_iters` is reached.
///
/// The returned trace holds the objective after each iteration's update;
/// with trimming disabled it is non-increasing.
pub fn run_plain_ksc(
    points: &Matrix,
    cfg: &KscConfig,
    init: &SubspaceSet,
) -> Result<(SubspaceSet, Membership, Vec<f64>)> {
    cfg.validate(points.cols())?;
    if init.k() != cfg.k || init.subspace_dim() != cfg.p || init.ambient_dim() != points.cols() {
        return Err(Error::Dim(
            "run_plain_ksc: init does not match config".into(),
        ));
    }
    let mut subs = init.clone();
    let mut m = assign(points, &subs)?;
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iters {
        m = assign(points, &subs)?;
        reseed_empty_clusters(points, &mut m, &mut subs, cfg.p)?;
        for c in 0..cfg.k {
            let updated = svd_update(points, &m, c, cfg.p, cfg.outlier_fraction, subs.get(c))?;
            subs.replace(c, updated)?;
        }
        trace.push(objective(points, &subs, &m)?);
        if converged(&trace, cfg.tol) {
            break;
        }
    }
    Ok((subs, m, trace))
}

/// Plain alternating loop with Grassmannian gradient updates instead of the
/// SVD: per epoch, assign every point, then take one Riemannian step per
/// subspace along the accumulated gradient, with step size
/// `eta_base / n_c`. Rank-deficient retractions halve the step up to 10
/// times, then skip that subspace for the epoch.
pub fn run_plain_grassmann(
    points: &Matrix,
    cfg: &KscConfig,
    init: &SubspaceSet,
    eta_base: f64,
) -> Result<(SubspaceSet, Membership, Vec<f64>)> {
    cfg.validate(points.cols())?;
    if init.k() != cfg.k || init.subspace_dim() != cfg.p || init.ambient_dim() != points.cols() {
        return Err(Error::Dim(
            "run_plain_grassmann: init does not match config".into(),
        ));
    }
    if eta_base <= 0.0 {
        return Err(Error::Config(format!("eta_base = {eta_base}")));
    }
    let mut subs = init.clone();
    let mut m = assign(points, &subs)?;
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iters {
        m = assign(points, &subs)?;
        reseed_empty_clusters(points, &mut m, &mut subs, cfg.p)?;
        let counts = m.counts();
        for c in 0..cfg.k {
            if counts[c] == 0 {
                continue;
            }
            let g = euclidean_subspace_grad(points, &m, c, subs.get(c))?;
            if let Some(stepped) = step_with_backoff(subs.get(c), &g, eta_base / counts[c] as f64) {
                subs.replace(c, stepped)?;
            }
        }
        trace.push(objective(points, &subs, &m)?);
        if converged(&trace, cfg.tol) {
            break;
        }
    }
    Ok((subs, m, trace))
}

/// Riemannian step with step-halving on rank-deficient retractions; `None`
/// after 10 failed attempts.
pub fn step_with_backoff(
    s: &SubspaceBasis,
    euclid_grad: &Matrix,
    eta: f64,
) -> Option<SubspaceBasis> {
    let mut eta = eta;
    for _ in 0..=10 {
        match riemannian_step(s, euclid_grad, eta) {
            Ok(next) => return Some(next),
            Err(Error::RankDeficient(_)) => eta *= 0.5,
            Err(_) => return None,
        }
    }
    None
}
