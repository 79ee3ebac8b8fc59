//! Reference clustering baselines: raw k-means (Lloyd with k-means++
//! seeding and restarts) and PCA followed by plain k-subspace clustering.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ksc::{random_subspace_set, run_plain_ksc, KscConfig, Membership};
use crate::linalg::{top_p_left_singular_vectors, Matrix};
use crate::metrics::ClusterMetrics;

/// One baseline run, as printed by the CLI table.
#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub name: String,
    pub metrics: ClusterMetrics,
    pub seconds: f64,
}

/// Result of the best k-means restart.
#[derive(Clone, Debug)]
pub struct KmeansOutcome {
    pub membership: Membership,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64 + 1);
    rng
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeanspp_seeding(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(points.row(first).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centroids[0]))
        .collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass at distance zero (duplicates): take the
            // first unchosen index.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        } else {
            let threshold = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > threshold {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen[next] = true;
        let c = points.row(next).to_vec();
        for (i, best) in d2.iter_mut().enumerate() {
            let d = sq_dist(points.row(i), &c);
            if d < *best {
                *best = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

fn nearest_centroid(points: &Matrix, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let x = points.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(x, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Lloyd k-means with k-means++ seeding; the best of `restarts` runs by
/// inertia wins, ties going to the earliest restart. Deterministic given
/// the seed.
pub fn kmeans(points: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KmeansOutcome> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("kmeans with k = {k} on {n} points")));
    }
    if restarts == 0 {
        return Err(Error::Config("kmeans with zero restarts".into()));
    }
    const MAX_ITERS: usize = 100;
    let d = points.cols();

    let mut best: Option<KmeansOutcome> = None;
    for r in 0..restarts {
        let mut rng = restart_rng(seed, r);
        let mut centroids = kmeanspp_seeding(points, k, &mut rng);
        let mut labels = nearest_centroid(points, &centroids);
        let mut trace = Vec::new();
        for _ in 0..MAX_ITERS {
            // Means of each cluster; empty clusters grab the farthest point.
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for (i, &l) in labels.iter().enumerate() {
                counts[l] += 1;
                for (s, &x) in sums[l].iter_mut().zip(points.row(i)) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            sq_dist(points.row(a), &centroids[labels[a]])
                                .partial_cmp(&sq_dist(points.row(b), &centroids[labels[b]]))
                                .unwrap()
                                .then(b.cmp(&a))
                        })
                        .unwrap();
                    centroids[c] = points.row(far).to_vec();
                } else {
                    for (j, s) in sums[c].iter().enumerate() {
                        centroids[c][j] = s / counts[c] as f64;
                    }
                }
            }
            let new_labels = nearest_centroid(points, &centroids);
            let inertia: f64 = new_labels
                .iter()
                .enumerate()
                .map(|(i, &l)| sq_dist(points.row(i), &centroids[l]))
                .sum();
            trace.push(inertia);
            let stable = new_labels == labels;
            labels = new_labels;
            if stable {
                break;
            }
        }
        let inertia = *trace.last().unwrap();
        let better = match &best {
            None => true,
            Some(b) => inertia < b.inertia,
        };
        if better {
            let flat: Vec<f64> = centroids.iter().flatten().copied().collect();
            best = Some(KmeansOutcome {
                membership: Membership::new(labels, k)?,
                centroids: Matrix::from_vec(k, d, flat)?,
                inertia,
                inertia_trace: trace,
            });
        }
    }
    Ok(best.unwrap())
}

/// Column means of a points matrix.
fn mean_point(points: &Matrix) -> Vec<f64> {
    let (n, d) = (points.rows(), points.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    mean
}

/// PCA-KS baseline: mean-center, project onto the top `target_dim`
/// principal components, then run plain k-subspace clustering from
/// `restarts` random initializations, keeping the best final objective.
pub fn pca_ks(
    points: &Matrix,
    target_dim: usize,
    cfg: &KscConfig,
    seed: u64,
    restarts: usize,
) -> Result<(Membership, f64)> {
    let (n, d) = (points.rows(), points.cols());
    if target_dim == 0 || target_dim > d || target_dim > n {
        return Err(Error::Dim(format!(
            "pca target dim {target_dim} for {n}x{d} data"
        )));
    }
    if restarts == 0 {
        return Err(Error::Config("pca_ks with zero restarts".into()));
    }
    let mean = mean_point(points);
    let mut centered_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        centered_cols.push(
            points
                .row(i)
                .iter()
                .zip(mean.iter())
                .map(|(x, m)| x - m)
                .collect(),
        );
    }
    let data = Matrix::from_cols(&centered_cols)?; // d×n
    let components = top_p_left_singular_vectors(&data, target_dim)?; // d×target_dim

    let mut proj_rows = Vec::with_capacity(n * target_dim);
    for col in &centered_cols {
        proj_rows.extend(components.tr_mul_vec(col)?);
    }
    let projected = Matrix::from_vec(n, target_dim, proj_rows)?;

    let mut best: Option<(Membership, f64)> = None;
    for r in 0..restarts {
        let mut rng = restart_rng(seed, r);
        let init = random_subspace_set(cfg.k, target_dim, cfg.p, &mut rng)?;
        let (_, m, trace) = run_plain_ksc(&projected, cfg, &init)?;
        let obj = *trace.last().unwrap_or(&f64::INFINITY);
        let better = match &best {
            None => true,
            Some((_, b)) => obj < *b,
        };
        if better {
            best = Some((m, obj));
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synth, SynthSpec};
    use crate::metrics::acc;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts = Matrix::from_vec(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        let out = kmeans(&pts, 4, 3, 7).unwrap();
        assert!(out.inertia <= 1e-24);
        let mut sorted = out.membership.as_slice().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for c in 0..2 {
            let center = if c == 0 { -5.0 } else { 5.0 };
            for _ in 0..30 {
                rows.push(center + rng.gen_range(-0.5..0.5));
                rows.push(center + rng.gen_range(-0.5..0.5));
                truth.push(c);
            }
        }
        let pts = Matrix::from_vec(60, 2, rows).unwrap();
        let out = kmeans(&pts, 2, 5, 11).unwrap();
        assert_eq!(acc(out.membership.as_slice(), &truth).unwrap(), 100.0);
    }

    #[test]
    fn lloyd_inertia_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let rows: Vec<f64> = (0..200 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts = Matrix::from_vec(200, 5, rows).unwrap();
        let out = kmeans(&pts, 6, 1, 13).unwrap();
        for t in 1..out.inertia_trace.len() {
            assert!(out.inertia_trace[t] <= out.inertia_trace[t - 1] + 1e-9);
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let rows: Vec<f64> = (0..100 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts = Matrix::from_vec(100, 3, rows).unwrap();
        let a = kmeans(&pts, 4, 5, 17).unwrap();
        let b = kmeans(&pts, 4, 5, 17).unwrap();
        assert_eq!(a.membership.as_slice(), b.membership.as_slice());
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn pca_ks_recovers_embedded_subspace_data() {
        // Subspace data in ℝ⁶ embedded into ℝ²⁰ by an orthonormal map.
        let spec = SynthSpec {
            k: 3,
            d: 6,
            p: 2,
            points_per_cluster: 40,
            noise_sigma: 0.0,
            outlier_count: 0,
            seed: 5,
        };
        let (low, labels, _) = gen_synth(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let embed = random_subspace_set(1, 20, 6, &mut rng).unwrap();
        let e = embed.get(0).matrix();
        let mut rows = Vec::new();
        for i in 0..low.rows() {
            rows.extend(e.mul_vec(low.row(i)).unwrap());
        }
        let high = Matrix::from_vec(low.rows(), 20, rows).unwrap();
        let cfg = KscConfig {
            k: 3,
            p: 2,
            ..KscConfig::default()
        };
        let (m, _) = pca_ks(&high, 6, &cfg, 19, 10).unwrap();
        let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        assert_eq!(acc(m.as_slice(), &truth).unwrap(), 100.0);
    }

    #[test]
    fn pca_ks_full_dim_matches_plain_ksc_on_centered_data() {
        let spec = SynthSpec {
            k: 2,
            d: 5,
            p: 2,
            points_per_cluster: 30,
            noise_sigma: 0.05,
            outlier_count: 0,
            seed: 6,
        };
        let (pts, _, _) = gen_synth(&spec).unwrap();
        // Zero-mean the data so PCA is a pure rotation of it.
        let mean = mean_point(&pts);
        let mut rows = Vec::new();
        for i in 0..pts.rows() {
            rows.extend(pts.row(i).iter().zip(mean.iter()).map(|(x, m)| x - m));
        }
        let centered = Matrix::from_vec(pts.rows(), 5, rows).unwrap();

        let cfg = KscConfig {
            k: 2,
            p: 2,
            ..KscConfig::default()
        };
        let (m_pca, _) = pca_ks(&centered, 5, &cfg, 23, 1).unwrap();

        // Same rotation + same seeded init, run directly.
        let cols: Vec<Vec<f64>> = (0..centered.rows())
            .map(|i| centered.row(i).to_vec())
            .collect();
        let comp = top_p_left_singular_vectors(&Matrix::from_cols(&cols).unwrap(), 5).unwrap();
        let mut prows = Vec::new();
        for c in &cols {
            prows.extend(comp.tr_mul_vec(c).unwrap());
        }
        let projected = Matrix::from_vec(centered.rows(), 5, prows).unwrap();
        let init = random_subspace_set(2, 5, 2, &mut restart_rng(23, 0)).unwrap();
        let (_, m_direct, _) = run_plain_ksc(&projected, &cfg, &init).unwrap();
        assert_eq!(m_pca.as_slice(), m_direct.as_slice());
    }
}
