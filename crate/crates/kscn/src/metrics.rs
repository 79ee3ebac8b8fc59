//! Clustering evaluation: unsupervised accuracy under the best one-to-one
//! label mapping (Hungarian algorithm on the contingency table), normalized
//! mutual information, and the adjusted Rand index.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// ACC (percent), NMI in `[0,1]`, ARI in `[−1,1]` for a predicted partition
/// against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClusterMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

impl ClusterMetrics {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        Ok(Self {
            acc: acc(pred, truth)?,
            nmi: nmi(pred, truth)?,
            ari: ari(pred, truth)?,
        })
    }
}

/// Contingency table between two labelings, with dense re-indexed labels.
struct Contingency {
    counts: Vec<Vec<u64>>, // [pred][truth]
    pred_sizes: Vec<u64>,
    truth_sizes: Vec<u64>,
    n: u64,
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency> {
    if pred.is_empty() {
        return Err(Error::Config("metrics on empty labelings".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Dim(format!(
            "label length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let index = |labels: &[usize]| -> BTreeMap<usize, usize> {
        let mut map = BTreeMap::new();
        for &l in labels {
            let next = map.len();
            map.entry(l).or_insert(next);
        }
        map
    };
    let pi = index(pred);
    let ti = index(truth);
    let mut counts = vec![vec![0u64; ti.len()]; pi.len()];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        counts[pi[&p]][ti[&t]] += 1;
    }
    let pred_sizes: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let mut truth_sizes = vec![0u64; ti.len()];
    for row in &counts {
        for (j, &c) in row.iter().enumerate() {
            truth_sizes[j] += c;
        }
    }
    Ok(Contingency {
        counts,
        pred_sizes,
        truth_sizes,
        n: pred.len() as u64,
    })
}

/// Minimum-cost assignment on a square cost matrix by shortest augmenting
/// paths with potentials. Returns, for each column, the matched row.
fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // 1-based; 0 = unmatched
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| matched_row[j] - 1).collect()
}

/// Unsupervised clustering accuracy in percent: the best one-to-one mapping
/// between predicted clusters and ground-truth labels, found by the
/// Hungarian algorithm on the (zero-padded) contingency matrix.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    let k = ct.counts.len().max(ct.counts[0].len());
    // Maximize matches == minimize negated counts; padding rows/cols of
    // zeros handles unequal cluster counts.
    let mut cost = vec![vec![0i64; k]; k];
    for (i, row) in ct.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i][j] = -(c as i64);
        }
    }
    let matched_row = hungarian(&cost);
    let mut matches = 0u64;
    for (j, &i) in matched_row.iter().enumerate() {
        if i < ct.counts.len() && j < ct.counts[0].len() {
            matches += ct.counts[i][j];
        }
    }
    Ok(100.0 * matches as f64 / ct.n as f64)
}

/// Normalized mutual information with sqrt-of-entropy-product
/// normalization and natural logs; 0/0 is defined as 0, and two trivial
/// single-cluster partitions score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    if ct.counts.len() == 1 && ct.counts[0].len() == 1 {
        return Ok(1.0);
    }
    let n = ct.n as f64;
    let entropy = |sizes: &[u64]| -> f64 {
        sizes
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let f = s as f64 / n;
                -f * f.ln()
            })
            .sum()
    };
    let hp = entropy(&ct.pred_sizes);
    let ht = entropy(&ct.truth_sizes);
    let mut mi = 0.0;
    for (i, row) in ct.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let nij = c as f64;
            mi +=
                (nij / n) * ((n * nij) / (ct.pred_sizes[i] as f64 * ct.truth_sizes[j] as f64)).ln();
        }
    }
    let denom = (hp * ht).sqrt();
    if denom == 0.0 || mi <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Adjusted Rand index from pair counting over the contingency table.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    let kp = ct.counts.len();
    let kt = ct.counts[0].len();
    let n = ct.n;
    // Degenerate partitions carry no pair information.
    if (kp == 1 && kt == 1) || (kp as u64 == n && kt as u64 == n) {
        return Ok(1.0);
    }
    let comb2 = |x: u64| -> f64 {
        let x = x as f64;
        x * (x - 1.0) / 2.0
    };
    let sum_cells: f64 = ct
        .counts
        .iter()
        .flat_map(|r| r.iter())
        .map(|&c| comb2(c))
        .sum();
    let sum_pred: f64 = ct.pred_sizes.iter().map(|&s| comb2(s)).sum();
    let sum_truth: f64 = ct.truth_sizes.iter().map(|&s| comb2(s)).sum();
    let total = comb2(n);
    let expected = sum_pred * sum_truth / total;
    let max_index = 0.5 * (sum_pred + sum_truth);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive-permutation accuracy oracle for small k.
    fn acc_bruteforce(pred: &[usize], truth: &[usize]) -> f64 {
        let kp = pred.iter().max().unwrap() + 1;
        let kt = truth.iter().max().unwrap() + 1;
        let k = kp.max(kt);
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0usize;
        permute(&mut perm, 0, &mut |p| {
            let matches = pred
                .iter()
                .zip(truth.iter())
                .filter(|&(&a, &b)| p[a] == b)
                .count();
            best = best.max(matches);
        });
        100.0 * best as f64 / pred.len() as f64
    }

    fn permute(perm: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
        if at == perm.len() {
            f(perm);
            return;
        }
        for i in at..perm.len() {
            perm.swap(at, i);
            permute(perm, at + 1, f);
            perm.swap(at, i);
        }
    }

    #[test]
    fn identical_partitions_are_perfect() {
        let labels = vec![0, 1, 2, 1, 0, 2, 2];
        let m = ClusterMetrics::compute(&labels, &labels).unwrap();
        assert_eq!(m.acc, 100.0);
        assert_eq!(m.nmi, 1.0);
        assert_eq!(m.ari, 1.0);
    }

    #[test]
    fn acc_is_permutation_invariant() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let pred = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(acc(&pred, &truth).unwrap(), 100.0);
    }

    #[test]
    fn acc_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let k = rng.gen_range(1..=4usize);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let fast = acc(&pred, &truth).unwrap();
            let brute = acc_bruteforce(&pred, &truth);
            assert_eq!(fast, brute, "pred {pred:?} truth {truth:?}");
        }
    }

    #[test]
    fn nmi_one_cluster_vs_many_is_zero() {
        let pred = vec![0, 0, 0, 0];
        let truth = vec![0, 1, 2, 3];
        assert_eq!(nmi(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn nmi_matches_direct_formula_on_fixture() {
        // Fixed 3×3 contingency: rows are pred clusters, columns truth.
        //   [4 1 0]
        //   [1 3 1]
        //   [0 1 4]
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let table = [[4, 1, 0], [1, 3, 1], [0, 1, 4]];
        for (i, row) in table.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    pred.push(i);
                    truth.push(j);
                }
            }
        }
        // Independent direct evaluation of the entropy/MI formulas.
        let n = 15.0f64;
        let a = [5.0f64, 5.0, 5.0];
        let b = [5.0f64, 5.0, 5.0];
        let mut mi = 0.0;
        for (i, row) in table.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let nij = c as f64;
                    mi += nij / n * ((n * nij) / (a[i] * b[j])).ln();
                }
            }
        }
        let h: f64 = -(3.0 * (5.0 / n * (5.0f64 / n).ln()));
        let expect = mi / (h * h).sqrt();
        assert!((nmi(&pred, &truth).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn ari_all_in_one_cluster_is_zero() {
        let pred = vec![0; 6];
        let truth = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(ari(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn ari_matches_pair_counting_oracle() {
        let pred = vec![0, 0, 1, 1, 2, 2];
        let truth = vec![0, 0, 0, 1, 1, 1];
        // Oracle: enumerate all C(6,2) pairs and count agreements.
        let n = 6;
        let mut same_both = 0.0;
        let mut same_pred = 0.0;
        let mut same_truth = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += 1.0;
                let sp = pred[i] == pred[j];
                let st = truth[i] == truth[j];
                if sp {
                    same_pred += 1.0;
                }
                if st {
                    same_truth += 1.0;
                }
                if sp && st {
                    same_both += 1.0;
                }
            }
        }
        let expected = same_pred * same_truth / total;
        let max_index = 0.5 * (same_pred + same_truth);
        let oracle = (same_both - expected) / (max_index - expected);
        assert!((ari(&pred, &truth).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(acc(&[0, 1], &[0]).is_err());
        assert!(nmi(&[0, 1], &[0]).is_err());
        assert!(ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn empty_input_errors() {
        assert!(acc(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_in_range(
            labels in proptest::collection::vec((0usize..4, 0usize..4), 1..40)
        ) {
            let pred: Vec<usize> = labels.iter().map(|&(a, _)| a).collect();
            let truth: Vec<usize> = labels.iter().map(|&(_, b)| b).collect();
            let a1 = acc(&pred, &truth).unwrap();
            let a2 = acc(&truth, &pred).unwrap();
            prop_assert!((a1 - a2).abs() <= 1e-9);
            prop_assert!((0.0..=100.0).contains(&a1));

            let n1 = nmi(&pred, &truth).unwrap();
            let n2 = nmi(&truth, &pred).unwrap();
            prop_assert!((n1 - n2).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&n1));

            let r1 = ari(&pred, &truth).unwrap();
            let r2 = ari(&truth, &pred).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r1));
        }

        #[test]
        fn metrics_invariant_under_relabeling(
            labels in proptest::collection::vec((0usize..4, 0usize..4), 2..40),
            shift in 1usize..4
        ) {
            let pred: Vec<usize> = labels.iter().map(|&(a, _)| a).collect();
            let truth: Vec<usize> = labels.iter().map(|&(_, b)| b).collect();
            // Relabel pred by a cyclic permutation of its label names.
            let renamed: Vec<usize> = pred.iter().map(|&a| (a + shift) % 4).collect();
            prop_assert!((acc(&pred, &truth).unwrap() - acc(&renamed, &truth).unwrap()).abs() <= 1e-9);
            prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&renamed, &truth).unwrap()).abs() <= 1e-9);
            prop_assert!((ari(&pred, &truth).unwrap() - ari(&renamed, &truth).unwrap()).abs() <= 1e-9);
        }
    }
}
