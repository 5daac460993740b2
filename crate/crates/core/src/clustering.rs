//! K-means over embeddings and clustering accuracy via optimal
//! cluster-to-class matching — the reward oracle for the RL loop.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when no center moves more than this (L2).
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self { k, max_iters: 100, tol: 1e-4, restarts: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub wcss: f64,
    /// WCSS after each assignment step of the winning restart.
    pub wcss_trace: Vec<f64>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(x: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (m, d) = x.dim();
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..m);
    centers.row_mut(0).assign(&x.row(first));
    let mut dists: Vec<f64> = (0..m)
        .map(|i| dist_sq(x.row(i).as_slice().unwrap(), centers.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = dists.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..m)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in dists.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.row_mut(c).assign(&x.row(pick));
        for i in 0..m {
            let d2 = dist_sq(x.row(i).as_slice().unwrap(), centers.row(c).as_slice().unwrap());
            if d2 < dists[i] {
                dists[i] = d2;
            }
        }
    }
    centers
}

/// Lloyd iterations from a k-means++ start, best of `restarts` by final
/// WCSS. Empty clusters are re-seeded to the point farthest from its
/// current center.
pub fn kmeans_fit(x: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let (m, d) = x.dim();
    if cfg.k < 1 {
        return Err(Error::InvalidParam("k must be ≥ 1".into()));
    }
    if m < cfg.k {
        return Err(Error::InvalidParam(format!("{m} points cannot form {} clusters", cfg.k)));
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let mut centers = plus_plus_init(&x, cfg.k, &mut rng);
        let mut assignments = vec![0usize; m];
        let mut trace = Vec::new();
        for _ in 0..cfg.max_iters {
            // assignment step + WCSS at the current centers
            let mut wcss = 0.0;
            for i in 0..m {
                let xi = x.row(i);
                let xi = xi.as_slice().unwrap();
                let mut best_c = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..cfg.k {
                    let d2 = dist_sq(xi, centers.row(c).as_slice().unwrap());
                    if d2 < best_d {
                        best_d = d2;
                        best_c = c;
                    }
                }
                assignments[i] = best_c;
                wcss += best_d;
            }
            trace.push(wcss);

            // update step
            let mut sums = Array2::<f64>::zeros((cfg.k, d));
            let mut counts = vec![0usize; cfg.k];
            for i in 0..m {
                let c = assignments[i];
                counts[c] += 1;
                let mut row = sums.row_mut(c);
                row += &x.row(i);
            }
            let mut movement: f64 = 0.0;
            for c in 0..cfg.k {
                if counts[c] == 0 {
                    // re-seed to the point farthest from its own center
                    let far = (0..m)
                        .max_by(|&a, &b| {
                            let da = dist_sq(x.row(a).as_slice().unwrap(), centers.row(assignments[a]).as_slice().unwrap());
                            let db = dist_sq(x.row(b).as_slice().unwrap(), centers.row(assignments[b]).as_slice().unwrap());
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    centers.row_mut(c).assign(&x.row(far));
                    movement = f64::INFINITY;
                } else {
                    let inv = 1.0 / counts[c] as f64;
                    let mut moved = 0.0;
                    for j in 0..d {
                        let new = sums[[c, j]] * inv;
                        let diff = new - centers[[c, j]];
                        moved += diff * diff;
                        centers[[c, j]] = new;
                    }
                    movement = movement.max(moved.sqrt());
                }
            }
            if movement < cfg.tol {
                break;
            }
        }
        // final assignment/WCSS at the converged centers
        let mut wcss = 0.0;
        for i in 0..m {
            let xi = x.row(i);
            let xi = xi.as_slice().unwrap();
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..cfg.k {
                let d2 = dist_sq(xi, centers.row(c).as_slice().unwrap());
                if d2 < best_d {
                    best_d = d2;
                    best_c = c;
                }
            }
            assignments[i] = best_c;
            wcss += best_d;
        }
        trace.push(wcss);
        let fit = KMeansFit { assignments, centers, wcss, wcss_trace: trace };
        if best.as_ref().map_or(true, |b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Minimum-cost square assignment (Jonker/e-maxx potentials, O(n³)).
/// Returns `at[row] = col`.
fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row matched to col (1-based; 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut at = vec![0usize; n];
    for j in 1..=n {
        at[p[j] - 1] = j - 1;
    }
    at
}

/// Best one-to-one cluster→class matching accuracy in [0, 1].
pub fn cluster_accuracy(assignments: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if assignments.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments vs {} labels",
            assignments.len(),
            truth.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::InvalidParam("empty label sets".into()));
    }
    let m = assignments.len();
    let mut contingency = Array2::<f64>::zeros((k, k));
    for (&a, &t) in assignments.iter().zip(truth.iter()) {
        if a >= k || t >= k {
            return Err(Error::InvalidParam(format!("label {} out of range for k={k}", a.max(t))));
        }
        contingency[[a, t]] += 1.0;
    }
    // maximize matched count == minimize (max − count)
    let maxc = contingency.iter().cloned().fold(0.0f64, f64::max);
    let cost = contingency.mapv(|c| maxc - c);
    let at = hungarian_min(&cost);
    let matched: f64 = (0..k).map(|c| contingency[[c, at[c]]]).sum();
    Ok(matched / m as f64)
}

/// Eq.-style reward: the change in clustering accuracy.
pub fn reward(acc_t: f64, acc_prev: f64) -> f64 {
    acc_t - acc_prev
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_accuracy(assignments: &[usize], truth: &[usize], k: usize) -> f64 {
        let mut contingency = vec![vec![0usize; k]; k];
        for (&a, &t) in assignments.iter().zip(truth.iter()) {
            contingency[a][t] += 1;
        }
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0usize;
        permute(&mut perm, 0, &mut |p| {
            let s: usize = (0..k).map(|c| contingency[c][p[c]]).sum();
            best = best.max(s);
        });
        best as f64 / assignments.len() as f64
    }

    fn permute(v: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
        if start == v.len() {
            visit(v);
            return;
        }
        for i in start..v.len() {
            v.swap(start, i);
            permute(v, start + 1, visit);
            v.swap(start, i);
        }
    }

    #[test]
    fn separated_clouds_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        for _ in 0..20 {
            pts.push([0.0 + rng.gen_range(-0.1..0.1), 0.0 + rng.gen_range(-0.1..0.1)]);
        }
        for _ in 0..20 {
            pts.push([10.0 + rng.gen_range(-0.1..0.1), 10.0 + rng.gen_range(-0.1..0.1)]);
        }
        let x = Array2::from_shape_fn((40, 2), |(i, j)| pts[i][j]);
        let fit = kmeans_fit(x.view(), &KMeansConfig::new(2)).unwrap();
        let truth: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let acc = cluster_accuracy(&fit.assignments, &truth, 2).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn k_equals_m_gives_zero_wcss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let fit = kmeans_fit(x.view(), &KMeansConfig::new(6)).unwrap();
        assert!(fit.wcss < 1e-12, "wcss {}", fit.wcss);
    }

    #[test]
    fn wcss_trace_is_monotone_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..20 {
            let x = Array2::from_shape_fn((60, 4), |_| rng.gen_range(-1.0..1.0));
            let mut cfg = KMeansConfig::new(5);
            cfg.seed = case;
            let fit = kmeans_fit(x.view(), &cfg).unwrap();
            for w in fit.wcss_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "trace rose: {:?}", w);
            }
        }
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((30, 3), |_| rng.gen_range(-1.0..1.0));
        let cfg = KMeansConfig { seed: 11, ..KMeansConfig::new(3) };
        let a = kmeans_fit(x.view(), &cfg).unwrap();
        let b = kmeans_fit(x.view(), &cfg).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.wcss, b.wcss);
    }

    #[test]
    fn kmeans_rejects_more_clusters_than_points() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(kmeans_fit(x.view(), &KMeansConfig::new(4)).is_err());
    }

    #[test]
    fn relabeling_permutation_scores_one() {
        let acc = cluster_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn even_split_scores_half() {
        let acc = cluster_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(brute_force_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1], 2), 0.5);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.gen_range(2..=5);
            let m = rng.gen_range(k..=40);
            let assignments: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
            let truth: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
            let fast = cluster_accuracy(&assignments, &truth, k).unwrap();
            let brute = brute_force_accuracy(&assignments, &truth, k);
            assert!((fast - brute).abs() < 1e-12, "k={k} m={m}: {fast} vs {brute}");
        }
    }

    #[test]
    fn accuracy_is_invariant_to_cluster_index_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = 4;
        let assignments: Vec<usize> = (0..30).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..30).map(|_| rng.gen_range(0..k)).collect();
        let base = cluster_accuracy(&assignments, &truth, k).unwrap();
        let perm = [2usize, 0, 3, 1];
        let renamed: Vec<usize> = assignments.iter().map(|&a| perm[a]).collect();
        let again = cluster_accuracy(&renamed, &truth, k).unwrap();
        assert_eq!(base, again);
    }

    #[test]
    fn accuracy_dominates_best_single_pair_and_majority_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let k = rng.gen_range(2..=5);
            let m = 30;
            let assignments: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
            let truth: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
            let mut cont = vec![vec![0usize; k]; k];
            for (&a, &t) in assignments.iter().zip(truth.iter()) {
                cont[a][t] += 1;
            }
            let best_cell = cont.iter().flatten().max().copied().unwrap() as f64 / m as f64;
            let acc = cluster_accuracy(&assignments, &truth, k).unwrap();
            assert!(acc >= best_cell - 1e-12, "acc {acc} best cell {best_cell}");
        }
        // degenerate single-cluster assignment achieves exactly the majority fraction
        let truth = [0usize, 0, 0, 0, 0, 0, 0, 1, 1, 2];
        let assignments = [0usize; 10];
        let acc = cluster_accuracy(&assignments, &truth, 3).unwrap();
        assert_eq!(acc, 0.7);
    }

    #[test]
    fn reward_is_accuracy_difference() {
        assert!((reward(0.55, 0.50) - 0.05).abs() < 1e-12);
        assert_eq!(reward(0.4, 0.4), 0.0);
        assert!((reward(0.3, 0.6) + 0.3).abs() < 1e-12);
    }
}
