use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_points, inertia, silhouette, sq_dist, AnalysisError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 9,
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// `None` when fewer than two clusters are populated.
    pub silhouette: Option<f64>,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// Final inertia of every restart, in order.
    pub restart_inertias: Vec<f64>,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// k-means++ seeding: the first centre uniformly, then each next one with
/// probability proportional to the squared distance to the nearest chosen
/// centre.
fn seed_centroids(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &x[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // guard against rounding walking off the end onto a chosen point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("total > 0");
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in x.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &x[next]));
        }
    }
    chosen.iter().map(|&i| x[i].clone()).collect()
}

/// Cluster means. An empty cluster takes over the point farthest from its
/// current centre (from a cluster with more than one member).
fn update(x: &[Vec<f64>], assign: &mut [usize], k: usize) -> Vec<Vec<f64>> {
    let d = x[0].len();
    loop {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in x.iter().zip(assign.iter()) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect())
            .collect();
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return means;
        };
        let far = (0..x.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&i, &j| {
                sq_dist(&x[i], &means[assign[i]])
                    .total_cmp(&sq_dist(&x[j], &means[assign[j]]))
                    .then(j.cmp(&i))
            })
            .expect("k <= n leaves a cluster with two members");
        assign[far] = empty;
    }
}

fn lloyd(x: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let seeds = seed_centroids(x, k, rng);
    let mut assign: Vec<usize> = x.iter().map(|p| nearest(p, &seeds)).collect();
    let mut centroids = update(x, &mut assign, k);
    let mut trace = vec![inertia(x, &assign, &centroids).expect("consistent")];
    for _ in 0..max_iter {
        let next: Vec<usize> = x.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
        centroids = update(x, &mut assign, k);
        trace.push(inertia(x, &assign, &centroids).expect("consistent"));
    }
    (assign, centroids, trace)
}

/// Best-of-`restarts` k-means (k-means++ seeding, Lloyd iterations until
/// the assignment stops changing or `max_iter`). Ties in the distance go to
/// the lower cluster index; ties in final inertia to the earlier restart.
pub fn kmeans(x: &[Vec<f64>], cfg: &KMeansConfig, seed: u64) -> Result<ClusterResult> {
    check_points(x)?;
    if cfg.k == 0 || cfg.k > x.len() {
        return Err(AnalysisError::Config(format!(
            "k = {} must lie in [1, {}] for {} points",
            cfg.k,
            x.len(),
            x.len()
        )));
    }
    if cfg.restarts == 0 {
        return Err(AnalysisError::Config("restarts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> = None;
    let mut restart_inertias = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts {
        let run = lloyd(x, cfg.k, cfg.max_iter, &mut rng);
        let final_inertia = *run.2.last().expect("non-empty trace");
        restart_inertias.push(final_inertia);
        if best
            .as_ref()
            .is_none_or(|b| final_inertia < *b.2.last().expect("non-empty"))
        {
            best = Some(run);
        }
    }
    let (assignments, centroids, inertia_trace) = best.expect("restarts > 0");
    let inertia = *inertia_trace.last().expect("non-empty");
    let silhouette = silhouette(x, &assignments).ok();
    Ok(ClusterResult {
        assignments,
        centroids,
        inertia,
        silhouette,
        inertia_trace,
        restart_inertias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn blobs(seed: u64, n: usize, k: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| ((i % k) * 10 + j) as f64 + rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn one_point_per_cluster() {
        let x = blobs(1, 7, 7, 3);
        let r = kmeans(
            &x,
            &KMeansConfig {
                k: 7,
                restarts: 3,
                max_iter: 50,
            },
            0,
        )
        .unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn two_pairs_match_exhaustive_partition() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![11.0, 10.0]];
        // brute force over all 2-partitions of 4 points
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..15 {
            let a: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            let mean = |c: usize| -> Vec<f64> {
                let m: Vec<&Vec<f64>> = (0..4).filter(|&i| a[i] == c).map(|i| &x[i]).collect();
                (0..2)
                    .map(|j| m.iter().map(|p| p[j]).sum::<f64>() / m.len() as f64)
                    .collect()
            };
            let i = inertia(&x, &a, &[mean(0), mean(1)]).unwrap();
            if i < best.0 {
                best = (i, mask);
            }
        }
        let r = kmeans(
            &x,
            &KMeansConfig {
                k: 2,
                restarts: 5,
                max_iter: 100,
            },
            3,
        )
        .unwrap();
        assert!((r.inertia - best.0).abs() < 1e-12);
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let c0 = &r.centroids[r.assignments[0]];
        let c1 = &r.centroids[r.assignments[2]];
        assert_eq!((c0.as_slice(), c1.as_slice()), (&[0.0, 0.5][..], &[10.5, 10.0][..]));
    }

    #[test]
    fn converged_points_sit_at_nearest_centroid() {
        let x = blobs(4, 60, 4, 3);
        let r = kmeans(
            &x,
            &KMeansConfig {
                k: 4,
                restarts: 4,
                max_iter: 300,
            },
            9,
        )
        .unwrap();
        for (p, &a) in x.iter().zip(&r.assignments) {
            assert_eq!(nearest(p, &r.centroids), a);
        }
        assert!((r.inertia - inertia(&x, &r.assignments, &r.centroids).unwrap()).abs() < 1e-9);
        assert!(r.silhouette.unwrap() > 0.5);
    }

    #[test]
    fn duplicates_and_errors() {
        let x = vec![vec![1.0]; 5];
        let r = kmeans(
            &x,
            &KMeansConfig {
                k: 3,
                restarts: 2,
                max_iter: 10,
            },
            0,
        )
        .unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(kmeans(
            &x,
            &KMeansConfig {
                k: 6,
                ..Default::default()
            },
            0
        )
        .is_err());
        assert!(kmeans(
            &x,
            &KMeansConfig {
                k: 0,
                ..Default::default()
            },
            0
        )
        .is_err());
        assert!(kmeans(&[], &KMeansConfig::default(), 0).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // two centres start on the right; one cluster would be empty
        let x = vec![vec![0.0], vec![0.1], vec![0.2], vec![9.0]];
        let mut assign = vec![0, 0, 0, 0];
        let c = update(&x, &mut assign, 2);
        assert_eq!(assign.iter().filter(|&&a| a == 1).count(), 1);
        assert_eq!(assign[3], 1);
        assert_eq!(c[1], vec![9.0]);
    }

    proptest! {
        #[test]
        fn lloyd_is_monotone_and_restarts_bound_best(seed in any::<u64>(), k in 1usize..6) {
            let x = blobs(seed, 40, 3, 2);
            let r = kmeans(&x, &KMeansConfig { k, restarts: 3, max_iter: 100 }, seed).unwrap();
            for w in r.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
            for &i in &r.restart_inertias {
                prop_assert!(r.inertia <= i);
            }
            let again = kmeans(&x, &KMeansConfig { k, restarts: 3, max_iter: 100 }, seed).unwrap();
            prop_assert_eq!(r, again);
        }
    }
}
