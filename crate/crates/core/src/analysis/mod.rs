//! Gating-feature distribution analysis: 2-D t-SNE embedding, k-means
//! clustering, inertia and silhouette score.

mod kmeans;
mod tsne;

pub use kmeans::{kmeans, ClusterResult, KMeansConfig};
pub use tsne::{tsne, EmbeddingResult, TsneConfig};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("analysis config: {0}")]
    Config(String),
    #[error("analysis data: {0}")]
    Data(String),
    #[error("cluster index {index} out of range for {clusters} centroids")]
    Index { index: usize, clusters: usize },
    #[error("undefined metric: {0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Checks that `x` is a non-empty, finite, rectangular point set and
/// returns its dimension.
pub(crate) fn check_points(x: &[Vec<f64>]) -> Result<usize> {
    let d = x
        .first()
        .map(Vec::len)
        .ok_or_else(|| AnalysisError::Data("no points".into()))?;
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Data("points must share one positive dimension".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Data("non-finite coordinate".into()));
    }
    Ok(d)
}

/// Per-dimension z-score (population std). Constant dimensions map to 0.
pub fn standardize(x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = check_points(x)?;
    let n = x.len() as f64;
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in &mut out {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    Ok(out)
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(x: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> Result<f64> {
    if x.len() != assignments.len() {
        return Err(AnalysisError::Data(format!(
            "{} points but {} assignments",
            x.len(),
            assignments.len()
        )));
    }
    let mut total = 0.0;
    for (p, &a) in x.iter().zip(assignments) {
        let c = centroids.get(a).ok_or(AnalysisError::Index {
            index: a,
            clusters: centroids.len(),
        })?;
        if c.len() != p.len() {
            return Err(AnalysisError::Data("centroid and point dimensions differ".into()));
        }
        total += sq_dist(p, c);
    }
    Ok(total)
}

/// Mean silhouette over all points with Euclidean distance. Points in a
/// singleton cluster score 0. Cluster labels need not be contiguous.
pub fn silhouette(x: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_points(x)?;
    if x.len() != assignments.len() {
        return Err(AnalysisError::Data(format!(
            "{} points but {} assignments",
            x.len(),
            assignments.len()
        )));
    }
    let mut labels: Vec<usize> = assignments.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(AnalysisError::Undefined(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let slot = |a: usize| labels.binary_search(&a).expect("label present");
    let mut sizes = vec![0usize; labels.len()];
    for &a in assignments {
        sizes[slot(a)] += 1;
    }
    let n = x.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; labels.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot(assignments[j])] += sq_dist(&x[i], &x[j]).sqrt();
            }
        }
        let own = slot(assignments[i]);
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..labels.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation from per-cluster member lists.
    fn silhouette_oracle(x: &[Vec<f64>], a: &[usize]) -> f64 {
        let dist = |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt() };
        let clusters: std::collections::BTreeSet<usize> = a.iter().copied().collect();
        let members = |c: usize| -> Vec<usize> { (0..x.len()).filter(|&i| a[i] == c).collect() };
        let mut s = Vec::new();
        for i in 0..x.len() {
            let own = members(a[i]);
            if own.len() == 1 {
                s.push(0.0);
                continue;
            }
            let ai = own
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist(&x[i], &x[j]))
                .sum::<f64>()
                / (own.len() - 1) as f64;
            let bi = clusters
                .iter()
                .filter(|&&c| c != a[i])
                .map(|&c| {
                    let m = members(c);
                    m.iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / m.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            s.push(if ai.max(bi) == 0.0 { 0.0 } else { (bi - ai) / ai.max(bi) });
        }
        s.iter().sum::<f64>() / s.len() as f64
    }

    fn inertia_oracle(x: &[Vec<f64>], a: &[usize], c: &[Vec<f64>]) -> f64 {
        let mut t = 0.0;
        for i in 0..x.len() {
            for j in 0..x[i].len() {
                let e = x[i][j] - c[a[i]][j];
                t += e * e;
            }
        }
        t
    }

    fn random_instance(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=n.min(6));
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        // every cluster gets at least one member
        let a: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let c: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        (x, a, c)
    }

    #[test]
    fn inertia_hand_cases() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(inertia(&x, &[0, 1], &x).unwrap(), 0.0);
        assert_eq!(inertia(&[vec![2.0, 0.0]], &[0], &[vec![0.0, 0.0]]).unwrap(), 4.0);
        assert_eq!(
            inertia(&x, &[0, 2], &x).unwrap_err(),
            AnalysisError::Index { index: 2, clusters: 2 }
        );
    }

    #[test]
    fn separated_and_adversarial_fixtures() {
        let eps = 0.01;
        let x = vec![vec![0.0], vec![eps], vec![100.0], vec![100.0 + eps]];
        let good = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        let bad = silhouette(&x, &[0, 1, 0, 1]).unwrap();
        assert!(good > 0.9, "{good}");
        assert!(bad < 0.0, "{bad}");
        assert!((good - silhouette_oracle(&x, &[0, 0, 1, 1])).abs() < 1e-12);
        assert!((bad - silhouette_oracle(&x, &[0, 1, 0, 1])).abs() < 1e-12);
    }

    #[test]
    fn silhouette_edge_cases() {
        let x = vec![vec![0.0], vec![1.0], vec![5.0]];
        assert!(matches!(silhouette(&x, &[3, 3, 3]), Err(AnalysisError::Undefined(_))));
        // singleton points contribute 0; labels need not be contiguous
        let s = silhouette(&x, &[4, 4, 9]).unwrap();
        assert!((s - silhouette_oracle(&x, &[4, 4, 9])).abs() < 1e-12);
    }

    #[test]
    fn oracle_suite_up_to_64_points() {
        for seed in 0..300 {
            let (x, a, c) = random_instance(seed);
            let i = inertia(&x, &a, &c).unwrap();
            assert!((i - inertia_oracle(&x, &a, &c)).abs() <= 1e-9 * i.max(1.0));
            let s = silhouette(&x, &a).unwrap();
            assert!((s - silhouette_oracle(&x, &a)).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn standardize_moments() {
        let x = vec![vec![1.0, 5.0, 2.0], vec![3.0, 5.0, 4.0], vec![8.0, 5.0, 9.0]];
        let z = standardize(&x).unwrap();
        for j in 0..3 {
            let m: f64 = z.iter().map(|r| r[j]).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
        assert!(z.iter().all(|r| r[1] == 0.0));
        let v: f64 = z.iter().map(|r| r[0] * r[0]).sum::<f64>() / 3.0;
        assert!((v - 1.0).abs() < 1e-12);
        assert!(standardize(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(standardize(&[vec![f64::NAN]]).is_err());
    }

    proptest! {
        #[test]
        fn silhouette_bounded(seed in any::<u64>()) {
            let (x, a, _) = random_instance(seed);
            let s = silhouette(&x, &a).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
