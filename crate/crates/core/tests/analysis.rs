use m3_core::analysis::{kmeans, standardize, tsne, KMeansConfig, TsneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two 10-D unit-variance blobs whose means are 50 sigma apart.
fn two_blobs(seed: u64, per_blob: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let offset = 50.0 / 10f64.sqrt();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for b in 0..2 {
        for _ in 0..per_blob {
            x.push((0..10).map(|_| nd.sample(&mut rng) + b as f64 * offset).collect());
            labels.push(b);
        }
    }
    (x, labels)
}

fn partition_matches(a: &[usize], b: &[usize]) -> bool {
    let same = a.iter().zip(b).all(|(x, y)| x == y);
    let swapped = a.iter().zip(b).all(|(x, y)| *x == 1 - *y);
    same || swapped
}

#[test]
fn embedding_of_separated_blobs_is_two_means_separable() {
    let cfg = TsneConfig {
        perplexity: 10.0,
        ..TsneConfig::default()
    };
    let mut ok = 0;
    for seed in 0..20 {
        let (x, labels) = two_blobs(seed, 25);
        let e = tsne(&x, &cfg, seed).unwrap();
        let pts: Vec<Vec<f64>> = e.points.iter().map(|p| p.to_vec()).collect();
        let c = kmeans(
            &pts,
            &KMeansConfig {
                k: 2,
                restarts: 5,
                max_iter: 100,
            },
            seed,
        )
        .unwrap();
        if partition_matches(&c.assignments, &labels) {
            ok += 1;
        }
    }
    assert!(ok >= 19, "{ok}/20 separable");
}

#[test]
fn standardized_clustering_recovers_blobs() {
    let (x, labels) = two_blobs(99, 30);
    let z = standardize(&x).unwrap();
    let c = kmeans(
        &z,
        &KMeansConfig {
            k: 2,
            restarts: 3,
            max_iter: 100,
        },
        1,
    )
    .unwrap();
    assert!(partition_matches(&c.assignments, &labels));
    assert!(c.silhouette.unwrap() > 0.9);
}
