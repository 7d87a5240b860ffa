use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_points, sq_dist, AnalysisError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingResult {
    pub points: Vec<[f64; 2]>,
    /// KL(P || Q) after every iteration, against the unexaggerated P.
    pub kl_trace: Vec<f64>,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 200;
const MIN_GAIN: f64 = 0.01;

/// Conditional probabilities `p_{j|i}` for one row of squared distances,
/// with the Gaussian precision found by bisection so that the entropy
/// (nats) equals `ln(perplexity)`.
fn conditional_row(d2: &[f64], i: usize, target: f64) -> Vec<f64> {
    let n = d2.len();
    let mut p = vec![0.0; n];
    let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
    let d_min = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..MAX_BISECTIONS {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            // shift by the nearest distance for numerical range
            p[j] = if j == i { 0.0 } else { (-(d2[j] - d_min) * beta).exp() };
            sum += p[j];
            weighted += (d2[j] - d_min) * p[j];
        }
        let h = sum.ln() + beta * weighted / sum;
        for v in &mut p {
            *v /= sum;
        }
        let diff = h - target;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    p
}

/// Symmetric joint probabilities `(p_{j|i} + p_{i|j}) / 2n`, floored at
/// 1e-12 off the diagonal.
pub(crate) fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = sq_dist(&x[i], &x[j]);
        }
        cond[i * n..(i + 1) * n].copy_from_slice(&conditional_row(&row, i, target));
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

/// Exact O(n^2) t-SNE to two dimensions: gradient descent with momentum
/// 0.5 then 0.8, per-coordinate adaptive gains and early exaggeration.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig, seed: u64) -> Result<EmbeddingResult> {
    check_points(x)?;
    let n = x.len();
    if !(cfg.perplexity >= 1.0) || (n as f64) < 3.0 * cfg.perplexity {
        return Err(AnalysisError::Config(format!(
            "perplexity {} needs at least {} points, got {n}",
            cfg.perplexity,
            (3.0 * cfg.perplexity).ceil()
        )));
    }
    if !(cfg.learning_rate > 0.0 && cfg.early_exaggeration >= 1.0) {
        return Err(AnalysisError::Config(
            "learning rate must be positive and early exaggeration at least 1".into(),
        ));
    }
    let p = joint_probabilities(x, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let exag = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[i * n + j] = v;
                z += v;
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / z).max(1e-12);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
                let m = 4.0 * (exag * pij - q) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                gains[i][c] = if (g[c] > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(MIN_GAIN)
                };
                update[i][c] = momentum * update[i][c] - cfg.learning_rate * gains[i][c] * g[c];
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let mean = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
        if !kl.is_finite() || y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(AnalysisError::Data(format!("t-SNE diverged at iteration {it}")));
        }
        kl_trace.push(kl);
    }
    Ok(EmbeddingResult {
        points: y,
        kl_trace,
        perplexity: cfg.perplexity,
        iterations: cfg.iterations,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_points(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..d).map(|_| nd.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn bandwidths_hit_the_perplexity() {
        let x = gaussian_points(1, 40, 5);
        let n = x.len();
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| sq_dist(&x[i], &x[j])).collect();
            let p = conditional_row(&row, i, 10f64.ln());
            let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            assert!((h - 10f64.ln()).abs() < 1e-4, "row {i}: H = {h}");
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_p_is_symmetric_distribution() {
        let x = gaussian_points(2, 30, 3);
        let p = joint_probabilities(&x, 5.0);
        let n = x.len();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..n {
            assert_eq!(p[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn shape_determinism_and_duplicates() {
        let mut x = gaussian_points(3, 30, 4);
        x[29] = x[0].clone();
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            exaggeration_iters: 100,
            ..TsneConfig::default()
        };
        let a = tsne(&x, &cfg, 11).unwrap();
        let b = tsne(&x, &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 30);
        assert!(a.kl_trace.iter().all(|v| v.is_finite()));
        let d = |i: usize, j: usize| {
            let (p, q) = (a.points[i], a.points[j]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let mut all: Vec<f64> = (0..30)
            .flat_map(|i| (i + 1..30).map(move |j| (i, j)))
            .map(|(i, j)| d(i, j))
            .collect();
        all.sort_by(f64::total_cmp);
        assert!(d(0, 29) < all[all.len() / 2]);
        // late-phase KL is lower than at the end of exaggeration
        assert!(a.kl_trace[299] < a.kl_trace[100]);
    }

    #[test]
    fn config_errors() {
        let x = gaussian_points(4, 20, 2);
        let too_big = TsneConfig {
            perplexity: 7.0,
            ..TsneConfig::default()
        };
        assert!(matches!(tsne(&x, &too_big, 0), Err(AnalysisError::Config(_))));
        let bad_lr = TsneConfig {
            perplexity: 5.0,
            learning_rate: 0.0,
            ..TsneConfig::default()
        };
        assert!(tsne(&x, &bad_lr, 0).is_err());
    }
}
