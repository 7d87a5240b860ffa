//! Central-difference verification of analytic gradients.
//!
//! The check is deliberately black-box: it only sees a scalar function of a
//! flat `f64` vector. Callers that verify parameter gradients write the
//! perturbed vector back into the layer inside the closure.
//!
//! A ReLU or max-pool switch inside `[x - h, x + h]` corrupts the difference
//! quotient. The step is shrunk by 4 until two successive central estimates
//! agree and the one-sided slopes converge the way a smooth function's do;
//! a coordinate is skipped only if that never happens.

use super::{Result, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|g_a - g_n|_inf / (|g_a|_inf + |g_n|_inf + 1e-12)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
    /// Coordinates whose estimate needed a smaller step.
    pub refined: usize,
    /// Coordinates left out because no step gave a stable estimate.
    pub skipped: usize,
    /// Rounding error a central difference of the objective can carry at
    /// the initial step; absolute errors below it are not resolvable.
    pub noise_floor: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Relative error below `tolerance`, or an absolute error the difference
    /// quotient cannot distinguish from rounding.
    pub fn passes_or_unresolvable(&self, tolerance: f64) -> bool {
        self.passes(tolerance) || self.max_abs_error <= self.noise_floor
    }
}

/// Checks every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, analytic, &coords, h)
}

/// Checks only the listed coordinates (useful for large parameter tensors).
pub fn grad_check_coords<F>(mut f: F, x: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(TensorError::Shape(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let f0 = f(&probe);
    if !f0.is_finite() {
        return Err(TensorError::NonFinite("objective at the base point".into()));
    }
    // Central quotient and slope asymmetry `(f(x+s) - 2 f(x) + f(x-s)) / s`.
    let mut quotient = |probe: &mut Vec<f64>, i: usize, step: f64| -> Result<(f64, f64)> {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(probe);
        probe[i] = orig - step;
        let down = f(probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite(format!("objective at coordinate {i}")));
        }
        Ok(((up - down) / (2.0 * step), (up - 2.0 * f0 + down).abs() / step))
    };
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-12;
    let noise = |step: f64| 8.0 * f64::EPSILON * (f0.abs() + 1.0) / step;
    // Truncation at the 1e-5 level plus rounding noise, which grows as the
    // step shrinks.
    let agree = |a: f64, b: f64, step: f64| (a - b).abs() <= 1e-5 * (scale + a.abs().max(b.abs())) + noise(step);
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let (mut refined, mut skipped) = (0, 0);
    for &i in coords {
        let mut step = h;
        let (mut prev, mut prev_asym) = quotient(&mut probe, i, step)?;
        let mut numeric = None;
        for round in 0..6 {
            step /= 4.0;
            let (next, asym) = quotient(&mut probe, i, step)?;
            // Smooth: asymmetry falls with the step. Rounding-dominated: it
            // rises. Only a kink leaves it roughly unchanged.
            let smooth = asym <= 0.5 * prev_asym + noise(step);
            let rounding = asym >= 2.0 * prev_asym;
            if agree(prev, next, step) && (smooth || rounding) {
                numeric = Some(if round == 0 || rounding { prev } else { next });
                refined += (round > 0) as usize;
                break;
            }
            (prev, prev_asym) = (next, asym);
        }
        let Some(numeric) = numeric else {
            skipped += 1;
            continue;
        };
        diff = diff.max((numeric - analytic[i]).abs());
        na = na.max(analytic[i].abs());
        nn = nn.max(numeric.abs());
    }
    Ok(GradCheckReport {
        max_rel_error: diff / (na + nn + 1e-12),
        max_abs_error: diff,
        analytic_norm: na,
        numeric_norm: nn,
        checked: coords.len() - skipped,
        refined,
        skipped,
        noise_floor: noise(h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(|v| v.iter().map(|a| a * a).sum(), &x, &analytic, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let r = grad_check(|v| v[0] * v[1], &x, &[2.0, 2.0], DEFAULT_STEP).unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn kink_inside_step_is_refined() {
        // |x| with the kink 3e-6 from the probe point, inside the first step.
        let x = [3e-6, 0.5];
        let f = |v: &[f64]| v[0].abs() + v[1] * v[1];
        let naive = (f(&[x[0] + 1e-5, x[1]]) - f(&[x[0] - 1e-5, x[1]])) / 2e-5;
        assert!((naive - 1.0).abs() > 0.5);
        let r = grad_check(f, &x, &[1.0, 1.0], DEFAULT_STEP).unwrap();
        assert!(r.passes(1e-8), "{r:?}");
        assert_eq!(r.refined, 1);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn kink_at_the_probe_point_is_skipped() {
        let r = grad_check(|v| v[0].max(0.0) + 0.5 * v[0], &[1e-12], &[1.5], DEFAULT_STEP).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn piecewise_linear_away_from_kinks() {
        let x = [0.3, -0.7];
        let r = grad_check(
            |v| v[0].max(0.0) + 2.0 * v[1].max(0.0) - v[1],
            &x,
            &[1.0, -1.0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.passes(1e-9), "{r:?}");
        assert_eq!((r.refined, r.skipped), (0, 0));
    }

    #[test]
    fn refinement_does_not_hide_wrong_gradients() {
        let x = [3e-6, 0.5];
        let r = grad_check(|v| v[0].abs() + v[1] * v[1], &x, &[-1.0, 1.0], DEFAULT_STEP).unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn non_finite_objective() {
        let r = grad_check(|v| v[0].ln(), &[0.0], &[1.0], DEFAULT_STEP);
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }
}
