//! Local masking and replicating on spectrograms.
//!
//! This is a stand-in: a small number of random rectangles are either zeroed
//! or overwritten with an equally shaped rectangle copied from elsewhere in
//! the same spectrogram.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Real;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmrConfig {
    pub max_regions: usize,
    /// Largest region area as a fraction of the spectrogram area.
    pub max_area_frac: f64,
}

impl Default for LmrConfig {
    fn default() -> Self {
        LmrConfig {
            max_regions: 2,
            max_area_frac: 0.1,
        }
    }
}

impl LmrConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.max_area_frac > 0.0 && self.max_area_frac <= 1.0) {
            return Err(TrainError::Config(format!(
                "lmr.max_area_frac = {} would allow a region larger than the feature; must lie in (0, 1]",
                self.max_area_frac
            )));
        }
        Ok(())
    }
}

/// One rewritten rectangle: rows `r0..r0+h`, columns `c0..c0+w`, copied
/// from the rectangle at `source` or zeroed when `source` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
    pub source: Option<(usize, usize)>,
}

/// Applies between 1 and `max_regions` rewrites to the row-major
/// `rows x cols` spectrogram `x` in place. Copies always read from the
/// unmodified input.
pub fn lmr_augment<T: Real, R: Rng>(
    x: &mut [T],
    rows: usize,
    cols: usize,
    rng: &mut R,
    cfg: &LmrConfig,
) -> Result<Vec<Region>, TrainError> {
    cfg.validate()?;
    if x.len() != rows * cols {
        return Err(TrainError::Data(format!(
            "spectrogram of {} values is not {rows}x{cols}",
            x.len()
        )));
    }
    let max_cells = (cfg.max_area_frac * (rows * cols) as f64).floor() as usize;
    if cfg.max_regions == 0 || max_cells == 0 {
        return Ok(Vec::new());
    }
    let original = x.to_vec();
    let count = rng.random_range(1..=cfg.max_regions);
    let mut regions = Vec::with_capacity(count);
    for _ in 0..count {
        let h = rng.random_range(1..=rows.min(max_cells));
        let w = rng.random_range(1..=cols.min(max_cells / h));
        let r0 = rng.random_range(0..=rows - h);
        let c0 = rng.random_range(0..=cols - w);
        let source = if rng.random_bool(0.5) {
            Some((rng.random_range(0..=rows - h), rng.random_range(0..=cols - w)))
        } else {
            None
        };
        for i in 0..h {
            let dst = &mut x[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + w];
            match source {
                Some((sr, sc)) => dst.copy_from_slice(&original[(sr + i) * cols + sc..(sr + i) * cols + sc + w]),
                None => dst.fill(T::zero()),
            }
        }
        regions.push(Region { r0, c0, h, w, source });
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn touched_fraction_bounded_over_many_draws() {
        let (rows, cols) = (37, 53);
        let cfg = LmrConfig::default();
        let bound = cfg.max_regions as f64 * cfg.max_area_frac;
        let base: Vec<f64> = (0..rows * cols).map(|i| 1.0 + i as f64).collect();
        let mut worst = 0.0f64;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = base.clone();
            let regions = lmr_augment(&mut x, rows, cols, &mut rng, &cfg).unwrap();
            assert!(!regions.is_empty() && regions.len() <= cfg.max_regions);
            for r in &regions {
                assert!((r.h * r.w) as f64 <= cfg.max_area_frac * (rows * cols) as f64);
            }
            let changed = x.iter().zip(&base).filter(|(a, b)| a != b).count();
            worst = worst.max(changed as f64 / x.len() as f64);
        }
        assert!(worst <= bound, "worst touched fraction {worst}");
        assert!(worst > 0.0);
    }

    #[test]
    fn copies_come_from_the_input() {
        let (rows, cols) = (10, 12);
        let base: Vec<f64> = (0..rows * cols).map(|i| i as f64).collect();
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = base.clone();
            let regions = lmr_augment(&mut x, rows, cols, &mut rng, &LmrConfig::default()).unwrap();
            // a single copied region must equal its source in the original
            if let [Region {
                r0,
                c0,
                h,
                w,
                source: Some((sr, sc)),
            }] = regions[..]
            {
                for i in 0..h {
                    for j in 0..w {
                        assert_eq!(x[(r0 + i) * cols + c0 + j], base[(sr + i) * cols + sc + j]);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_and_determinism() {
        let mut a: Vec<f32> = (0..200).map(|i| i as f32).collect();
        let mut b = a.clone();
        let cfg = LmrConfig::default();
        lmr_augment(&mut a, 10, 20, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        lmr_augment(&mut b, 10, 20, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_region_rejected() {
        let mut x = vec![0.0f64; 4];
        let cfg = LmrConfig {
            max_regions: 1,
            max_area_frac: 1.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            lmr_augment(&mut x, 2, 2, &mut rng, &cfg),
            Err(TrainError::Config(_))
        ));
        assert!(lmr_augment(&mut x, 3, 2, &mut rng, &LmrConfig::default()).is_err());
    }
}
