use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainError};

/// Rounds half away from zero at `decimals` places, after first snapping
/// to 9 decimals so that values such as 75.595, whose binary form sits just
/// below the tie, round the way their decimal form reads.
pub fn round_decimal(x: f64, decimals: i32) -> f64 {
    let snapped = (x * 1e9).round() / 1e9;
    let scale = 10f64.powi(decimals);
    let scaled = ((snapped * scale) * 1e6).round() / 1e6;
    scaled.round() / scale
}

/// Mean and unbiased standard deviation; the deviation is `None` for a
/// single value.
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Some((mean, std))
}

/// `"mean±stdev"` with two decimals, `"mean±—"` for a single value.
pub fn format_mean_std(values: &[f64]) -> Option<String> {
    let (mean, std) = mean_std(values)?;
    let std = std.map_or_else(|| "—".to_string(), |s| format!("{:.2}", round_decimal(s, 2)));
    Some(format!("{:.2}±{std}", round_decimal(mean, 2)))
}

/// Outcome of one seed. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub type_accuracy: f64,
    pub size_accuracy: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stdev: Option<f64>,
    pub text: String,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        let (mean, stdev) = mean_std(values)?;
        Some(Summary {
            mean,
            stdev,
            text: format_mean_std(values)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub batch_size: usize,
    pub runs: Vec<SeedRun>,
    pub type_accuracy: Summary,
    pub size_accuracy: Option<Summary>,
    /// Per-seed effective alpha per epoch, when it was tracked.
    pub alpha_trajectories: Vec<Vec<f64>>,
}

/// Aggregates per-seed runs. The size summary is present only when every
/// run has a size accuracy.
pub fn report_runs(runs: Vec<SeedRun>, batch_size: usize) -> Result<RunReport, TrainError> {
    if runs.is_empty() {
        return Err(TrainError::Data("a report needs at least one run".into()));
    }
    if let Some(r) = runs.iter().find(|r| {
        !(0.0..=100.0).contains(&r.type_accuracy) || r.size_accuracy.is_some_and(|a| !(0.0..=100.0).contains(&a))
    }) {
        return Err(TrainError::Data(format!(
            "seed {} has an accuracy outside [0, 100]",
            r.seed
        )));
    }
    let types: Vec<f64> = runs.iter().map(|r| r.type_accuracy).collect();
    let sizes: Option<Vec<f64>> = runs.iter().map(|r| r.size_accuracy).collect();
    let alpha_trajectories = runs
        .iter()
        .map(|r| r.history.iter().filter_map(|m| m.alpha_eff).collect())
        .collect();
    Ok(RunReport {
        batch_size,
        type_accuracy: Summary::of(&types).expect("non-empty"),
        size_accuracy: sizes.as_deref().and_then(Summary::of),
        alpha_trajectories,
        runs,
    })
}
