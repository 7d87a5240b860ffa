use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{preprocess_signal, DspError};

/// Floor added before the logarithm.
pub const LOG_EPS: f64 = 1e-10;

/// Gating width of the reference architecture (one bin short of `floor(L/2)+1`).
pub const PAPER_COMPAT_BINS: usize = 1318;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    LogPowerSpec,
    Welch,
    AvgAmp,
    Centroid,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::LogPowerSpec,
        FeatureKind::Welch,
        FeatureKind::AvgAmp,
        FeatureKind::Centroid,
    ];

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::LogPowerSpec => 0,
            FeatureKind::Welch => 1,
            FeatureKind::AvgAmp => 2,
            FeatureKind::Centroid => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::LogPowerSpec => "log_power_spec",
            FeatureKind::Welch => "welch",
            FeatureKind::AvgAmp => "avg_amp",
            FeatureKind::Centroid => "centroid",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = DspError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DspError::InvalidParameter(format!("unknown feature kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    Time,
    Frequency,
}

/// One tensor axis: what it indexes and the spacing between entries
/// (seconds per frame, or Hz per bin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub kind: AxisKind,
    pub len: usize,
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub kind: FeatureKind,
    pub data: Vec<f64>,
    pub axes: Vec<Axis>,
}

impl FeatureTensor {
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len).collect()
    }

    /// Row `t` of a `[time × frequency]` tensor.
    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.axes[1].len;
        &self.data[t * w..(t + 1) * w]
    }
}

/// Frame length and hop in samples: `floor(0.050 fs)`, `floor(0.025 fs)`.
pub fn framing(sample_rate: f64) -> (usize, usize) {
    (
        (0.050 * sample_rate).floor() as usize,
        (0.025 * sample_rate).floor() as usize,
    )
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / len as f64).cos())
        .collect()
}

/// Windowed frames, row-major `[num_frames × frame_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: f64,
}

impl FrameGrid {
    /// Wraps already-prepared frames (no window is applied).
    pub fn from_frames(frames: Vec<f64>, frame_len: usize, hop: usize, sample_rate: f64) -> Result<Self, DspError> {
        if frame_len == 0 || frames.is_empty() || !frames.len().is_multiple_of(frame_len) {
            return Err(DspError::EmptyGrid {
                len: frames.len(),
                frame_len,
            });
        }
        Ok(FrameGrid {
            num_frames: frames.len() / frame_len,
            frames,
            frame_len,
            hop,
            sample_rate,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.frame_len..(t + 1) * self.frame_len]
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate / self.frame_len as f64
    }

    fn time_axis(&self) -> Axis {
        Axis {
            kind: AxisKind::Time,
            len: self.num_frames,
            resolution: self.hop as f64 / self.sample_rate,
        }
    }

    fn freq_axis(&self, len: usize) -> Axis {
        Axis {
            kind: AxisKind::Frequency,
            len,
            resolution: self.bin_hz(),
        }
    }

    fn fft(&self) -> Arc<dyn Fft<f64>> {
        FftPlanner::new().plan_fft_forward(self.frame_len)
    }

    /// One-sided DFT of every frame, row-major `[num_frames × num_bins]`.
    fn one_sided(&self) -> Result<Vec<Complex<f64>>, DspError> {
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite);
        }
        let fft = self.fft();
        let bins = self.num_bins();
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let mut buf = vec![Complex::default(); self.frame_len];
        let mut out = Vec::with_capacity(self.num_frames * bins);
        for t in 0..self.num_frames {
            for (b, &x) in buf.iter_mut().zip(self.frame(t)) {
                *b = Complex::new(x, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok(out)
    }
}

/// Splits `samples` into Hann-windowed frames of `floor(0.050 fs)` samples
/// with a hop of `floor(0.025 fs)`; the trailing partial frame is dropped.
pub fn frame_and_window(samples: &[f64], sample_rate: f64) -> Result<FrameGrid, DspError> {
    let (frame_len, hop) = framing(sample_rate);
    if frame_len == 0 || hop == 0 {
        return Err(DspError::InvalidParameter(format!(
            "sample rate {sample_rate} Hz too low to frame"
        )));
    }
    if samples.len() < frame_len {
        return Err(DspError::EmptyGrid {
            len: samples.len(),
            frame_len,
        });
    }
    let num_frames = (samples.len() - frame_len) / hop + 1;
    let window = hann(frame_len);
    let mut frames = Vec::with_capacity(num_frames * frame_len);
    for t in 0..num_frames {
        let start = t * hop;
        frames.extend(
            samples[start..start + frame_len]
                .iter()
                .zip(&window)
                .map(|(x, w)| x * w),
        );
    }
    Ok(FrameGrid {
        frames,
        num_frames,
        frame_len,
        hop,
        sample_rate,
    })
}

/// Periodogram `|X[k]|^2 / L` per frame, `[time × frequency]`.
pub fn power_spectrum(grid: &FrameGrid) -> Result<FeatureTensor, DspError> {
    let spec = grid.one_sided()?;
    let l = grid.frame_len as f64;
    Ok(FeatureTensor {
        kind: FeatureKind::LogPowerSpec,
        data: spec.iter().map(|c| c.norm_sqr() / l).collect(),
        axes: vec![grid.time_axis(), grid.freq_axis(grid.num_bins())],
    })
}

/// `ln(power + 1e-10)`.
pub fn log_power_spectrogram(power: &FeatureTensor) -> FeatureTensor {
    FeatureTensor {
        kind: FeatureKind::LogPowerSpec,
        data: power.data.iter().map(|p| (p + LOG_EPS).ln()).collect(),
        axes: power.axes.clone(),
    }
}

fn column_mean(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut acc = vec![0.0; cols];
    for r in 0..rows {
        for (a, v) in acc.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows as f64);
    acc
}

/// Time-mean of the pre-log power matrix. With `paper_compat` the last bin
/// is dropped.
pub fn welch_spectrum(power: &FeatureTensor, paper_compat: bool) -> Result<FeatureTensor, DspError> {
    let shape = power.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(DspError::Empty);
    }
    let mut mean = column_mean(&power.data, shape[0], shape[1]);
    if paper_compat {
        mean.pop();
    }
    let mut axis = power.axes[1];
    axis.len = mean.len();
    Ok(FeatureTensor {
        kind: FeatureKind::Welch,
        data: mean,
        axes: vec![axis],
    })
}

fn amplitude_mean(grid: &FrameGrid, spec: &[Complex<f64>], paper_compat: bool) -> FeatureTensor {
    let amp: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
    let mut mean = column_mean(&amp, grid.num_frames, grid.num_bins());
    if paper_compat {
        mean.pop();
    }
    FeatureTensor {
        kind: FeatureKind::AvgAmp,
        axes: vec![grid.freq_axis(mean.len())],
        data: mean,
    }
}

/// Mean over frames of the one-sided amplitude spectrum `|X[k]|`.
pub fn average_amplitude_spectrum(grid: &FrameGrid, paper_compat: bool) -> Result<FeatureTensor, DspError> {
    Ok(amplitude_mean(grid, &grid.one_sided()?, paper_compat))
}

fn centroids(grid: &FrameGrid, spec: &[Complex<f64>]) -> FeatureTensor {
    let bins = grid.num_bins();
    let df = grid.bin_hz();
    let data = spec
        .chunks(bins)
        .map(|row| {
            let (mut num, mut den) = (0.0, 0.0);
            for (k, c) in row.iter().enumerate() {
                let a = c.norm();
                num += k as f64 * df * a;
                den += a;
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    FeatureTensor {
        kind: FeatureKind::Centroid,
        data,
        axes: vec![grid.time_axis()],
    }
}

/// Amplitude-weighted mean frequency (Hz) of every frame; silent frames give 0.
pub fn spectral_centroid(grid: &FrameGrid) -> Result<FeatureTensor, DspError> {
    Ok(centroids(grid, &grid.one_sided()?))
}

/// Full two-sided DFT of one frame.
pub fn spectrum_two_sided(frame: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureParams {
    pub band: (f64, f64),
    pub preemph: f64,
    /// Truncate the spectral gating features to one bin fewer.
    pub paper_compat: bool,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            band: (10.0, 26360.0),
            preemph: 0.97,
            paper_compat: false,
        }
    }
}

/// All four features of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub log_power: FeatureTensor,
    pub welch: FeatureTensor,
    pub avg_amp: FeatureTensor,
    pub centroid: FeatureTensor,
}

impl FeatureSet {
    pub fn get(&self, kind: FeatureKind) -> &FeatureTensor {
        match kind {
            FeatureKind::LogPowerSpec => &self.log_power,
            FeatureKind::Welch => &self.welch,
            FeatureKind::AvgAmp => &self.avg_amp,
            FeatureKind::Centroid => &self.centroid,
        }
    }
}

/// Preprocesses a raw segment and computes every feature from a single pass
/// of frame FFTs.
pub fn extract_features(samples: &[f64], sample_rate: f64, params: &FeatureParams) -> Result<FeatureSet, DspError> {
    let x = preprocess_signal(samples, sample_rate, params.band, params.preemph)?;
    let grid = frame_and_window(&x, sample_rate)?;
    let spec = grid.one_sided()?;
    let l = grid.frame_len as f64;
    let power = FeatureTensor {
        kind: FeatureKind::LogPowerSpec,
        data: spec.iter().map(|c| c.norm_sqr() / l).collect(),
        axes: vec![grid.time_axis(), grid.freq_axis(grid.num_bins())],
    };
    Ok(FeatureSet {
        log_power: log_power_spectrogram(&power),
        welch: welch_spectrum(&power, params.paper_compat)?,
        avg_amp: amplitude_mean(&grid, &spec, params.paper_compat),
        centroid: centroids(&grid, &spec),
    })
}
