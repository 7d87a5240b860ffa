//! Glue from recordings to model-ready sample sets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{extract_features, DspError, FeatureParams, FeatureSet};
use crate::signal::{
    segment_recording, split_dataset, synth_dataset, synth_split_table, Segment, SignalError, SplitTag, SynthSpec,
};
use crate::training::{SampleSet, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Input of a task's gating layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFeature {
    Welch,
    AvgAmp,
    Centroid,
    /// The flattened log power spectrogram.
    Main,
}

impl GateFeature {
    pub fn values<'a>(&self, f: &'a FeatureSet) -> &'a [f64] {
        match self {
            GateFeature::Welch => &f.welch.data,
            GateFeature::AvgAmp => &f.avg_amp.data,
            GateFeature::Centroid => &f.centroid.data,
            GateFeature::Main => &f.log_power.data,
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Packs per-segment features into a [`SampleSet`]. `labels` holds
/// `(type, size)` class indices per segment.
pub fn sample_set(
    features: &[&FeatureSet],
    labels: &[(usize, usize)],
    gate_main: Option<GateFeature>,
    gate_aux: Option<GateFeature>,
) -> Result<SampleSet, TrainError> {
    let first = features
        .first()
        .ok_or_else(|| TrainError::Data("no segments to pack".into()))?;
    if features.len() != labels.len() {
        return Err(TrainError::Data(format!(
            "{} feature sets for {} label pairs",
            features.len(),
            labels.len()
        )));
    }
    let shape = first.log_power.shape();
    let dim = |g: Option<GateFeature>| g.map_or(0, |g| g.values(first).len());
    let mut set = SampleSet::new(shape[0], shape[1], dim(gate_main), dim(gate_aux));
    for (f, &(ym, ya)) in features.iter().zip(labels) {
        let gate = |g: Option<GateFeature>| g.map_or_else(Vec::new, |g| to_f32(g.values(f)));
        set.push(&to_f32(&f.log_power.data), &gate(gate_main), &gate(gate_aux), ym, ya)?;
    }
    Ok(set)
}

/// Segments and features of the synthetic desk corpus, by split.
#[derive(Debug, Clone)]
pub struct DeskCorpus {
    pub segments: Vec<Segment>,
    pub splits: Vec<SplitTag>,
    pub features: Vec<FeatureSet>,
}

/// Feature parameters for 8 kHz synthetic audio.
pub fn desk_feature_params() -> FeatureParams {
    FeatureParams {
        band: (10.0, 3990.0),
        ..FeatureParams::default()
    }
}

impl DeskCorpus {
    /// Three-class synthetic corpus: 2 s segments with 1 s overlap, the last
    /// two recordings of each class held out for test.
    pub fn generate(seed: u64) -> Result<Self, PipelineError> {
        let recs = synth_dataset(&SynthSpec::desk(), seed)?;
        let table = synth_split_table(&recs, 2);
        let mut segments = Vec::new();
        for r in &recs {
            segments.extend(segment_recording(r, 2.0, 1.0)?);
        }
        let manifest = split_dataset(&segments, &table, 0.0, seed)?;
        let params = desk_feature_params();
        let features = segments
            .iter()
            .map(|s| extract_features(&s.samples, s.sample_rate as f64, &params))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DeskCorpus {
            splits: manifest.entries.iter().map(|e| e.split).collect(),
            segments,
            features,
        })
    }

    pub fn split(
        &self,
        tag: SplitTag,
        gate_main: Option<GateFeature>,
        gate_aux: Option<GateFeature>,
    ) -> Result<SampleSet, TrainError> {
        let idx: Vec<usize> = (0..self.segments.len()).filter(|&i| self.splits[i] == tag).collect();
        let feats: Vec<&FeatureSet> = idx.iter().map(|&i| &self.features[i]).collect();
        let labels: Vec<(usize, usize)> = idx
            .iter()
            .map(|&i| (self.segments[i].type_label.index(), self.segments[i].size_label.index()))
            .collect();
        sample_set(&feats, &labels, gate_main, gate_aux)
    }
}
