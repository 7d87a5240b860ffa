use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use m3_core::analysis::{KMeansConfig, TsneConfig};
use m3_core::dsp::FeatureParams;
use m3_core::model::{ModelConfig, Variant};
use m3_core::pipeline::GateFeature;
use m3_core::signal::SynthSpec;
use m3_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const PAPER_PRESET: &str = include_str!("../presets/paper.toml");
const DESK_PRESET: &str = include_str!("../presets/desk.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn toml(self) -> &'static str {
        match self {
            Preset::Paper => PAPER_PRESET,
            Preset::Desk => DESK_PRESET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Wav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: Source,
    /// Directory of `<id>_*.wav` recordings for `source = "wav"`.
    pub wav_dir: PathBuf,
    /// `recording_id,split` CSV. Without it the built-in ShipsEar table (wav)
    /// or the last `test_per_class` recordings of each class (synthetic) are
    /// held out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_table: Option<PathBuf>,
    pub segment_s: f64,
    pub overlap_s: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub test_per_class: usize,
    pub synthetic: SynthSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: Source::Wav,
            wav_dir: PathBuf::from("data/shipsear"),
            split_table: None,
            segment_s: 30.0,
            overlap_s: 15.0,
            val_fraction: 0.15,
            seed: 0,
            test_per_class: 2,
            synthetic: SynthSpec::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub band: [f64; 2],
    pub preemph: f64,
    pub paper_compat: bool,
    pub gate_main: GateFeature,
    pub gate_aux: GateFeature,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let p = FeatureParams::default();
        FeatureConfig {
            band: [p.band.0, p.band.1],
            preemph: p.preemph,
            paper_compat: p.paper_compat,
            gate_main: GateFeature::Welch,
            gate_aux: GateFeature::Welch,
        }
    }
}

impl FeatureConfig {
    pub fn params(&self) -> FeatureParams {
        FeatureParams {
            band: (self.band[0], self.band[1]),
            preemph: self.preemph,
            paper_compat: self.paper_compat,
        }
    }
}

/// Model fields except the gate input sizes, which follow from the
/// extracted features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub num_experts: usize,
    pub n_shared: usize,
    pub n_specific: usize,
    pub main_classes: usize,
    pub aux_classes: usize,
    pub expert_channels: usize,
    pub tower_widths: Vec<usize>,
    pub gate_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            variant: m.variant,
            num_experts: m.num_experts,
            n_shared: m.n_shared,
            n_specific: m.n_specific,
            main_classes: m.main_classes,
            aux_classes: m.aux_classes,
            expert_channels: m.expert_channels,
            tower_widths: m.tower_widths,
            gate_hidden: m.gate_hidden,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, main_gate_dim: usize, aux_gate_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            num_experts: self.num_experts,
            n_shared: self.n_shared,
            n_specific: self.n_specific,
            main_classes: self.main_classes,
            aux_classes: self.aux_classes,
            main_gate_dim,
            aux_gate_dim,
            expert_channels: self.expert_channels,
            tower_widths: self.tower_widths.clone(),
            gate_hidden: self.gate_hidden,
            pruned: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Type,
    Size,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub features: Vec<GateFeature>,
    /// Label column written next to each embedded point.
    pub label: LabelKind,
    pub standardize: bool,
    pub seed: u64,
    pub tsne: TsneConfig,
    pub kmeans: KMeansConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            features: vec![GateFeature::Welch, GateFeature::AvgAmp, GateFeature::Centroid],
            label: LabelKind::Type,
            standardize: true,
            seed: 0,
            tsne: TsneConfig::default(),
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Where artifacts go; not part of the config hash.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub features: FeatureConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, what: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().with_context(|| format!("parsing {what}"))
}

impl ExperimentConfig {
    /// Parses `text` layered over an optional preset, then validates.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self> {
        let mut table = match preset {
            Some(p) => parse_table(p.toml(), &format!("preset {p:?}"))?,
            None => toml::Table::new(),
        };
        merge(&mut table, parse_table(text, "config")?);
        let cfg: ExperimentConfig = table.try_into().context("config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None if preset.is_some() => String::new(),
            None => bail!("either --config or --preset is required"),
        };
        Self::from_toml(&text, preset)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(d.segment_s > 0.0) || !(d.overlap_s >= 0.0) || d.overlap_s >= d.segment_s {
            bail!(
                "dataset.segment_s / dataset.overlap_s: need 0 <= overlap < segment, got {} / {}",
                d.segment_s,
                d.overlap_s
            );
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            bail!("dataset.val_fraction: {} outside [0, 1)", d.val_fraction);
        }
        if d.source == Source::Synthetic {
            let s = &d.synthetic;
            if s.classes.is_empty() || s.recordings_per_class == 0 || s.sample_rate == 0 || !(s.duration_s > 0.0) {
                bail!("dataset.synthetic: needs classes, recordings, a sample rate and a duration");
            }
            if d.test_per_class >= s.recordings_per_class {
                bail!(
                    "dataset.test_per_class: {} leaves no training recordings out of {}",
                    d.test_per_class,
                    s.recordings_per_class
                );
            }
        }
        let f = &self.features;
        if !(f.band[0] >= 0.0 && f.band[0] < f.band[1]) {
            bail!("features.band: need 0 <= low < high, got {:?}", f.band);
        }
        if d.source == Source::Synthetic && f.band[1] >= d.synthetic.sample_rate as f64 / 2.0 {
            bail!(
                "features.band: upper edge {} Hz must lie below Nyquist ({} Hz)",
                f.band[1],
                d.synthetic.sample_rate as f64 / 2.0
            );
        }
        if !(0.0..1.0).contains(&f.preemph) {
            bail!("features.preemph: {} outside [0, 1)", f.preemph);
        }
        self.model
            .model_config(1, 1)
            .validate()
            .map_err(|e| anyhow::anyhow!("model: {e}"))?;
        self.train.validate().map_err(|e| anyhow::anyhow!("train: {e}"))?;
        let a = &self.analysis;
        if a.kmeans.k == 0 || a.kmeans.restarts == 0 {
            bail!("analysis.kmeans: k and restarts must be positive");
        }
        if !(a.tsne.perplexity >= 1.0) || !(a.tsne.learning_rate > 0.0) || !(a.tsne.early_exaggeration >= 1.0) {
            bail!("analysis.tsne: perplexity >= 1, learning_rate > 0 and early_exaggeration >= 1 required");
        }
        Ok(())
    }

    /// Canonical TOML of the resolved config (without `out_dir`).
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`Self::resolved_toml`].
    pub fn hash(&self) -> String {
        hash_text(&self.resolved_toml())
    }
}

pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Dotted keys whose values differ between two TOML documents, one line
/// each.
pub fn diff_summary(old: &str, new: &str) -> Vec<String> {
    let flat = |text: &str| {
        let mut m = BTreeMap::new();
        if let Ok(t) = text.parse::<toml::Table>() {
            flatten("", &toml::Value::Table(t), &mut m);
        }
        m
    };
    let (a, b) = (flat(old), flat(new));
    let mut lines = Vec::new();
    for (k, va) in &a {
        match b.get(k) {
            Some(vb) if vb == va => {}
            Some(vb) => lines.push(format!("{k}: {va} -> {vb}")),
            None => lines.push(format!("{k}: {va} -> (absent)")),
        }
    }
    for (k, vb) in &b {
        if !a.contains_key(k) {
            lines.push(format!("{k}: (absent) -> {vb}"));
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("", None).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.model.variant, Variant::M3);
        assert_eq!(c.model.num_experts, 3);
        assert_eq!(c.features.gate_main, GateFeature::Welch);
    }

    #[test]
    fn resolved_text_round_trips() {
        for p in [None, Some(Preset::Paper), Some(Preset::Desk)] {
            let c = ExperimentConfig::from_toml("", p).unwrap();
            let back = ExperimentConfig::from_toml(&c.resolved_toml(), None).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn paper_preset_matches_defaults() {
        let p = ExperimentConfig::from_toml("", Some(Preset::Paper)).unwrap();
        assert_eq!(p, ExperimentConfig::default());
    }

    #[test]
    fn config_overrides_preset() {
        let c = ExperimentConfig::from_toml("[train]\nepochs = 3\nwarmup_epochs = 1.0\n", Some(Preset::Desk)).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.dataset.source, Source::Synthetic);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("[train]\nepoch = 3\n", None).unwrap_err();
        assert!(format!("{e:#}").contains("epoch"), "{e:#}");
        assert!(ExperimentConfig::from_toml("colour = 1\n", None).is_err());
    }

    #[test]
    fn field_paths_in_errors() {
        let e = ExperimentConfig::from_toml("[dataset]\nval_fraction = 1.5\n", None).unwrap_err();
        assert!(e.to_string().starts_with("dataset.val_fraction"));
        let e = ExperimentConfig::from_toml("[model]\nnum_experts = 0\n", None).unwrap_err();
        assert!(e.to_string().starts_with("model:"), "{e}");
        let e = ExperimentConfig::from_toml("[features]\nband = [10.0, 5000.0]\n", Some(Preset::Desk)).unwrap_err();
        assert!(e.to_string().contains("Nyquist"));
    }

    #[test]
    fn out_dir_and_hash() {
        let a = ExperimentConfig::from_toml("out_dir = \"x\"\n", None).unwrap();
        let b = ExperimentConfig::from_toml("out_dir = \"y\"\n", None).unwrap();
        assert_eq!(a.out_dir, Some(PathBuf::from("x")));
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml("[train]\nlr_max = 1e-3\n", None).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn diff_lists_changed_keys() {
        let a = ExperimentConfig::default().resolved_toml();
        let b = ExperimentConfig::from_toml("[train]\nepochs = 7\n", None)
            .unwrap()
            .resolved_toml();
        assert_eq!(diff_summary(&a, &b), vec!["train.epochs: 200 -> 7".to_string()]);
        assert!(diff_summary(&a, &a).is_empty());
    }
}
