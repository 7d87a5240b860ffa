//! Recording ingestion, segmentation, labelling and dataset splits.

mod labels;
pub mod shipsear;
mod synth;
mod wav;

pub use labels::{label_size, label_size_str, ShipType, SizeClass, NUM_SIZES, NUM_TYPES};
pub use synth::{synth_dataset, synth_split_table, SynthClass, SynthSpec, Tone};
pub use wav::{load_wav, load_wav_labeled, read_wav, recording_id, WavAudio};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("{0}: malformed wav: {1}")]
    Format(String, String),
    #[error("{0}: unsupported wav encoding")]
    UnsupportedFormat(String),
    #[error("{0}: no audio samples")]
    EmptyInput(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("recording {0} is not in the split table")]
    MissingSplit(u32),
    #[error("ambiguous synthetic dataset spec: {0}")]
    AmbiguousSpec(String),
    #[error("manifest parse error at line {0}: {1}")]
    Parse(usize, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: u32,
    /// Normalized amplitude in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub type_label: ShipType,
}

impl Recording {
    pub fn new(id: u32, samples: Vec<f64>, sample_rate: u32, type_label: ShipType) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Recording {
            id,
            samples,
            sample_rate,
            type_label,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub parent_id: u32,
    pub offset_s: f64,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub type_label: ShipType,
    pub size_label: SizeClass,
}

/// Cuts a recording into fixed-length windows of `seg_len` seconds that
/// advance by `seg_len - overlap`. A trailing remainder shorter than
/// `seg_len` is dropped, so recordings shorter than one segment yield
/// nothing.
pub fn segment_recording(rec: &Recording, seg_len: f64, overlap: f64) -> Result<Vec<Segment>, SignalError> {
    if !(seg_len > overlap && overlap >= 0.0) {
        return Err(SignalError::InvalidArgument(format!(
            "segment length {seg_len} must exceed overlap {overlap} >= 0"
        )));
    }
    let fs = rec.sample_rate as f64;
    let len = (seg_len * fs).round() as usize;
    let hop = ((seg_len - overlap) * fs).round() as usize;
    if len == 0 || hop == 0 {
        return Err(SignalError::InvalidArgument(
            "segment length or hop rounds to zero samples".into(),
        ));
    }
    let n = rec.samples.len();
    if n < len {
        return Ok(Vec::new());
    }
    let count = (n - len) / hop + 1;
    Ok((0..count)
        .map(|i| Segment {
            parent_id: rec.id,
            offset_s: (i * hop) as f64 / fs,
            samples: rec.samples[i * hop..i * hop + len].to_vec(),
            sample_rate: rec.sample_rate,
            type_label: rec.type_label,
            size_label: label_size(rec.type_label),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitTag {
    type Err = SignalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(SignalError::UnknownLabel(format!("split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub parent_id: u32,
    pub offset_s: f64,
    pub type_label: ShipType,
    pub size_label: SizeClass,
    pub split: SplitTag,
}

/// One entry per segment, in segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

pub const MANIFEST_HEADER: &str = "parent_id,offset_s,type_label,size_label,split";

impl DatasetManifest {
    pub fn indices(&self, split: SplitTag) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn recording_ids(&self, splits: &[SplitTag]) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| splits.contains(&e.split))
            .map(|e| e.parent_id)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.parent_id, e.offset_s, e.type_label, e.size_label, e.split
            ));
        }
        s
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self, SignalError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(SignalError::Parse(1, format!("expected header '{MANIFEST_HEADER}'"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = |m: String| SignalError::Parse(i + 1, m);
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            entries.push(ManifestEntry {
                parent_id: f[0].trim().parse().map_err(|e| bad(format!("{e}")))?,
                offset_s: f[1].trim().parse().map_err(|e| bad(format!("{e}")))?,
                type_label: f[2].parse()?,
                size_label: f[3].parse()?,
                split: f[4].parse()?,
            });
        }
        Ok(DatasetManifest { entries, seed })
    }
}

/// Parses a `recording_id,split` CSV (header required, `train`/`test` only).
pub fn parse_split_table(text: &str) -> Result<BTreeMap<u32, SplitTag>, SignalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "recording_id,split" => {}
        _ => return Err(SignalError::Parse(1, "expected header 'recording_id,split'".into())),
    }
    let mut table = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once(',')
            .ok_or_else(|| SignalError::Parse(i + 1, "expected 2 fields".into()))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|e| SignalError::Parse(i + 1, format!("{e}")))?;
        let split: SplitTag = split.parse()?;
        if split == SplitTag::Val {
            return Err(SignalError::Parse(i + 1, "split table lists train/test only".into()));
        }
        table.insert(id, split);
    }
    Ok(table)
}

pub fn split_table_csv(table: &BTreeMap<u32, SplitTag>) -> String {
    let mut s = String::from("recording_id,split\n");
    for (id, tag) in table {
        s.push_str(&format!("{id},{tag}\n"));
    }
    s
}

/// Assigns each segment to train/val/test. Test membership follows the
/// recording-level table; `round(val_fraction * n_train)` training segments
/// are moved to validation by a seeded shuffle.
pub fn split_dataset(
    segments: &[Segment],
    split_table: &BTreeMap<u32, SplitTag>,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, SignalError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(SignalError::InvalidArgument(format!(
            "val fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut entries = Vec::with_capacity(segments.len());
    let mut train_idx = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        let split = *split_table
            .get(&s.parent_id)
            .ok_or(SignalError::MissingSplit(s.parent_id))?;
        let split = if split == SplitTag::Val { SplitTag::Train } else { split };
        if split == SplitTag::Train {
            train_idx.push(i);
        }
        entries.push(ManifestEntry {
            parent_id: s.parent_id,
            offset_s: s.offset_s,
            type_label: s.type_label,
            size_label: s.size_label,
            split,
        });
    }
    let n_val = (val_fraction * train_idx.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_idx.shuffle(&mut rng);
    for &i in &train_idx[..n_val] {
        entries[i].split = SplitTag::Val;
    }
    Ok(DatasetManifest { entries, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u32, secs: f64, fs: u32) -> Recording {
        let n = (secs * fs as f64).round() as usize;
        Recording::new(id, (0..n).map(|i| i as f64).collect(), fs, ShipType::Dredger).unwrap()
    }

    #[test]
    fn segment_counts() {
        assert_eq!(segment_recording(&rec(1, 30.0, 100), 30.0, 15.0).unwrap().len(), 1);
        let segs = segment_recording(&rec(1, 60.0, 100), 30.0, 15.0).unwrap();
        let offsets: Vec<f64> = segs.iter().map(|s| s.offset_s).collect();
        assert_eq!(offsets, vec![0.0, 15.0, 30.0]);
        assert!(segs.iter().all(|s| s.samples.len() == 3000));
        assert_eq!(segs[1].samples[0], 1500.0);
        assert_eq!(segs[0].size_label, SizeClass::Medium);
        assert_eq!(segment_recording(&rec(1, 44.0, 100), 30.0, 15.0).unwrap().len(), 1);
        assert!(segment_recording(&rec(1, 15.0, 100), 30.0, 15.0).unwrap().is_empty());
        assert!(matches!(
            segment_recording(&rec(1, 60.0, 100), 15.0, 15.0),
            Err(SignalError::InvalidArgument(_))
        ));
    }

    proptest! {
        #[test]
        fn segment_count_formula(d in 30u32..600, len in 1u32..40, ov_frac in 0.0f64..0.9) {
            let len = len as f64;
            let overlap = (len * ov_frac).floor();
            let r = rec(3, d as f64, 10);
            let n = segment_recording(&r, len, overlap).unwrap().len();
            let expect = if (d as f64) < len { 0 } else {
                ((d as f64 - len) / (len - overlap)).floor() as usize + 1
            };
            prop_assert_eq!(n, expect);
        }
    }

    fn segments_for(ids: &[u32], per: usize) -> Vec<Segment> {
        ids.iter()
            .flat_map(|&id| {
                (0..per).map(move |k| Segment {
                    parent_id: id,
                    offset_s: k as f64 * 15.0,
                    samples: vec![],
                    sample_rate: 1,
                    type_label: shipsear::type_of(id).unwrap_or(ShipType::Motorboat),
                    size_label: SizeClass::Tiny,
                })
            })
            .collect()
    }

    #[test]
    fn split_follows_table() {
        let table = shipsear::split_table();
        let segs = segments_for(&[95, 80, 93, 21, 27], 4);
        let m = split_dataset(&segs, &table, 0.15, 42).unwrap();
        assert!(m
            .entries
            .iter()
            .filter(|e| e.parent_id == 95)
            .all(|e| e.split == SplitTag::Test));
        assert!(m
            .entries
            .iter()
            .filter(|e| e.parent_id == 80)
            .all(|e| e.split != SplitTag::Test));
        let n_val = m.indices(SplitTag::Val).len();
        assert_eq!(n_val, (0.15f64 * 12.0).round() as usize);
        let tv = m.recording_ids(&[SplitTag::Train, SplitTag::Val]);
        let te = m.recording_ids(&[SplitTag::Test]);
        assert!(tv.is_disjoint(&te));

        let none = split_dataset(&segs, &table, 0.0, 42).unwrap();
        assert!(none.indices(SplitTag::Val).is_empty());
        assert_eq!(
            split_dataset(&segments_for(&[1], 1), &table, 0.1, 1),
            Err(SignalError::MissingSplit(1))
        );
    }

    proptest! {
        #[test]
        fn manifests_never_leak(seed in 0u64..1000, frac in 0.0f64..0.99) {
            let table = shipsear::split_table();
            let ids: Vec<u32> = table.keys().copied().collect();
            let m = split_dataset(&segments_for(&ids, 3), &table, frac, seed).unwrap();
            let tv = m.recording_ids(&[SplitTag::Train, SplitTag::Val]);
            let te = m.recording_ids(&[SplitTag::Test]);
            prop_assert!(tv.is_disjoint(&te));
            for e in &m.entries {
                if e.split == SplitTag::Val {
                    prop_assert_eq!(table[&e.parent_id], SplitTag::Train);
                }
            }
        }
    }

    #[test]
    fn manifest_csv_round_trip() {
        let table = shipsear::split_table();
        let m = split_dataset(&segments_for(&[95, 80, 83], 3), &table, 0.3, 7).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("parent_id,offset_s,type_label,size_label,split\n"));
        assert_eq!(DatasetManifest::from_csv(&csv, 7).unwrap(), m);
        assert!(DatasetManifest::from_csv("bad\n", 0).is_err());
    }

    #[test]
    fn split_table_rejects_val_rows() {
        assert!(parse_split_table("recording_id,split\n3,val\n").is_err());
        let t = parse_split_table("recording_id,split\n3,train\n4,test\n").unwrap();
        assert_eq!(split_table_csv(&t), "recording_id,split\n3,train\n4,test\n");
    }
}
