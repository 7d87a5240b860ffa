//! The pipeline stages. Each stage reads the artifacts of the one before it
//! from the run directory and writes its own.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use m3_core::analysis::{kmeans, standardize, tsne};
use m3_core::dsp::{extract_features, FeatureKind};
use m3_core::formats::{
    decode_m3ck, decode_m3ft, encode_m3ck, encode_m3ft, model_checkpoint, model_from_checkpoint, Entry, FeatureFile,
};
use m3_core::model::{M3Model, ModelConfig};
use m3_core::pipeline::GateFeature;
use m3_core::signal::{
    load_wav, parse_split_table, recording_id, segment_recording, shipsear, split_dataset, synth_dataset,
    synth_split_table, DatasetManifest, Recording, Segment, SplitTag,
};
use m3_core::training::{evaluate, report_runs, train, EpochMetrics, SampleSet, SeedRun};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::artifacts::{read, read_text, write_atomic, write_json, RunDir};
use crate::config::{ExperimentConfig, LabelKind, Source};

pub const MANIFEST: &str = "manifest.csv";
pub const EXTRACT_SIDECAR: &str = "extract.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "model.m3ck";
pub const PRUNED_CHECKPOINT: &str = "model.pruned.m3ck";
pub const REPORT: &str = "report.json";
pub const PRUNED_REPORT: &str = "report.pruned.json";

/// A loaded config bound to its output directory.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
    /// Overrides `train.seeds` when set.
    pub seed: Option<u64>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, seed: Option<u64>) -> Result<Self> {
        let run = RunDir::open(&out, &cfg)?;
        Ok(Context { cfg, run, seed })
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self.seed {
            Some(s) => vec![s],
            None => self.cfg.train.seeds.clone(),
        }
    }

    fn stamp(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("config_sha256".into(), Value::String(self.run.hash.clone()));
        m
    }
}

pub fn feature_path(index: usize, kind: FeatureKind) -> PathBuf {
    PathBuf::from("features").join(format!("{index:05}_{}.m3ft", kind.name()))
}

pub fn gate_kind(g: GateFeature) -> FeatureKind {
    match g {
        GateFeature::Welch => FeatureKind::Welch,
        GateFeature::AvgAmp => FeatureKind::AvgAmp,
        GateFeature::Centroid => FeatureKind::Centroid,
        GateFeature::Main => FeatureKind::LogPowerSpec,
    }
}

/// Recordings in a fixed order, handed to `visit` one at a time so that
/// only one raw recording is held in memory.
fn for_each_recording(
    cfg: &ExperimentConfig,
    mut visit: impl FnMut(Recording) -> Result<()>,
) -> Result<BTreeMap<u32, SplitTag>> {
    let d = &cfg.dataset;
    let custom = match &d.split_table {
        Some(p) => Some(parse_split_table(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?),
        None => None,
    };
    match d.source {
        Source::Synthetic => {
            let recs = synth_dataset(&d.synthetic, d.seed)?;
            let table = custom.unwrap_or_else(|| synth_split_table(&recs, d.test_per_class));
            for r in recs {
                visit(r)?;
            }
            Ok(table)
        }
        Source::Wav => {
            let table = custom.unwrap_or_else(shipsear::split_table);
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&d.wav_dir)
                .with_context(|| format!("listing {}", d.wav_dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("dataset.wav_dir: no .wav files in {}", d.wav_dir.display());
            }
            for p in paths {
                let id = recording_id(&p);
                if !table.contains_key(&id) || shipsear::type_of(id).is_none() {
                    eprintln!("skipping {}: recording {id} is not in the split table", p.display());
                    continue;
                }
                visit(load_wav(&p)?)?;
            }
            Ok(table)
        }
    }
}

/// Segments every recording, extracts the four feature maps per segment
/// and writes them with the split manifest.
pub fn extract(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let params = cfg.features.params();
    let mut meta: Vec<Segment> = Vec::new();
    let mut shapes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut sample_rate = None;
    let table = for_each_recording(cfg, |rec| {
        if *sample_rate.get_or_insert(rec.sample_rate) != rec.sample_rate {
            bail!(
                "recording {} is sampled at {} Hz, others at {} Hz",
                rec.id,
                rec.sample_rate,
                sample_rate.unwrap()
            );
        }
        let segs = segment_recording(&rec, cfg.dataset.segment_s, cfg.dataset.overlap_s)?;
        let first = meta.len();
        let files: Vec<Vec<(FeatureKind, Vec<usize>, Vec<u8>)>> = segs
            .par_iter()
            .map(|s| -> Result<_> {
                let f = extract_features(&s.samples, s.sample_rate as f64, &params)
                    .with_context(|| format!("features of recording {} at {} s", s.parent_id, s.offset_s))?;
                FeatureKind::ALL
                    .iter()
                    .map(|&k| {
                        let t = f.get(k);
                        let file = FeatureFile::new(k, t.shape(), t.data.iter().map(|&v| v as f32).collect())?;
                        Ok((k, t.shape(), encode_m3ft(&file)))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (i, per_kind) in files.into_iter().enumerate() {
            for (k, shape, bytes) in per_kind {
                if let Some(prev) = shapes.insert(k.name(), shape.clone()) {
                    if prev != shape {
                        bail!("{} has shape {shape:?} here but {prev:?} elsewhere", k.name());
                    }
                }
                write_atomic(&ctx.run.path(feature_path(first + i, k)), &bytes)?;
            }
        }
        meta.extend(segs.into_iter().map(|s| Segment {
            samples: Vec::new(),
            ..s
        }));
        Ok(())
    })?;
    if meta.is_empty() {
        bail!("no segments: every recording is shorter than dataset.segment_s");
    }
    let manifest = split_dataset(&meta, &table, cfg.dataset.val_fraction, cfg.dataset.seed)?;
    write_atomic(&ctx.run.path(MANIFEST), manifest.to_csv().as_bytes())?;
    let count = |t: SplitTag| manifest.indices(t).len();
    let mut side = ctx.stamp();
    side.insert("segments".into(), json!(meta.len()));
    side.insert("sample_rate".into(), json!(sample_rate));
    side.insert("shapes".into(), json!(shapes));
    side.insert(
        "splits".into(),
        json!({"train": count(SplitTag::Train), "val": count(SplitTag::Val), "test": count(SplitTag::Test)}),
    );
    write_json(&ctx.run.path(EXTRACT_SIDECAR), &Value::Object(side))?;
    eprintln!(
        "extracted {} segments (train {}, val {}, test {})",
        meta.len(),
        count(SplitTag::Train),
        count(SplitTag::Val),
        count(SplitTag::Test)
    );
    Ok(())
}

fn load_manifest(ctx: &Context) -> Result<DatasetManifest> {
    let path = ctx.run.require(MANIFEST, "extract")?;
    ctx.run.require(EXTRACT_SIDECAR, "extract")?;
    Ok(DatasetManifest::from_csv(&read_text(&path)?, ctx.cfg.dataset.seed)?)
}

fn load_feature(ctx: &Context, index: usize, kind: FeatureKind) -> Result<FeatureFile> {
    let p = ctx.run.require(feature_path(index, kind), "extract")?;
    decode_m3ft(&read(&p)?).with_context(|| format!("decoding {}", p.display()))
}

/// Gate inputs the model consumes, per task.
fn gate_inputs(ctx: &Context, model: &ModelConfig) -> (Option<GateFeature>, Option<GateFeature>) {
    if !model.gated() {
        return (None, None);
    }
    let aux = model.has_aux().then_some(ctx.cfg.features.gate_aux);
    (Some(ctx.cfg.features.gate_main), aux)
}

fn load_split(
    ctx: &Context,
    manifest: &DatasetManifest,
    tag: SplitTag,
    gates: (Option<GateFeature>, Option<GateFeature>),
) -> Result<SampleSet> {
    let idx = manifest.indices(tag);
    let mut set: Option<SampleSet> = None;
    for &i in &idx {
        let x = load_feature(ctx, i, FeatureKind::LogPowerSpec)?;
        let gate = |g: Option<GateFeature>| -> Result<Vec<f32>> {
            Ok(match g {
                Some(g) => load_feature(ctx, i, gate_kind(g))?.data,
                None => Vec::new(),
            })
        };
        let (gm, ga) = (gate(gates.0)?, gate(gates.1)?);
        let s = set.get_or_insert_with(|| SampleSet::new(x.dims[0], x.dims[1], gm.len(), ga.len()));
        let e = &manifest.entries[i];
        s.push(&x.data, &gm, &ga, e.type_label.index(), e.size_label.index())?;
    }
    Ok(set.unwrap_or_else(|| SampleSet::new(0, 0, 0, 0)))
}

/// Gate widths of the configured features, read off the first segment.
fn gate_dims(ctx: &Context) -> Result<(usize, usize)> {
    let dim = |g: GateFeature| -> Result<usize> { Ok(load_feature(ctx, 0, gate_kind(g))?.data.len()) };
    Ok((dim(ctx.cfg.features.gate_main)?, dim(ctx.cfg.features.gate_aux)?))
}

pub fn train_stage(ctx: &Context) -> Result<()> {
    let manifest = load_manifest(ctx)?;
    let (gm, ga) = gate_dims(ctx)?;
    let mc = ctx.cfg.model.model_config(gm, ga);
    let gates = gate_inputs(ctx, &mc);
    let train_set = load_split(ctx, &manifest, SplitTag::Train, gates)?;
    let val_set = load_split(ctx, &manifest, SplitTag::Val, gates)?;
    let val = (!val_set.is_empty()).then_some(&val_set);
    for seed in ctx.seeds() {
        let dir = ctx.run.seed_dir(seed);
        let mut model = M3Model::<f32>::new(mc.clone(), seed)?;
        let mut lines = String::new();
        let out = train(&mut model, &train_set, val, &ctx.cfg.train, seed, |m| {
            lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            lines.push('\n');
            eprintln!(
                "seed {seed} epoch {:>3} loss {:.4} train {:.2}%{}",
                m.epoch,
                m.loss,
                m.train_acc_main,
                m.val_acc_main.map(|v| format!(" val {v:.2}%")).unwrap_or_default()
            );
        })?;
        write_atomic(&dir.join(METRICS), lines.as_bytes())?;
        let mut extra = ctx.stamp();
        extra.insert("seed".into(), json!(seed));
        extra.insert("selected_epoch".into(), json!(out.selected_epoch));
        let entries: Vec<Entry> = match &out.loss_weights {
            Some(w) => {
                let (sm, sa) = w.values();
                vec![
                    Entry {
                        name: "loss.s_main".into(),
                        dims: vec![1],
                        data: vec![sm as f32],
                    },
                    Entry {
                        name: "loss.s_aux".into(),
                        dims: vec![1],
                        data: vec![sa as f32],
                    },
                ]
            }
            None => Vec::new(),
        };
        let ck = model_checkpoint(&mut model, extra, entries)?;
        write_atomic(&dir.join(CHECKPOINT), &encode_m3ck(&ck)?)?;
        let mut side = ctx.stamp();
        side.insert("seed".into(), json!(seed));
        side.insert("epochs_run".into(), json!(out.history.len()));
        side.insert("selected_epoch".into(), json!(out.selected_epoch));
        side.insert("loss_drop".into(), json!(out.loss_drop()));
        side.insert("parameters".into(), json!(model.parameter_count(true)));
        side.insert("selected".into(), json!(out.history[out.selected_epoch - 1]));
        write_json(&dir.join("train.json"), &Value::Object(side))?;
    }
    Ok(())
}

fn load_model(ctx: &Context, seed: u64, file: &str) -> Result<(M3Model<f32>, Vec<Entry>)> {
    let p = ctx
        .run
        .require(PathBuf::from(format!("seed-{seed}")).join(file), "train")?;
    let ck = decode_m3ck(&read(&p)?).with_context(|| format!("decoding {}", p.display()))?;
    if let Some(h) = ck.meta.get("config_sha256").and_then(Value::as_str) {
        if h != ctx.run.hash {
            bail!("{} was written under config {h}, not {}", p.display(), ctx.run.hash);
        }
    }
    Ok(model_from_checkpoint(&ck)?)
}

fn read_history(ctx: &Context, seed: u64) -> Result<Vec<EpochMetrics>> {
    let p = ctx
        .run
        .require(PathBuf::from(format!("seed-{seed}")).join(METRICS), "train")?;
    read_text(&p)?
        .lines()
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", p.display())))
        .collect()
}

fn evaluate_checkpoints(ctx: &Context, file: &str, suffix: &str, report_name: &str) -> Result<Value> {
    let manifest = load_manifest(ctx)?;
    let mut runs = Vec::new();
    let mut test: Option<SampleSet> = None;
    for seed in ctx.seeds() {
        let (model, _) = load_model(ctx, seed, file)?;
        if test.is_none() {
            test = Some(load_split(
                ctx,
                &manifest,
                SplitTag::Test,
                gate_inputs(ctx, model.config()),
            )?);
        }
        let set = test.as_ref().expect("loaded");
        let e = evaluate(&model, set, ctx.cfg.train.batch_size)?;
        let dir = ctx.run.seed_dir(seed);
        write_atomic(
            &dir.join(format!("confusion_type{suffix}.csv")),
            e.main.to_csv().as_bytes(),
        )?;
        if let Some(aux) = &e.aux {
            write_atomic(
                &dir.join(format!("confusion_size{suffix}.csv")),
                aux.to_csv().as_bytes(),
            )?;
        }
        runs.push(SeedRun {
            seed,
            type_accuracy: e.main_accuracy(),
            size_accuracy: e.aux_accuracy(),
            history: read_history(ctx, seed)?,
        });
    }
    let report = report_runs(runs, ctx.cfg.train.batch_size)?;
    let mut out = ctx.stamp();
    out.insert("checkpoint".into(), json!(file));
    out.insert("report".into(), serde_json::to_value(&report)?);
    let value = Value::Object(out);
    write_json(&ctx.run.path(report_name), &value)?;
    println!("{file}: type {}", report.type_accuracy.text);
    if let Some(s) = &report.size_accuracy {
        println!("{file}: size {}", s.text);
    }
    Ok(value)
}

pub fn eval(ctx: &Context) -> Result<()> {
    evaluate_checkpoints(ctx, CHECKPOINT, "", REPORT)?;
    let pruned = ctx
        .seeds()
        .iter()
        .all(|&s| ctx.run.seed_dir(s).join(PRUNED_CHECKPOINT).exists());
    if pruned {
        evaluate_checkpoints(ctx, PRUNED_CHECKPOINT, ".pruned", PRUNED_REPORT)?;
    }
    Ok(())
}

pub fn prune(ctx: &Context) -> Result<()> {
    for seed in ctx.seeds() {
        let (model, rest) = load_model(ctx, seed, CHECKPOINT)?;
        let before = model.parameter_count(true);
        let (mut pruned, note) = model.prune_for_inference();
        if let Some(n) = &note {
            eprintln!("seed {seed}: {n}");
        }
        let mut extra = ctx.stamp();
        extra.insert("seed".into(), json!(seed));
        extra.insert("pruned_from".into(), json!(CHECKPOINT));
        let ck = model_checkpoint(&mut pruned, extra, rest)?;
        let dir = ctx.run.seed_dir(seed);
        write_atomic(&dir.join(PRUNED_CHECKPOINT), &encode_m3ck(&ck)?)?;
        let mut side = ctx.stamp();
        side.insert("seed".into(), json!(seed));
        side.insert("parameters_before".into(), json!(before));
        side.insert("parameters_after".into(), json!(pruned.parameter_count(true)));
        side.insert("note".into(), json!(note));
        write_json(&dir.join("prune.json"), &Value::Object(side))?;
        eprintln!("seed {seed}: {before} -> {} parameters", pruned.parameter_count(true));
    }
    Ok(())
}

fn feature_name(g: GateFeature) -> &'static str {
    match g {
        GateFeature::Welch => "welch",
        GateFeature::AvgAmp => "avg_amp",
        GateFeature::Centroid => "centroid",
        GateFeature::Main => "main",
    }
}

/// Embeds each candidate gating feature of every segment in 2-D with t-SNE
/// and clusters the embedding with k-means.
pub fn cluster(ctx: &Context) -> Result<()> {
    let manifest = load_manifest(ctx)?;
    let a = &ctx.cfg.analysis;
    let n = manifest.entries.len();
    let labels: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| match a.label {
            LabelKind::Type => e.type_label.name(),
            LabelKind::Size => e.size_label.name(),
        })
        .collect();
    let mut summary = Vec::new();
    for &g in &a.features {
        let name = feature_name(g);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                Ok(load_feature(ctx, i, gate_kind(g))?
                    .data
                    .iter()
                    .map(|&v| v as f64)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let x = if a.standardize { standardize(&rows)? } else { rows };
        let emb = tsne(&x, &a.tsne, a.seed).with_context(|| format!("t-SNE of {name}"))?;
        let pts: Vec<Vec<f64>> = emb.points.iter().map(|p| p.to_vec()).collect();
        let km = kmeans(&pts, &a.kmeans, a.seed).with_context(|| format!("k-means of {name}"))?;
        let mut csv = String::from("x,y,cluster,label\n");
        for ((p, c), l) in emb.points.iter().zip(&km.assignments).zip(&labels) {
            csv.push_str(&format!("{},{},{c},{l}\n", p[0], p[1]));
        }
        write_atomic(&ctx.run.path(format!("cluster/{name}.csv")), csv.as_bytes())?;
        let mut m = ctx.stamp();
        m.insert("feature".into(), json!(name));
        m.insert("points".into(), json!(n));
        m.insert("k".into(), json!(a.kmeans.k));
        m.insert("perplexity".into(), json!(emb.perplexity));
        m.insert("final_kl".into(), json!(emb.kl_trace.last()));
        m.insert("inertia".into(), json!(km.inertia));
        m.insert("silhouette".into(), json!(km.silhouette));
        m.insert("inertia_trace".into(), json!(km.inertia_trace));
        m.insert("restart_inertias".into(), json!(km.restart_inertias));
        write_json(&ctx.run.path(format!("cluster/{name}.json")), &Value::Object(m))?;
        println!(
            "{name}: inertia {:.4} silhouette {}",
            km.inertia,
            km.silhouette.map_or("undefined".into(), |s| format!("{s:.4}"))
        );
        summary.push(json!({"feature": name, "inertia": km.inertia, "silhouette": km.silhouette}));
    }
    let mut side = ctx.stamp();
    side.insert("features".into(), Value::Array(summary));
    write_json(&ctx.run.path("cluster/summary.json"), &Value::Object(side))
}
