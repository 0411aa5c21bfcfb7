//! Stage runners shared by the command line and the end-to-end runs, plus
//! the configuration file and run manifest for whole-pipeline execution.
//!
//! Artifacts live under one output root:
//! `videos/`, `events/`, `data/`, `model/`, `search/`, `eval/`, `maps/`,
//! `analysis/`, `baseline/`, and `run_manifest.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    aggregate_heatmaps, confidence_windows, corner_mass_of, event_time_distribution, frame_relevance_distribution,
    map_to_frame, GroupBy, CONFIDENCE_WINDOW,
};
use crate::augment::{expand_event, AugmentConfig, ContainerReader, ContainerWriter, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::explain::{explain_sample, read_relevance, Method, RelevanceRecord, RelevanceWriter};
use crate::frame::VideoClip;
use crate::nncore::{read_checkpoint, write_checkpoint};
use crate::preprocess::{
    extract_events, read_event, read_event_index, write_event, write_event_index, EventRecord, PreprocessConfig,
    EVENT_INDEX_FILE, EVENT_LEN,
};
use crate::svmbaseline::{default_grid, featurize_event, run_baseline, BaselineReport, CvOptions, TailConfig};
use crate::synthgen::{generate_dataset, read_manifest, SynthSpec, MANIFEST_FILE};
use crate::twostream::{
    evaluate, hyperparameter_search, train, EpochRecord, Metrics, Preset, SearchResult, SearchRow, Stream,
    StreamConfig, TrainConfig, TwoStreamModel, DEFAULT_SEED,
};

pub const AUGMENT_CONFIG_FILE: &str = "augment.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bckp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RELEVANCE_FILE: &str = "relevance.brel";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("values serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r).expect("rows serialize")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Epoch history without wall-clock times, so stored artifacts repeat
/// byte for byte across runs.
fn history_json(history: &[EpochRecord]) -> Vec<serde_json::Value> {
    history
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("records serialize");
            if let Some(obj) = v.as_object_mut() {
                obj.remove("seconds");
            }
            v
        })
        .collect()
}

pub fn synth_stage(spec: &SynthSpec, out: &Path) -> Result<usize> {
    let rows = generate_dataset(spec, out)?;
    info!("synthesized {} videos into {}", rows.len(), out.display());
    Ok(rows.len())
}

/// Crops and cuts events from every clip in a synthesis manifest.
pub fn preprocess_stage(manifest: &Path, out: &Path, config: &PreprocessConfig) -> Result<Vec<EventRecord>> {
    let rows = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    create_dir(out)?;
    let per_clip = rows
        .par_iter()
        .map(|row| {
            let clip = VideoClip::read_dir(&root.join(&row.path))?;
            let events = extract_events(&clip, row.label, &row.id, config)?;
            if events.is_empty() {
                warn!("no bout detected in {}", row.id);
            }
            events.iter().map(|e| write_event(e, out)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<EventRecord> = per_clip.into_iter().flatten().collect();
    write_event_index(&out.join(EVENT_INDEX_FILE), &records)?;
    info!("wrote {} events from {} clips", records.len(), rows.len());
    Ok(records)
}

/// Splits events by source file and writes one container per split. The
/// augmentation geometry and the split assignment are stored next to them.
pub fn augment_stage(
    events_dir: &Path,
    out: &Path,
    config: &AugmentConfig,
    split: &SplitSpec,
    seed: u64,
) -> Result<BTreeMap<Split, usize>> {
    config.validate()?;
    let records = read_event_index(&events_dir.join(EVENT_INDEX_FILE))?;
    let sources: Vec<String> = records.iter().map(|r| r.source_id.clone()).collect();
    let assignment = split.assign(&sources, &mut ChaCha8Rng::seed_from_u64(seed));
    create_dir(out)?;
    let mut counts = BTreeMap::new();
    for which in Split::ALL {
        let mut writer = ContainerWriter::create(&out.join(which.file_name()), which)?;
        for (ordinal, record) in records.iter().enumerate() {
            if assignment.get(&record.source_id) != Some(&which) {
                continue;
            }
            let event = read_event(record, events_dir)?;
            for sample in expand_event(&event, config, seed, ordinal)? {
                writer.push(&sample)?;
            }
        }
        let n = writer.finish()?;
        info!("{which}: {n} samples");
        counts.insert(which, n);
    }
    write_json(&out.join(AUGMENT_CONFIG_FILE), config)?;
    write_json(&out.join(SPLITS_FILE), &assignment)?;
    Ok(counts)
}

pub fn read_augment_config(data_dir: &Path) -> Result<AugmentConfig> {
    read_json(&data_dir.join(AUGMENT_CONFIG_FILE))
}

fn open_split(data_dir: &Path, split: Split) -> Result<ContainerReader> {
    ContainerReader::open(&data_dir.join(split.file_name()))
}

/// Fresh two-stream model sized for the stored augmentation geometry.
pub fn fresh_model(preset: Preset, augment: &AugmentConfig, seed: u64) -> Result<TwoStreamModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TwoStreamModel::new(
        StreamConfig::for_augment(preset, Stream::Spatial, augment),
        StreamConfig::for_augment(preset, Stream::Temporal, augment),
        &mut rng,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_valid: Metrics,
    pub epochs: usize,
}

/// Trains on `data/train.bout`, selects on `data/valid.bout`, and writes the
/// best checkpoint plus per-epoch metrics into `out`.
pub fn train_stage(
    data_dir: &Path,
    out: &Path,
    preset: Preset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let augment = read_augment_config(data_dir)?;
    let mut train_set = open_split(data_dir, Split::Train)?;
    let mut valid_set = open_split(data_dir, Split::Valid)?;
    let mut model = fresh_model(preset, &augment, config.seed)?;
    let outcome = train(&mut model, &mut train_set, &mut valid_set, config, on_epoch)?;
    create_dir(out)?;
    let history = history_json(&outcome.history);
    write_jsonl(&out.join(METRICS_FILE), &history)?;
    let meta = serde_json::json!({
        "preset": preset,
        "train": config,
        "augment": augment,
        "best_epoch": outcome.best_epoch,
        "history": history,
    });
    write_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.best.to_checkpoint(meta))?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_valid: outcome.history[outcome.best_epoch - 1].valid,
        epochs: outcome.history.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            weight_decays: vec![1e-2, 1e-3, 1e-4],
            epochs: 8,
        }
    }
}

pub fn search_stage(
    data_dir: &Path,
    out: &Path,
    preset: Preset,
    base: &TrainConfig,
    search: &SearchConfig,
    on_row: impl FnMut(&SearchRow),
) -> Result<SearchResult> {
    let augment = read_augment_config(data_dir)?;
    let mut train_set = open_split(data_dir, Split::Train)?;
    let mut valid_set = open_split(data_dir, Split::Valid)?;
    let base = TrainConfig {
        epochs: search.epochs,
        ..base.clone()
    };
    let result = hyperparameter_search(
        &search.learning_rates,
        &search.weight_decays,
        &base,
        || fresh_model(preset, &augment, base.seed),
        &mut train_set,
        &mut valid_set,
        on_row,
    )?;
    create_dir(out)?;
    write_jsonl(&out.join("results.jsonl"), &result.rows)?;
    write_json(&out.join("best.json"), &result)?;
    Ok(result)
}

/// Model and the augmentation geometry it was trained on.
pub fn load_model(checkpoint: &Path) -> Result<(TwoStreamModel, AugmentConfig)> {
    let ckpt = read_checkpoint(checkpoint)?;
    let model = TwoStreamModel::from_checkpoint(&ckpt)?;
    let augment = serde_json::from_value(ckpt.meta.get("augment").cloned().unwrap_or_default())
        .map_err(|e| Error::Corrupt(format!("{}: augment metadata: {e}", checkpoint.display())))?;
    Ok((model, augment))
}

pub fn eval_stage(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<Metrics> {
    let (model, _) = load_model(checkpoint)?;
    let mut source = ContainerReader::open(data)?;
    let metrics = evaluate(&model, &mut source)?;
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub method: Method,
    pub stream: Stream,
    /// Explain at most this many samples, taken from the start of the split.
    pub limit: Option<usize>,
    /// Also write one overlay PNG per sample.
    pub png: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dtd,
            stream: Stream::Temporal,
            limit: None,
            png: false,
        }
    }
}

/// Relevance records for the samples of one container, in container order.
pub fn explain_container(
    model: &TwoStreamModel,
    augment: &AugmentConfig,
    data: &Path,
    config: &ExplainConfig,
) -> Result<Vec<(RelevanceRecord, crate::Frame)>> {
    let mut source = ContainerReader::open(data)?;
    let n = config.limit.map_or(source.len(), |l| l.min(source.len()));
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 16;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let samples = (start..end).map(|i| source.get(i)).collect::<Result<Vec<_>>>()?;
        let part = samples
            .par_iter()
            .map(|s| {
                let record = explain_sample(model, s, config.method, config.stream, None, augment)?;
                Ok((record, s.spatial.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(part);
        start = end;
    }
    Ok(out)
}

pub fn explain_stage(checkpoint: &Path, data: &Path, out: &Path, config: &ExplainConfig) -> Result<u64> {
    let (model, augment) = load_model(checkpoint)?;
    let records = explain_container(&model, &augment, data, config)?;
    create_dir(out)?;
    let mut writer = RelevanceWriter::create(&out.join(RELEVANCE_FILE))?;
    for (i, (record, base)) in records.iter().enumerate() {
        writer.push(record)?;
        if config.png {
            crate::analysis::render_overlay(base, &record.channel_sum(), &out.join(format!("sample_{i:05}.png")))?;
        }
    }
    writer.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub group_by: GroupBy,
    pub window: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            group_by: GroupBy::Class,
            window: CONFIDENCE_WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: String,
    pub count: usize,
    pub total_relevance: f64,
    pub corner_mass: f64,
    pub partial: bool,
    pub min_confidence: Option<f64>,
    pub max_confidence: Option<f64>,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub records: usize,
    pub corner_mass: f64,
    pub corner_mass_by_class: BTreeMap<usize, f64>,
    pub groups: Vec<GroupSummary>,
    /// Per flow frame, absolute and as a fraction of the total (temporal maps only).
    pub frame_distribution: Option<Vec<f64>>,
    pub frame_fractions: Option<Vec<f64>>,
    /// Per event frame (temporal maps only).
    pub event_time_distribution: Option<Vec<f64>>,
}

fn fractions(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.iter().map(|x| if total > 0.0 { x / total } else { 0.0 }).collect()
}

/// Group averages, corner masses and frame profiles of a set of maps.
pub fn analyze_records(records: &[RelevanceRecord], config: &AnalyzeConfig, out: &Path) -> Result<AnalysisSummary> {
    create_dir(out)?;
    let mut groups = Vec::new();
    let save = |key: &str, mean_map: &[f64], h: usize, w: usize| -> Result<String> {
        let name = format!("{key}.png");
        map_to_frame(mean_map, h, w)?.write_png(&out.join(&name))?;
        Ok(name)
    };
    match config.group_by {
        GroupBy::Confidence => {
            for win in confidence_windows(records, config.window)? {
                let agg = &win.aggregate;
                groups.push(GroupSummary {
                    key: agg.key.clone(),
                    count: agg.count,
                    total_relevance: agg.total_relevance,
                    corner_mass: win.corner_mass,
                    partial: agg.partial,
                    min_confidence: Some(win.min_confidence),
                    max_confidence: Some(win.max_confidence),
                    image: save(&agg.key, &agg.mean_map, agg.height, agg.width)?,
                });
            }
        }
        group_by => {
            for agg in aggregate_heatmaps(records, group_by)? {
                let members: Vec<&RelevanceRecord> = records
                    .iter()
                    .filter(|r| group_by == GroupBy::All || agg.key == format!("class{}", r.target_class))
                    .collect();
                groups.push(GroupSummary {
                    key: agg.key.clone(),
                    count: agg.count,
                    total_relevance: agg.total_relevance,
                    corner_mass: corner_mass_of(&members),
                    partial: agg.partial,
                    min_confidence: None,
                    max_confidence: None,
                    image: save(&agg.key, &agg.mean_map, agg.height, agg.width)?,
                });
            }
        }
    }
    let mut corner_mass_by_class = BTreeMap::new();
    for class in 0..2 {
        let members: Vec<&RelevanceRecord> = records.iter().filter(|r| r.target_class == class).collect();
        if !members.is_empty() {
            corner_mass_by_class.insert(class, corner_mass_of(&members));
        }
    }
    let temporal = !records.is_empty() && records.iter().all(|r| r.stream == Stream::Temporal);
    let (frame_distribution, event_profile) = if temporal {
        let mut total: Vec<f64> = Vec::new();
        for r in records {
            let d = frame_relevance_distribution(&r.values, r.channels())?;
            if total.is_empty() {
                total = vec![0.0; d.len()];
            }
            if d.len() != total.len() {
                return Err(Error::shape("frame distribution", total.len(), d.len()));
            }
            for (t, v) in total.iter_mut().zip(d) {
                *t += v;
            }
        }
        let n = records.len() as f64;
        let mean: Vec<f64> = total.into_iter().map(|v| v / n).collect();
        (Some(mean), Some(event_time_distribution(records, EVENT_LEN)?))
    } else {
        (None, None)
    };
    let all: Vec<&RelevanceRecord> = records.iter().collect();
    let summary = AnalysisSummary {
        records: records.len(),
        corner_mass: corner_mass_of(&all),
        corner_mass_by_class,
        groups,
        frame_fractions: frame_distribution.as_deref().map(fractions),
        frame_distribution,
        event_time_distribution: event_profile,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn analyze_stage(maps: &Path, out: &Path, config: &AnalyzeConfig) -> Result<AnalysisSummary> {
    let records = read_relevance(maps)?;
    analyze_records(&records, config, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BaselineConfig {
    pub tail: TailConfig,
    pub cv: CvOptions,
}

pub fn baseline_stage(events_dir: &Path, out_file: &Path, config: &BaselineConfig) -> Result<BaselineReport> {
    let records = read_event_index(&events_dir.join(EVENT_INDEX_FILE))?;
    let rows = records
        .iter()
        .map(|r| featurize_event(r, events_dir, &config.tail))
        .collect::<Result<Vec<_>>>()?;
    let report = run_baseline(rows, &default_grid(), &config.cv)?;
    if let Some(dir) = out_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out_file, &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Preprocess,
    Augment,
    Train,
    Search,
    Eval,
    Explain,
    Analyze,
    Baseline,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Preprocess,
        Stage::Augment,
        Stage::Train,
        Stage::Search,
        Stage::Eval,
        Stage::Explain,
        Stage::Analyze,
        Stage::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Search => "search",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
            Stage::Analyze => "analyze",
            Stage::Baseline => "baseline",
        }
    }

    /// Files the stage reads, relative to the output root.
    pub fn inputs(self) -> Vec<PathBuf> {
        let p = PathBuf::from;
        match self {
            Stage::Synth => vec![],
            Stage::Preprocess => vec![p("videos").join(MANIFEST_FILE)],
            Stage::Augment | Stage::Baseline => vec![p("events").join(EVENT_INDEX_FILE)],
            Stage::Train | Stage::Search => vec![
                p("data").join(Split::Train.file_name()),
                p("data").join(Split::Valid.file_name()),
                p("data").join(AUGMENT_CONFIG_FILE),
            ],
            Stage::Eval | Stage::Explain => {
                vec![p("model").join(CHECKPOINT_FILE), p("data").join(Split::Test.file_name())]
            }
            Stage::Analyze => vec![p("maps").join(RELEVANCE_FILE)],
        }
    }

    /// Directory the stage writes, relative to the output root.
    pub fn output(self) -> PathBuf {
        PathBuf::from(match self {
            Stage::Synth => "videos",
            Stage::Preprocess => "events",
            Stage::Augment => "data",
            Stage::Train => "model",
            Stage::Search => "search",
            Stage::Eval => "eval",
            Stage::Explain => "maps",
            Stage::Analyze => "analysis",
            Stage::Baseline => "baseline",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every stage's parameters plus the global seed, preset and output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub output_root: PathBuf,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub explain: ExplainConfig,
    pub analyze: AnalyzeConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            preset: Preset::Desk,
            output_root: PathBuf::from("run"),
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::desk(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            explain: ExplainConfig::default(),
            analyze: AnalyzeConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.propagate_seed();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate_seed();
        self
    }

    /// Copies the global seed into every stochastic stage.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.baseline.cv.seed = self.seed;
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.output_root.join(relative)
    }
}

/// Hex SHA-256 over a file, or over every file below a directory in sorted
/// relative-path order (path and contents both hashed).
pub fn digest_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        hash_file(path, &mut hasher)?;
    } else {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hash_file(&path.join(&rel), &mut hasher)?;
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

fn hash_file(path: &Path, hasher: &mut Sha256) -> Result<()> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        hasher.update(&buf[..n]);
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub version: String,
    pub status: StageStatus,
    pub inputs: Vec<ArtifactDigest>,
    pub outputs: Vec<ArtifactDigest>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<StageEntry>,
}

impl RunManifest {
    /// The manifest with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        for s in &mut m.stages {
            s.seconds = 0.0;
        }
        m
    }
}

/// Fails before any work when a stage input is neither on disk nor produced
/// by an earlier requested stage.
pub fn check_dependencies(config: &RunConfig, stages: &[Stage]) -> Result<()> {
    for (i, stage) in stages.iter().enumerate() {
        for input in stage.inputs() {
            let produced = stages[..i].iter().any(|s| input.starts_with(s.output()));
            if !produced && !config.path(&input).exists() {
                return Err(Error::MissingDependency {
                    stage: stage.name().into(),
                    artifact: config.path(&input).display().to_string(),
                });
            }
        }
    }
    Ok(())
}

fn run_stage(config: &RunConfig, stage: Stage) -> Result<()> {
    let root = &config.output_root;
    let out = config.path(stage.output());
    match stage {
        Stage::Synth => synth_stage(&config.synth, &out).map(drop),
        Stage::Preprocess => {
            preprocess_stage(&root.join("videos").join(MANIFEST_FILE), &out, &config.preprocess).map(drop)
        }
        Stage::Augment => augment_stage(&root.join("events"), &out, &config.augment, &config.split, config.seed).map(drop),
        Stage::Train => train_stage(&root.join("data"), &out, config.preset, &config.train, |r| {
            info!("epoch {} valid {:.4}", r.epoch, r.valid.full)
        })
        .map(drop),
        Stage::Search => search_stage(&root.join("data"), &out, config.preset, &config.train, &config.search, |_| {})
            .map(drop),
        Stage::Eval => eval_stage(
            &root.join("model").join(CHECKPOINT_FILE),
            &root.join("data").join(Split::Test.file_name()),
            Some(&out),
        )
        .map(drop),
        Stage::Explain => explain_stage(
            &root.join("model").join(CHECKPOINT_FILE),
            &root.join("data").join(Split::Test.file_name()),
            &out,
            &config.explain,
        )
        .map(drop),
        Stage::Analyze => analyze_stage(&root.join("maps").join(RELEVANCE_FILE), &out, &config.analyze).map(drop),
        Stage::Baseline => baseline_stage(&root.join("events"), &out.join("report.json"), &config.baseline).map(drop),
    }
}

fn digests(config: &RunConfig, paths: &[PathBuf]) -> Result<Vec<ArtifactDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(ArtifactDigest {
                path: p.clone(),
                sha256: digest_path(&config.path(p))?,
            })
        })
        .collect()
}

/// Runs the requested stages in pipeline order and writes
/// `run_manifest.json`. A failing stage is recorded before its error is
/// returned.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage]) -> Result<RunManifest> {
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    check_dependencies(config, &stages)?;
    create_dir(&config.output_root)?;
    let mut manifest = RunManifest {
        config_sha256: config.digest(),
        seed: config.seed,
        stages: Vec::with_capacity(stages.len()),
    };
    let manifest_path = config.path(RUN_MANIFEST_FILE);
    for stage in stages {
        info!("stage {stage}");
        let inputs = digests(config, &stage.inputs())?;
        let started = Instant::now();
        let result = run_stage(config, stage);
        let seconds = started.elapsed().as_secs_f64();
        let (status, outputs, error) = match &result {
            Ok(()) => (StageStatus::Completed, digests(config, &[stage.output()])?, None),
            Err(e) => (StageStatus::Failed, Vec::new(), Some(e.to_string())),
        };
        manifest.stages.push(StageEntry {
            stage,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status,
            inputs,
            outputs,
            seconds,
            error,
        });
        write_json(&manifest_path, &manifest)?;
        result?;
    }
    Ok(manifest)
}
