use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bout_core::analysis::GroupBy;
use bout_core::augment::{AugmentConfig, SplitSpec};
use bout_core::explain::Method;
use bout_core::optflow::farneback_flow;
use bout_core::pipeline::{
    analyze_stage, augment_stage, baseline_stage, eval_stage, explain_stage, preprocess_stage,
    run_pipeline, search_stage, synth_stage, train_stage, AnalyzeConfig, ExplainConfig, RunConfig,
    Stage, RELEVANCE_FILE,
};
use bout_core::synthgen::MANIFEST_FILE;
use bout_core::twostream::{Preset, Stream};
use bout_core::Frame;
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "bout",
    version,
    about = "Two-stream swim-bout classification pipeline"
)]
struct Cli {
    /// Run configuration (TOML); its sections supply defaults for every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "BOUT_WORKERS")]
    workers: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips and their manifest.
    Synth(SynthArgs),
    /// Crop clips and cut 150-frame bout events.
    Preprocess(PreprocessArgs),
    /// Render the optical flow between two frames.
    Flow(FlowArgs),
    /// Expand events into augmented train/valid/test containers.
    Augment(AugmentArgs),
    /// Train the two-stream model.
    Train(TrainArgs),
    /// Grid search over learning rate and weight decay.
    Search(SearchArgs),
    /// Accuracy of a checkpoint on a container.
    Eval(EvalArgs),
    /// Relevance maps for every sample of a container.
    Explain(ExplainArgs),
    /// Aggregate relevance maps into heatmaps and summaries.
    Analyze(AnalyzeArgs),
    /// Kinematic-feature SVM baseline.
    Baseline(BaselineArgs),
    /// Run several stages under one output root.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Square frame side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    artifact_probability: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Synthesis manifest, or the directory holding it.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Whiten the two left-hand corner squares of every frame.
    #[arg(long)]
    mask_corners: bool,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long)]
    prev: PathBuf,
    #[arg(long)]
    next: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split_spec: Option<SplitSpec>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    subsamples: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.bout, valid.bout and augment.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Learning rates and weight decays as `LR,LR,...:WD,WD,...`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Container to evaluate (e.g. data/test.bout).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    stream: Option<Stream>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    /// Also write one overlay PNG per sample.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Relevance file, or the explain output directory.
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    group_by: Option<GroupBy>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Comma-separated stages; all stages when omitted.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<Stage>,
    /// Output root, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {v:?} in grid"))
        })
        .collect()
}

fn augment_for(config: &RunConfig, preset: Preset) -> AugmentConfig {
    match preset {
        Preset::Desk => config.augment.clone(),
        Preset::Full => AugmentConfig::full(),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let config = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    })
}

fn read_frame(path: &Path) -> Result<Frame> {
    Frame::read_png(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            let spec = &mut config.synth;
            if let Some(n) = a.n {
                spec.n_videos = n;
            }
            if let Some(s) = a.size {
                spec.frame_height = s;
                spec.frame_width = s;
            }
            if let Some(f) = a.frames {
                spec.frames_per_video = f;
            }
            if let Some(p) = a.artifact_probability {
                spec.artifact_probability = p;
            }
            let n = synth_stage(spec, &a.out)?;
            print_json(&serde_json::json!({"videos": n, "out": a.out}))?;
        }
        Command::Preprocess(a) => {
            let mut pre = config.preprocess.clone();
            pre.mask_corners |= a.mask_corners;
            let manifest = if a.input.is_dir() {
                a.input.join(MANIFEST_FILE)
            } else {
                a.input.clone()
            };
            let records = preprocess_stage(&manifest, &a.out, &pre)?;
            print_json(&serde_json::json!({"events": records.len(), "out": a.out}))?;
        }
        Command::Flow(a) => {
            let (prev, next) = (read_frame(&a.prev)?, read_frame(&a.next)?);
            let field = farneback_flow(&prev, &next, &config.augment.flow)?;
            field
                .to_color_image()
                .save(&a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            print_json(&serde_json::json!({"max_magnitude": field.max_magnitude(), "out": a.out}))?;
        }
        Command::Augment(a) => {
            let mut augment = augment_for(&config, a.preset.unwrap_or(config.preset));
            if let Some(s) = a.subsamples {
                augment.subsamples_per_event = s;
            }
            let split = a.split_spec.unwrap_or(config.split);
            let counts = augment_stage(&a.events, &a.out, &augment, &split, config.seed)?;
            print_json(&counts)?;
        }
        Command::Train(a) => {
            let mut train = config.train.clone();
            if let Some(v) = a.lr {
                train.lr = v;
            }
            if let Some(v) = a.wd {
                train.weight_decay = v;
            }
            if let Some(v) = a.epochs {
                train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                train.batch_size = v;
            }
            let preset = a.preset.unwrap_or(config.preset);
            let summary = train_stage(&a.data, &a.out, preset, &train, |r| {
                println!("{}", serde_json::to_string(r).expect("records serialize"));
            })?;
            info!(
                "best epoch {} with valid accuracy {:.4}",
                summary.best_epoch, summary.best_valid.full
            );
        }
        Command::Search(a) => {
            let mut search = config.search.clone();
            if let Some(grid) = &a.grid {
                let Some((lrs, wds)) = grid.split_once(':') else {
                    bail!("grid must look like LR,LR:WD,WD");
                };
                search.learning_rates = parse_list(lrs)?;
                search.weight_decays = parse_list(wds)?;
            }
            if let Some(e) = a.epochs {
                search.epochs = e;
            }
            let preset = a.preset.unwrap_or(config.preset);
            let result = search_stage(&a.data, &a.out, preset, &config.train, &search, |row| {
                println!("{}", serde_json::to_string(row).expect("rows serialize"));
            })?;
            print_json(
                &serde_json::json!({"best_lr": result.best_lr, "best_weight_decay": result.best_weight_decay}),
            )?;
        }
        Command::Eval(a) => {
            let metrics = eval_stage(&a.checkpoint, &a.data, None)?;
            print_json(&metrics)?;
        }
        Command::Explain(a) => {
            let explain = ExplainConfig {
                method: a.method.unwrap_or(config.explain.method),
                stream: a.stream.unwrap_or(config.explain.stream),
                limit: a.limit.or(config.explain.limit),
                png: a.png || config.explain.png,
            };
            let n = explain_stage(&a.checkpoint, &a.data, &a.out, &explain)?;
            print_json(&serde_json::json!({"records": n, "out": a.out}))?;
        }
        Command::Analyze(a) => {
            let analyze = AnalyzeConfig {
                group_by: a.group_by.unwrap_or(config.analyze.group_by),
                window: a.window.unwrap_or(config.analyze.window),
            };
            let maps = if a.maps.is_dir() {
                a.maps.join(RELEVANCE_FILE)
            } else {
                a.maps.clone()
            };
            let summary = analyze_stage(&maps, &a.out, &analyze)?;
            print_json(&serde_json::json!({
                "records": summary.records,
                "corner_mass": summary.corner_mass,
                "groups": summary.groups.len(),
                "out": a.out,
            }))?;
        }
        Command::Baseline(a) => {
            let report = baseline_stage(&a.events, &a.out, &config.baseline)?;
            print_json(&serde_json::json!({
                "events": report.features.len(),
                "dropped": report.dropped,
                "cv_accuracy": report.cv.cv_accuracy,
                "test_accuracy": report.cv.test_accuracy,
                "best": report.cv.best,
            }))?;
        }
        Command::Pipeline(a) => {
            if let Some(out) = a.out {
                config.output_root = out;
            }
            if a.print_config {
                print!("{}", config.to_toml()?);
                return Ok(());
            }
            let stages = if a.stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                a.stages
            };
            let manifest = run_pipeline(&config, &stages)?;
            for entry in &manifest.stages {
                print_json(entry)?;
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    run(cli)
}
