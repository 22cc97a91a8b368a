//! The `microau` command line.
//!
//! Every command writes its results as files under `--out` and reports
//! progress on standard error. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | data error (manifest, landmarks, frames, shapes) |
//! | 2 | I/O error |
//! | 3 | training loss diverged |
//! | 4 | invalid config, task spec, emotion spec or arguments |
//! | 5 | unreadable, corrupt or mismatched checkpoint |
//! | 6 | manifest has no emotion labels |
//! | 7 | unknown sample id |

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::data::synthetic::SyntheticSpec;
use crate::data::{generate_synthetic, load_manifest, prepare_samples, Manifest, MotionSource, Sample};
use crate::error::{Error, Result};
use crate::mer::{EmotionMetrics, EmotionSpec};
use crate::model::{Model, PreparedSample};
use crate::preprocess::Frame;
use crate::task::{resolve_task, AuTaskSpec, Dataset};
use crate::train::checkpoint::Checkpoint;
use crate::train::{evaluate, run_loso, MetricsBlock, SamplePrediction, TrainOptions};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "microau", version, about = "Micro-expression AU detection with landmark-guided attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest, task, emotions and config.
    Synth(SynthArgs),
    /// Leave-one-subject-out training and evaluation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Zero-shot emotion recognition from a checkpoint.
    Mer(MerArgs),
    /// Render attention heatmaps or similarity matrices.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic spec (TOML); the built-in two-AU spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<String>,
    /// `pta`, `maxpool` or `meanpool`.
    #[arg(long)]
    pub pooling: Option<String>,
    /// `gda`, `add_mlp` or `cat_mlp`.
    #[arg(long)]
    pub fusion: Option<String>,
    /// `miauc`, `local_orig`, `global_orig` or `none`.
    #[arg(long)]
    pub cl_variant: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    /// Task: a dataset name or a task file, replacing the config's `task`.
    #[arg(long)]
    pub spec: Option<String>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Train folds one after another instead of in parallel.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected task (dataset name or file); must match the checkpoint.
    #[arg(long)]
    pub spec: Option<String>,
    /// Use every sample instead of the checkpoint's held-out subject.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct MerArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Emotion spec; falls back to the checkpoint config, then the default.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizKind {
    Heatmap,
    Simmatrix,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sample ids, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sample: Vec<String>,
    #[arg(long, value_enum)]
    pub kind: VizKind,
    /// AU code; heatmaps sum every AU and simmatrix uses the first when omitted.
    #[arg(long)]
    pub au: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Stable process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 2,
        Error::DivergedLoss { .. } => 3,
        Error::Config(_)
        | Error::InvalidTaskSpec(_)
        | Error::UnknownDataset(_)
        | Error::LayerCountExceeded { .. }
        | Error::EmotionSpec(_)
        | Error::EmptyPrompt(_)
        | Error::RegionOutOfBounds { .. } => 4,
        Error::Checkpoint(_) => 5,
        Error::MissingEmotionLabels(_) => 6,
        Error::UnknownSample(_) => 7,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Argument errors exit with 4; help and version with 0.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Mer(a) => cmd_mer(&a),
        Command::Visualize(a) => cmd_visualize(&a),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(format!("resolving {}", p.display()), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, &s)
}

fn is_dataset(reference: &str) -> bool {
    reference.parse::<Dataset>().is_ok()
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SyntheticSpec::from_file(p)?,
        None => SyntheticSpec::default(),
    };
    let out = generate_synthetic(&spec, a.seed, &a.out)?;
    eprintln!(
        "wrote {} samples; train with --config {}",
        out.samples.len(),
        out.config_file.display()
    );
    println!("{}", out.manifest.display());
    Ok(())
}

/// Reads the config, applies overrides and turns every file reference into
/// an absolute path so the snapshot stays valid wherever it is read.
pub fn training_config(a: &TrainArgs) -> Result<Config> {
    let mut config = Config::from_file(&a.config)?;
    let base = absolute(a.config.parent().unwrap_or(Path::new(".")))?;
    let flags = [
        ("seed", &a.seed),
        ("pooling", &a.pooling),
        ("fusion", &a.fusion),
        ("cl_variant", &a.cl_variant),
        ("alpha", &a.alpha),
        ("beta", &a.beta),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    if !is_dataset(&config.task) {
        config.task = absolute(&config.resolve_path(&config.task, Some(&base)))?.display().to_string();
    }
    if let Some(spec) = &a.spec {
        config.task = if is_dataset(spec) { spec.clone() } else { absolute(Path::new(spec))?.display().to_string() };
    }
    for field in [&mut config.emotion_spec, &mut config.pretrained_weights] {
        if let Some(v) = field.as_mut() {
            let p = Path::new(v.as_str());
            *v = absolute(&if p.is_relative() { base.join(p) } else { p.to_path_buf() })?.display().to_string();
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = training_config(a)?;
    let task = resolve_task(&config.task, None)?;
    let emotion = config.emotion_spec.as_deref().map(|p| EmotionSpec::from_file(Path::new(p))).transpose()?;
    let manifest = load_manifest(&a.manifest, &task, config.drop_unlabeled)?;
    let grid = Model::skeleton(&config, &task)?.grid();
    let samples = prepare_samples(&manifest.samples, &config, &task, grid)?;
    eprintln!("training {} samples, {} AUs, {} epochs", samples.len(), task.len(), config.epochs);
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        emotion: emotion.filter(|_| manifest.has_emotion_labels()),
        parallel: !a.sequential,
    };
    let (report, results) = run_loso(&config, &task, &samples, &opts)?;
    let dir = a.out.join(&config.run_name);
    create_dir(&dir)?;
    write_file(&dir.join("metrics.json"), &report.to_json())?;
    write_file(&dir.join("config.toml"), &config.to_toml())?;
    let predictions: Vec<&SamplePrediction> = results.iter().flat_map(|r| &r.test.predictions).collect();
    write_json(&dir.join("predictions.json"), &predictions)?;
    eprintln!(
        "LOSO F1 {:.4} ACC {:.4}; train F1 {:.4} ACC {:.4}",
        report.test.au.f1, report.test.au.acc, report.train.au.f1, report.train.au.acc
    );
    if let Some(mer) = &report.test.mer {
        eprintln!("LOSO MER macro F1 {:.4}", mer.macro_f1);
    }
    println!("{}", dir.join("metrics.json").display());
    Ok(())
}

/// A trained model restored from a checkpoint with its config and task.
pub struct Restored {
    pub model: Model,
    pub checkpoint: Checkpoint,
}

pub fn restore(path: &Path) -> Result<Restored> {
    let checkpoint = Checkpoint::load(path)?;
    let config = checkpoint.config.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no config".into()))?;
    let task = checkpoint.task.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no task".into()))?;
    let model = Model::skeleton(&config, &task)?;
    model.load_tensors(&checkpoint.tensor_map()?)?;
    Ok(Restored { model, checkpoint })
}

fn check_task(expected: &AuTaskSpec, found: &AuTaskSpec) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    let detail = if expected.au_ids() != found.au_ids() {
        format!("checkpoint covers AUs {:?}, the given task has {:?}", found.au_ids(), expected.au_ids())
    } else {
        "same AUs but different landmarks or prompts".to_string()
    };
    Err(Error::Checkpoint(format!("task mismatch: {detail}")))
}

/// Samples of the held-out subject, or all of them with `all`.
fn held_out_samples<'a>(manifest: &'a Manifest, ckpt: &Checkpoint, all: bool) -> Result<(Option<String>, Vec<&'a Sample>)> {
    let subject = if all { None } else { ckpt.fold.as_ref().map(|f| f.held_out.clone()) };
    let chosen: Vec<&Sample> =
        manifest.samples.iter().filter(|s| subject.as_ref().is_none_or(|h| &s.subject == h)).collect();
    if chosen.is_empty() {
        return Err(Error::Config(match &subject {
            Some(h) => format!("manifest has no sample of held-out subject `{h}`; pass --all"),
            None => "manifest has no samples".into(),
        }));
    }
    Ok((subject, chosen))
}

fn prepare(model: &Model, samples: &[&Sample]) -> Result<Vec<PreparedSample>> {
    let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
    prepare_samples(&owned, &model.config, &model.task, model.grid())
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    held_out: Option<String>,
    metrics: MetricsBlock,
    predictions: &'a [SamplePrediction],
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let Restored { model, checkpoint } = restore(&a.checkpoint)?;
    if let Some(spec) = &a.spec {
        check_task(&resolve_task(spec, None)?, &model.task)?;
    }
    let manifest = load_manifest(&a.manifest, &model.task, model.config.drop_unlabeled)?;
    let (held_out, chosen) = held_out_samples(&manifest, &checkpoint, a.all)?;
    let emotion = match (&model.config.emotion_spec, manifest.has_emotion_labels()) {
        (Some(p), true) => Some(EmotionSpec::from_file(Path::new(p))?),
        _ => None,
    };
    let prepared = prepare(&model, &chosen)?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    let eval = evaluate(&model, &refs, emotion.as_ref())?;
    let metrics = MetricsBlock::from_accumulator(&eval.metrics, emotion.as_ref())?;
    eprintln!("{} samples: F1 {:.4} ACC {:.4}", refs.len(), metrics.au.f1, metrics.au.acc);
    create_dir(&a.out)?;
    let path = a.out.join("eval.json");
    write_json(&path, &EvalReport { held_out, metrics, predictions: &eval.predictions })?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct MerPrediction {
    id: String,
    emotion: String,
    predicted: String,
    scores: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct MerReport {
    held_out: Option<String>,
    emotions: Vec<String>,
    metrics: EmotionMetrics,
    predictions: Vec<MerPrediction>,
}

pub fn cmd_mer(a: &MerArgs) -> Result<()> {
    let Restored { model, checkpoint } = restore(&a.checkpoint)?;
    let spec = match (&a.spec, &model.config.emotion_spec) {
        (Some(p), _) => EmotionSpec::from_file(p)?,
        (None, Some(p)) => EmotionSpec::from_file(Path::new(p))?,
        (None, None) => EmotionSpec::default(),
    };
    let manifest = load_manifest(&a.manifest, &model.task, model.config.drop_unlabeled)?;
    if !manifest.has_emotion_labels() {
        return Err(Error::MissingEmotionLabels(format!("{} has no emotion labels", a.manifest.display())));
    }
    let (held_out, chosen) = held_out_samples(&manifest, &checkpoint, a.all)?;
    let chosen: Vec<&Sample> = chosen.into_iter().filter(|s| s.emotion.is_some()).collect();
    if chosen.is_empty() {
        return Err(Error::MissingEmotionLabels("no selected sample has an emotion label".into()));
    }
    let prepared = prepare(&model, &chosen)?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    let eval = evaluate(&model, &refs, Some(&spec))?;
    let names: Vec<&str> = spec.emotions.iter().map(|e| e.name.as_str()).collect();
    let confusion = eval.metrics.emotion.as_ref().ok_or(Error::EmptyAccumulator)?;
    let metrics = confusion.metrics(&names)?;
    eprintln!("{} samples: MER macro F1 {:.4} accuracy {:.4}", refs.len(), metrics.macro_f1, metrics.accuracy);
    let predictions = eval
        .predictions
        .into_iter()
        .map(|p| MerPrediction {
            id: p.id,
            emotion: p.emotion.unwrap_or_default(),
            predicted: p.emotion_predicted.unwrap_or_default(),
            scores: p.emotion_scores.unwrap_or_default(),
        })
        .collect();
    create_dir(&a.out)?;
    let path = a.out.join("mer.json");
    let emotions = names.iter().map(|s| s.to_string()).collect();
    write_json(&path, &MerReport { held_out, emotions, metrics, predictions })?;
    println!("{}", path.display());
    Ok(())
}

/// Apex frame, or the flow magnitude scaled to 0..255 for flow-only rows.
fn background(sample: &Sample) -> Result<Frame> {
    match &sample.motion {
        MotionSource::Frames { apex, .. } => Frame::load(apex),
        MotionSource::Flow(_) => {
            let flow = crate::data::sample_flow(sample)?;
            let mag: Vec<f64> =
                (0..flow.height).flat_map(|y| (0..flow.width).map(move |x| (x, y))).map(|(x, y)| flow.magnitude(x, y)).collect();
            let peak = mag.iter().fold(0.0f64, |m, v| m.max(*v));
            let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
            Ok(Frame::new(flow.width, flow.height, mag.into_iter().map(|v| v * scale).collect()))
        }
    }
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let Restored { model, .. } = restore(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest, &model.task, model.config.drop_unlabeled)?;
    let chosen = a
        .sample
        .iter()
        .map(|id| manifest.samples.iter().find(|s| &s.id == id).ok_or_else(|| Error::UnknownSample(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let au = match a.au {
        Some(code) => Some(
            model
                .task
                .position(code)
                .ok_or_else(|| Error::Config(format!("AU{code} is not part of the checkpoint's task")))?,
        ),
        None => None,
    };
    let prepared = prepare(&model, &chosen)?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    let out = model.forward(&refs)?;
    create_dir(&a.out)?;
    match a.kind {
        VizKind::Heatmap => {
            let weights = out
                .pta_weights
                .as_ref()
                .ok_or_else(|| Error::Config("heatmaps need pooling = \"pta\"".into()))?;
            let weights: Vec<Vec<Vec<f64>>> = weights.iter().map(|w| w.to_vec2::<f64>()).collect::<std::result::Result<_, _>>()?;
            let aus: Vec<usize> = match au {
                Some(n) => vec![n],
                None => (0..model.task.len()).collect(),
            };
            let tag = au.map_or(String::new(), |n| format!("_au{}", model.task.aus[n].id));
            for (i, (sample, prep)) in chosen.iter().zip(&prepared).enumerate() {
                let indices: Vec<Vec<usize>> = aus.iter().map(|&n| prep.token_indices[n].clone()).collect();
                let w: Vec<Vec<f64>> = aus.iter().map(|&n| weights[n][i].clone()).collect();
                let heat = viz::pta_heat_grid(model.grid(), &indices, &w);
                let stem = a.out.join(format!("{}{tag}_heatmap", sample.id));
                viz::save_rgb(&viz::render_heatmap(&background(sample)?, &heat), &stem.with_extension("png"))?;
                write_file(&stem.with_extension("txt"), &viz::matrix_text(&heat))?;
                let (r, c) = viz::argmax_cell(&heat);
                eprintln!("{}: hottest cell row {r} col {c}", sample.id);
            }
        }
        VizKind::Simmatrix => {
            let n = au.unwrap_or(0);
            let labels: Vec<Vec<u8>> = prepared.iter().map(|s| s.labels.clone()).collect();
            let m = crate::mer::rows(&model.au_similarity(&out, &labels, n)?)?;
            let stem = a.out.join(format!("simmatrix_au{}", model.task.aus[n].id));
            viz::save_rgb(&viz::render_matrix(&m, 32), &stem.with_extension("png"))?;
            let mut text = String::new();
            for s in &prepared {
                text.push_str(&format!("# {} label {}\n", s.id, s.labels[n]));
            }
            text.push_str(&viz::matrix_text(&m));
            write_file(&stem.with_extension("txt"), &text)?;
        }
    }
    println!("{}", a.out.display());
    Ok(())
}
