//! `advseg`: dataset synthesis, training, evaluation, the ablation ladder and
//! prediction overlays from one binary.
//!
//! Exit codes: 0 success, 1 config / parse, 2 output I/O, 3 dataset,
//! 4 internal invariant violation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advseg::dataset::{load_dataset, DatasetError, LabeledSample};
use advseg::eval::{
    evaluate, overlay, predict_all, render_per_class, render_report, ClassRow, ConditionGroup, EvalError, ReportFormat,
    ReportRow,
};
use advseg::experiment::{median_rows, run_one, RunSummary};
use advseg::experiment::{DeskData, ExperimentError};
use advseg::model::{Checkpoint, Model, ModelError};
use advseg::scenegen::{attribute_histogram, generate_dataset, GenerationPlan, SceneError};
use advseg::schema::{TimeOfDay, WeatherCondition};
use advseg::training::{train, AblationMode, RunDir, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
enum Failure {
    Config(String),
    Output(String),
    Dataset(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Output(_) => 2,
            Failure::Dataset(_) => 3,
            Failure::Internal(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config error", m),
            Failure::Output(m) => ("output error", m),
            Failure::Dataset(m) => ("dataset error", m),
            Failure::Internal(m) => ("internal error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::Io { .. } => Failure::Output(e.to_string()),
        ModelError::Shape { .. } => Failure::Dataset(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::EmptyDataset(_) | TrainError::AllPixelsIgnored => Failure::Dataset(e.to_string()),
        TrainError::Config { .. } => Failure::Config(e.to_string()),
        TrainError::Model(m) => model_failure(m),
        TrainError::Io { .. } | TrainError::Csv { .. } => Failure::Output(e.to_string()),
        TrainError::NonFinite(_) => Failure::Internal(e.to_string()),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Model(m) => model_failure(m),
        EvalError::Dataset(d) => Failure::Output(d.to_string()),
        EvalError::InvalidPrediction { .. } | EvalError::NoDefinedClasses => Failure::Internal(e.to_string()),
        _ => Failure::Dataset(e.to_string()),
    }
}

fn experiment_failure(e: ExperimentError) -> Failure {
    match e {
        ExperimentError::Train(t) => train_failure(t),
        ExperimentError::Eval(v) => eval_failure(v),
        ExperimentError::Scene(s) => Failure::Config(s.to_string()),
        ExperimentError::Undefined(_) => Failure::Dataset(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "advseg", version, about = "Weather- and time-aware segmentation experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Compute device. Only the CPU backend is built in.
    #[arg(long, global = true, value_enum, default_value_t = Device::Auto)]
    device: Device,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Md => ReportFormat::Md,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Device {
    Auto,
    Cpu,
    Gpu,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a generation plan.
    Synth {
        /// Generation plan (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model as described by an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; overrides `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the newest matching checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset and write a condition report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every ablation mode over the configured seeds.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write prediction overlays for dataset samples.
    Overlay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for `<id>.png` files.
        #[arg(long)]
        out: PathBuf,
        /// Sample ids to render; all samples when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

/// Dataset locations. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    real_dataset: Option<PathBuf>,
    synth_dataset: Option<PathBuf>,
    eval_standard: Option<PathBuf>,
    eval_adverse: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

/// Plans used to create any configured dataset directory that does not exist yet.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Plans {
    real: Option<GenerationPlan>,
    synth: Option<GenerationPlan>,
    eval_standard: Option<GenerationPlan>,
    eval_adverse: Option<GenerationPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalOptions {
    format: ReportFormat,
    /// Training seeds for `ablation`; results report per-mode medians.
    seeds: Vec<u64>,
    /// Modes for `ablation`; all six when omitted.
    modes: Option<Vec<AblationMode>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { format: ReportFormat::Md, seeds: vec![0], modes: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    paths: Paths,
    train: TrainConfig,
    plans: Plans,
    eval: EvalOptions,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in
            [&mut p.real_dataset, &mut p.synth_dataset, &mut p.eval_standard, &mut p.eval_adverse, &mut p.out_dir]
        {
            if let Some(v) = slot.as_mut() {
                *v = resolve(base, v);
            }
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.eval.seeds = vec![s];
        }
        cfg.train.validate().map_err(train_failure)?;
        Ok(cfg)
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.paths.out_dir.clone())
            .ok_or_else(|| Failure::Config("no output directory: pass --out or set paths.out_dir".into()))
    }

    /// Loads a dataset, generating it first from its plan when the directory is absent.
    fn dataset(&self, name: &str, path: &Option<PathBuf>, plan: &Option<GenerationPlan>) -> Result<Vec<LabeledSample>> {
        let path = path.as_ref().ok_or_else(|| Failure::Dataset(format!("no {name} dataset configured")))?;
        if !path.exists() {
            if let Some(plan) = plan {
                generate_dataset(plan, path).map_err(synth_failure)?;
            }
        }
        let samples =
            load_dataset(path).map_err(|e| Failure::Dataset(format!("{name} dataset {}: {e}", path.display())))?;
        let [h, w] = self.train.model.input_resolution;
        if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width) != (h, w)) {
            return Err(Failure::Dataset(format!(
                "{name} sample {} is {}x{}, model expects {h}x{w}",
                s.id, s.image.height, s.image.width
            )));
        }
        Ok(samples)
    }
}

fn synth_failure(e: SceneError) -> Failure {
    match e {
        SceneError::Dataset(d) => Failure::Output(d.to_string()),
        other => Failure::Config(other.to_string()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Output(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Output(format!("{}: {e}", path.display())))
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut plan: GenerationPlan = read_json(config)?;
    if let Some(s) = seed {
        plan.master_seed = s;
    }
    let manifest = generate_dataset(&plan, out).map_err(synth_failure)?;
    let hist = attribute_histogram(manifest.samples.iter().map(|r| (r.weather, r.time)));
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    println!("{:<8} {:>6} {:>6}", "weather", "day", "night");
    for w in WeatherCondition::ALL {
        let row = hist[w.index()];
        println!("{:<8} {:>6} {:>6}", w.as_str(), row[TimeOfDay::Day.index()], row[TimeOfDay::Night.index()]);
    }
    Ok(())
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: bool, seed: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config, seed)?;
    let mode = cfg.train.mode;
    let real =
        if mode.uses_real() { cfg.dataset("real", &cfg.paths.real_dataset, &cfg.plans.real)? } else { Vec::new() };
    let synth =
        if mode.uses_synth() { cfg.dataset("synth", &cfg.paths.synth_dataset, &cfg.plans.synth)? } else { Vec::new() };
    let dir = RunDir::new(cfg.out_dir(out)?);
    let outcome = train(&cfg.train, &real, &synth, Some(&dir), resume).map_err(train_failure)?;
    if let Some(it) = outcome.resumed_from {
        println!("resumed from iteration {it}");
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "iter {} l_seg {:.6} l_was {:.6} l_tas {:.6} l_total {:.6}",
            last.iter + 1,
            last.l_seg,
            last.l_was,
            last.l_tas,
            last.l_total
        );
    }
    println!("final checkpoint: {}", dir.final_checkpoint().display());
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| match e {
        ModelError::Io { .. } => Failure::Config(e.to_string()),
        other => model_failure(other),
    })?;
    Model::from_checkpoint(&ckpt).map_err(model_failure)
}

fn load_eval_dataset(model: &Model, dir: &Path) -> Result<Vec<LabeledSample>> {
    let samples = load_dataset(dir).map_err(|e| Failure::Dataset(format!("{}: {e}", dir.display())))?;
    if samples.is_empty() {
        return Err(Failure::Dataset(format!("{}: no samples", dir.display())));
    }
    let [h, w] = model.config().input_resolution;
    if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width) != (h, w)) {
        return Err(Failure::Config(
            ModelError::CheckpointMismatch(format!(
                "checkpoint expects {h}x{w} inputs, sample {} is {}x{}",
                s.id, s.image.height, s.image.width
            ))
            .to_string(),
        ));
    }
    Ok(samples)
}

/// Report file plus per-class section. Markdown keeps both in one file; CSV
/// puts the per-class table next to it as `<stem>_per_class.csv`.
fn write_report(path: &Path, rows: &[ReportRow], classes: &[ClassRow], format: ReportFormat) -> Result<String> {
    let table = render_report(rows, format);
    let per_class = render_per_class(classes, format);
    match format {
        ReportFormat::Md => write_file(path, &format!("{table}\n### Per-class IoU\n\n{per_class}"))?,
        ReportFormat::Csv => {
            write_file(path, &table)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            write_file(&path.with_file_name(format!("{stem}_per_class.csv")), &per_class)?;
        }
    }
    Ok(table)
}

fn format_for(flag: Option<Format>, path: &Path) -> ReportFormat {
    match flag {
        Some(f) => f.into(),
        None if path.extension().is_some_and(|e| e == "csv") => ReportFormat::Csv,
        None => ReportFormat::Md,
    }
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, out: &Path, format: Option<Format>) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    let samples = load_eval_dataset(&model, dataset)?;
    let report = evaluate(&mut model, &samples).map_err(eval_failure)?;
    let name = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let classes: Vec<ClassRow> = ConditionGroup::ALL
        .iter()
        .filter(|g| report.groups.contains_key(g))
        .map(|&g| report.class_row(format!("{name} {g}"), g))
        .collect();
    let table = write_report(out, &[report.row(&name)], &classes, format_for(format, out))?;
    print!("{table}");
    Ok(())
}

fn cmd_ablation(config: &Path, out: Option<PathBuf>, seed: Option<u64>, format: Option<Format>) -> Result<()> {
    let cfg = ExperimentConfig::load(config, seed)?;
    let out = cfg.out_dir(out)?;
    let p = &cfg.paths;
    let data = DeskData {
        real: cfg.dataset("real", &p.real_dataset, &cfg.plans.real)?,
        synth: cfg.dataset("synth", &p.synth_dataset, &cfg.plans.synth)?,
        eval_standard: cfg.dataset("standard eval", &p.eval_standard, &cfg.plans.eval_standard)?,
        eval_adverse: cfg.dataset("adverse eval", &p.eval_adverse, &cfg.plans.eval_adverse)?,
    };
    let modes = cfg.eval.modes.clone().unwrap_or_else(|| AblationMode::ALL.to_vec());
    let format = format.map(ReportFormat::from).unwrap_or(cfg.eval.format);
    let mut runs: Vec<RunSummary> = Vec::new();
    for &mode in &modes {
        for &seed in &cfg.eval.seeds {
            let train_cfg = TrainConfig { mode, seed, ..cfg.train.clone() };
            let dir = out.join("runs").join(mode.as_str()).join(format!("seed_{seed}"));
            let run = run_one(&train_cfg, &data, Some(&dir), true).map_err(experiment_failure)?;
            eprintln!("{mode} seed {seed}: adverse {:.4} standard {:.4}", run.adverse_miou, run.standard_miou);
            runs.push(run);
        }
    }
    let ext = match format {
        ReportFormat::Md => "md",
        ReportFormat::Csv => "csv",
    };
    let rows: Vec<ReportRow> = median_rows(&runs).into_iter().map(|(_, r)| r).collect();
    let classes: Vec<ClassRow> = modes
        .iter()
        .filter_map(|&m| {
            let r = runs.iter().find(|r| r.mode == m)?;
            Some(r.adverse.class_row(format!("{m} (seed {})", r.seed), ConditionGroup::Overall))
        })
        .collect();
    let table = write_report(&out.join(format!("ablation.{ext}")), &rows, &classes, format)?;
    let per_run: Vec<ReportRow> = runs.iter().map(RunSummary::row).collect();
    write_file(&out.join(format!("ablation_runs.{ext}")), &render_report(&per_run, format))?;
    print!("{table}");
    Ok(())
}

fn cmd_overlay(checkpoint: &Path, dataset: &Path, out: &Path, ids: &[String]) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    let mut samples = load_eval_dataset(&model, dataset)?;
    if !ids.is_empty() {
        if let Some(missing) = ids.iter().find(|id| !samples.iter().any(|s| &s.id == *id)) {
            return Err(Failure::Dataset(DatasetError::MissingFile(missing.clone()).to_string()));
        }
        samples.retain(|s| ids.contains(&s.id));
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::Output(format!("{}: {e}", out.display())))?;
    let predictions = predict_all(&mut model, &samples).map_err(eval_failure)?;
    for (sample, pred) in samples.iter().zip(&predictions) {
        overlay(sample, pred, &out.join(format!("{}.png", sample.id))).map_err(eval_failure)?;
    }
    println!("wrote {} overlays to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.device == Device::Gpu {
        return Err(Failure::Config("no GPU backend is available in this build; use --device cpu".into()));
    }
    let g = &cli.global;
    match cli.command {
        Command::Synth { config, out } => cmd_synth(&config, &out, g.seed),
        Command::Train { config, out, resume } => cmd_train(&config, out, resume, g.seed),
        Command::Eval { checkpoint, dataset, out } => cmd_eval(&checkpoint, &dataset, &out, g.format),
        Command::Ablation { config, out } => cmd_ablation(&config, out, g.seed, g.format),
        Command::Overlay { checkpoint, dataset, out, ids } => cmd_overlay(&checkpoint, &dataset, &out, &ids),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("advseg: {f}");
            ExitCode::from(f.code())
        }
    }
}
