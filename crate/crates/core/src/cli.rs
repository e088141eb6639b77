//! Command-line entry point: dataset generation, training, evaluation,
//! ablations, sweeps, parameter counts and gradient checks.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! Reports go to standard output, diagnostics to standard error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{
    load_checkpoint, load_dataset, load_split, manifest_path, save_checkpoint, save_dataset, save_manifest, save_split,
    Dataset, DatasetManifest, DATASET_VERSION,
};
use crate::model::{count_params, sweep_grid, GridEntry, GridKind, Model, ModelConfig, Variant};
use crate::nn::HeadConvention;
use crate::radar::{generate_dataset, write_preview, RadarConfig, CLASS_NAMES};
use crate::train::{
    cross_validate, derive_seed, evaluate, make_split, repeat_runs, train_with, AdamWConfig, RunStats,
    SplitPlan, TrainConfig,
};
use crate::verify::{check_end_to_end, check_primitive, CheckResult, PRIMITIVES};

/// Environment variable naming the directory that holds `dataset.bin` when
/// `--data`/`--out` are not given.
pub const DATA_DIR_ENV: &str = "GESTURE_VIT_DATA_DIR";
/// File name used inside the data directory.
pub const DEFAULT_DATASET_NAME: &str = "dataset.bin";

// Streams of the master `--seed`.
const SPLIT_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

#[derive(Debug, Parser)]
#[command(name = "gesture-vit", version, about = "Radar gesture recognition with a convolutional encoder-decoder and a vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a labelled dataset and write it with its JSON manifest.
    GenData(GenDataArgs),
    /// Train one model on the training part of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and test the five module combinations.
    Ablate(ExperimentArgs),
    /// Train and test a patch-size/width or depth grid.
    Sweep(SweepArgs),
    /// Print total and trainable parameter counts.
    CountParams(CountArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output container; defaults to `$GESTURE_VIT_DATA_DIR/dataset.bin`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nominal SNR; each sample varies around it.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Also write one PGM per class into this directory.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset container; defaults to `$GESTURE_VIT_DATA_DIR/dataset.bin`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainingFlags {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Global gradient-norm clip (off unless given).
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl TrainingFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
                ..AdamWConfig::default()
            },
            seed,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// `key = value` model config; the full model when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Per-epoch CSV; defaults to `<checkpoint>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restrict to the test indices of this split file.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Standard-output format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent training runs per config.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Configs trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report mean five-fold validation accuracy instead of held-out test accuracy.
    #[arg(long)]
    cv: bool,
    /// Head convention of every config.
    #[arg(long, value_parser = ["split_dk", "whole_dk"], default_value = "split_dk")]
    head_convention: String,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_parser = ["patch_dim", "depth"])]
    grid: String,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Debug, Args)]
struct CountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// `all`, `primitives`, `end_to_end`, or one primitive name.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match execute(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command, out: &mut dyn std::io::Write) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Ablate(a) => experiment(GridKind::Ablation, &a, out),
        Command::Sweep(a) => experiment(GridKind::parse(&a.grid)?, &a.experiment, out),
        Command::CountParams(a) => count_cmd(&a, out),
        Command::GradCheck(a) => grad_check_cmd(&a, out),
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn data_path(given: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(DEFAULT_DATASET_NAME)),
        None => Err(Error::InvalidArgument(format!(
            "no dataset path: pass --data or set {DATA_DIR_ENV}"
        ))),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    p.into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crate::io::atomic_write(path, |f| f.write_all(text.as_bytes()))
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(ModelConfig::default()),
    }
}

/// The stratified split every command derives from `seed`.
pub fn seeded_split(data: &Dataset<f32>, seed: u64) -> Result<SplitPlan> {
    make_split(data.labels(), &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM)))
}

fn gen_data(a: &GenDataArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let path = data_path(&a.out)?;
    let mut cfg = RadarConfig::default();
    if let Some(snr) = a.snr_db {
        cfg.noise_snr_db = snr;
    }
    let data = generate_dataset(a.samples_per_class, &cfg, a.seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(&path, &data)?;
    let [height, width, channels] = data.shape();
    save_manifest(
        &manifest_path(&path),
        &DatasetManifest {
            format_version: DATASET_VERSION,
            samples: data.len(),
            samples_per_class: a.samples_per_class,
            height,
            width,
            channels,
            seed: a.seed,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            generator: serde_json::to_value(cfg)?,
        },
    )?;
    let mut msg = format!("wrote {} samples to {}\n", data.len(), path.display());
    if let Some(dir) = &a.preview {
        let files = write_preview(dir, &data)?;
        let _ = writeln!(msg, "wrote {} previews to {}", files.len(), dir.display());
    }
    emit(out, &msg)?;
    Ok(0)
}

fn train_cmd(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let data = load_dataset(&data_path(&a.data.data)?)?;
    let mut config = load_config(&a.config)?;
    config.input = data.shape();
    config.seed = derive_seed(a.seed, MODEL_STREAM);
    let plan = seeded_split(&data, a.seed)?;
    let (fit, test) = (data.subset(&plan.train)?, data.subset(&plan.test)?);
    let cfg = a.training.config(derive_seed(a.seed, TRAIN_STREAM));
    let mut model = Model::<f32>::build(&config)?;
    let history = train_with(&mut model, &fit, Some(&test), &cfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}",
            r.epoch,
            r.loss,
            r.train_acc,
            r.val_acc.unwrap_or(f64::NAN)
        );
    })?;
    if let Some(dir) = a.out_checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&a.out_checkpoint, &model)?;
    let history_path = a.history.clone().unwrap_or_else(|| with_suffix(&a.out_checkpoint, ".history.csv"));
    write_text(&history_path, &history.to_csv())?;
    let split_path = with_suffix(&a.out_checkpoint, ".split");
    save_split(&split_path, &plan)?;
    let report = evaluate(&model, &test)?;
    emit(
        out,
        &format!(
            "checkpoint {}\nhistory {}\nsplit {}\ntest_accuracy {:.6}\ntest_macro_f1 {:.6}\n",
            a.out_checkpoint.display(),
            history_path.display(),
            split_path.display(),
            report.accuracy,
            report.macro_f1
        ),
    )?;
    Ok(0)
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut data = load_dataset(&data_path(&a.data.data)?)?;
    if let Some(split) = &a.split {
        let plan = load_split(split, data.len())?;
        data = data.subset(&plan.test)?;
    }
    let model: Model<f32> = load_checkpoint(&a.checkpoint)?;
    let report = evaluate(&model, &data)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(p) = &a.json {
        write_text(p, &json)?;
    }
    match a.format {
        Format::Text => emit(out, &report.to_text())?,
        Format::Json => emit(out, &json)?,
    }
    Ok(0)
}

/// One row of an ablation or sweep report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub label: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub accuracy: RunStats,
    /// `None` under cross-validation, which reports accuracy only.
    pub macro_f1: Option<RunStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub grid: String,
    pub seed: u64,
    pub runs: usize,
    /// `test` or `cv`.
    pub metric: String,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    /// Tab-separated table: config, counts, accuracy mean±std (percent), F1.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# grid={} seed={} runs={} metric={}\nconfig\ttotal_params\ttrainable_params\taccuracy_pct\tmacro_f1\n",
            self.grid, self.seed, self.runs, self.metric
        );
        for r in &self.rows {
            let f1 = r
                .macro_f1
                .as_ref()
                .map_or_else(|| "-".to_string(), |f| format!("{:.4}±{:.4}", f.mean, f.std));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.2}±{:.2}\t{}",
                r.label,
                r.total_params,
                r.trainable_params,
                100.0 * r.accuracy.mean,
                100.0 * r.accuracy.std,
                f1
            );
        }
        s
    }
}

fn run_entry(entry: &GridEntry, data: &Dataset<f32>, plan: &SplitPlan, cfg: &TrainConfig, runs: usize, cv: bool) -> Result<ExperimentRow> {
    let (total_params, trainable_params) = count_params(&entry.config)?;
    let (accuracy, macro_f1) = if cv {
        (cross_validate(&entry.config, data, plan, cfg)?, None)
    } else {
        let r = repeat_runs(&entry.config, &data.subset(&plan.train)?, &data.subset(&plan.test)?, runs, cfg)?;
        (r.accuracy, Some(r.macro_f1))
    };
    Ok(ExperimentRow {
        label: entry.label.clone(),
        total_params,
        trainable_params,
        accuracy,
        macro_f1,
    })
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item processed"))
        .collect()
}

fn experiment(kind: GridKind, a: &ExperimentArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let data = load_dataset(&data_path(&a.data.data)?)?;
    let mut base = ModelConfig::default();
    base.input = data.shape();
    base.seed = derive_seed(a.seed, MODEL_STREAM);
    base.attention.head_convention = HeadConvention::parse(&a.head_convention)?;
    let grid = sweep_grid(kind, &base);
    let plan = seeded_split(&data, a.seed)?;
    let cfg = a.training.config(derive_seed(a.seed, TRAIN_STREAM));
    let rows = parallel_map(&grid, a.jobs, |entry| {
        let row = run_entry(entry, &data, &plan, &cfg, a.runs, a.cv);
        if let Ok(r) = &row {
            eprintln!("{}: accuracy {:.4} ± {:.4}", r.label, r.accuracy.mean, r.accuracy.std);
        }
        row
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport {
        grid: kind.as_str().to_string(),
        seed: a.seed,
        runs: if a.cv { plan.folds.len() } else { a.runs },
        metric: if a.cv { "cv" } else { "test" }.to_string(),
        rows,
    };
    if let Some(p) = &a.json {
        write_text(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    emit(out, &report.to_text())?;
    Ok(0)
}

fn count_cmd(a: &CountArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let config = load_config(&a.config)?;
    let mut s = String::from("head_convention\ttotal\ttrainable\n");
    for conv in [HeadConvention::SplitDk, HeadConvention::WholeDk] {
        let mut c = config.clone();
        c.attention.head_convention = conv;
        let (total, trainable) = count_params(&c)?;
        let _ = writeln!(s, "{}\t{total}\t{trainable}", conv.as_str());
    }
    emit(out, &s)?;
    Ok(0)
}

fn grad_check_cmd(a: &GradCheckArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let mut results: Vec<CheckResult> = Vec::new();
    let primitives = matches!(a.module.as_str(), "all" | "primitives");
    if primitives {
        for p in PRIMITIVES {
            results.push(check_primitive(p, a.seeds)?);
        }
    } else if PRIMITIVES.contains(&a.module.as_str()) {
        results.push(check_primitive(&a.module, a.seeds)?);
    } else if a.module != "end_to_end" {
        return Err(Error::InvalidArgument(format!("unknown --module `{}`", a.module)));
    }
    if matches!(a.module.as_str(), "all" | "end_to_end") {
        results.push(check_end_to_end(Variant::Full, a.seeds)?);
    }
    let mut s = String::from("check\tseeds\tmax_rel_error\ttolerance\tresult\n");
    for r in &results {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(s, "{}\t{}\t{:.3e}\t{:.0e}\t{verdict}", r.name, r.seeds, r.max_rel_error, r.tolerance);
    }
    emit(out, &s)?;
    Ok(if results.iter().all(CheckResult::passed) { 0 } else { 1 })
}
