//! `kdistill`: generate data, train a teacher, distill a student, and inspect
//! the results.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure (non-finite loss or gradient).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kd_core::bench::bench_latency;
use kd_core::data::{generate_synthetic, load_dataset, read_pgm, replicate_channels, split_dataset, Dataset, SyntheticSpec};
use kd_core::gradcam::{export_heatmap, gradcam, peak, ExportMode};
use kd_core::metrics::{class_of_interest_items, evaluate, quadrant_analysis, DEFAULT_THRESHOLD};
use kd_core::nn::{load_model, save_model, Model, ModelPreset};
use kd_core::train::{distill, train_baseline, TrainConfig, TrainReport};
use kd_core::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "kdistill", version, about = "Knowledge distillation for multi-label images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shape dataset (PGM images plus manifest.csv).
    GenData(GenData),
    /// Train a teacher (or any preset) on focal BCE.
    TrainTeacher(TrainTeacher),
    /// Distill a student from a trained teacher.
    Distill(DistillArgs),
    /// Evaluate a model on the validation split.
    Eval(EvalArgs),
    /// Write a Grad-CAM heatmap for one image.
    Gradcam(GradcamArgs),
    /// Teacher/student correctness table on box-annotated validation samples.
    Quadrant(QuadrantArgs),
    /// Batch-1 inference latency and model size.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    num: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training hyperparameters; flags override `--config`, which overrides the
/// defaults.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// JSON file with TrainConfig fields (the loss block uses LossConfig names).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                serde_json::from_str::<TrainConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(v) = self.gamma {
            cfg.loss.gamma = v;
        }
        if let Some(v) = self.temp {
            cfg.loss.temperature = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainTeacher {
    #[arg(long)]
    data: PathBuf,
    /// Output model file; the training report goes to `<out>.report.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "tiny-t")]
    preset: ModelPreset,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// Student preset name or a model file to start from.
    #[arg(long, default_value = "tiny-s")]
    student: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct SplitFlags {
    /// Seed of the train/validation split (must match training).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SplitFlags {
    fn val_indices(&self, dataset: &Dataset) -> Result<Vec<usize>, Error> {
        let flags = TrainFlags {
            config: self.config.clone(),
            seed: Some(self.seed),
            ..TrainFlags::default()
        };
        let cfg = flags.resolve()?;
        Ok(split_dataset(dataset, cfg.split_fraction, cfg.seed)?.val)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// JSON report path (stdout when absent); a `.csv` extension writes the
    /// per-label rows instead.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    split: SplitFlags,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grayscale PGM input.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    /// `.ppm` writes a jet overlay, anything else a grayscale PGM.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QuadrantArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    split: SplitFlags,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model file or preset name (`tiny-t`, `tiny-s`).
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Class count when `--model` is a preset.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_error(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn report_path(model_out: &Path) -> PathBuf {
    let mut s = model_out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn write_training(model: &Model, report: &TrainReport, out: &Path) -> Result<(), Error> {
    save_model(model, out)?;
    let rp = report_path(out);
    fs::write(&rp, report.to_json()?).map_err(|e| io_error(&rp, e))?;
    if let Some(last) = report.epochs.last() {
        println!(
            "saved {} (final val mean AUC {})",
            out.display(),
            last.val_mean_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(())
}

fn image_size(dataset: &Dataset) -> Result<usize, Error> {
    dataset.image_size().ok_or_else(|| Error::Data("dataset is empty".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(a) => {
            let spec = SyntheticSpec {
                num_samples: a.num,
                num_classes: a.classes,
                image_size: a.size,
                ..SyntheticSpec::default()
            };
            let ds = generate_synthetic(&spec, a.seed, &a.out)?;
            println!("wrote {} samples to {}", ds.len(), a.out.display());
        }
        Command::TrainTeacher(a) => {
            let cfg = a.train.resolve()?;
            let ds = load_dataset(&a.data)?;
            let model = Model::build(a.preset, ds.num_classes(), image_size(&ds)?, cfg.seed)?;
            let out = train_baseline(model, &ds, &cfg)?;
            write_training(&out.model, &out.report, &a.out)?;
        }
        Command::Distill(a) => {
            let cfg = a.train.resolve()?;
            let ds = load_dataset(&a.data)?;
            let teacher = load_model(&a.teacher)?;
            let student = match a.student.parse::<ModelPreset>() {
                Ok(preset) => Model::build(preset, ds.num_classes(), image_size(&ds)?, cfg.seed)?,
                Err(_) => load_model(&a.student)?,
            };
            let out = distill(&teacher, student, &ds, &cfg)?;
            write_training(&out.model, &out.report, &a.out)?;
        }
        Command::Eval(a) => {
            let ds = load_dataset(&a.data)?;
            let model = load_model(&a.model)?;
            let val = a.split.val_indices(&ds)?;
            let report = evaluate(&model, &ds, &val, a.threshold)?;
            let csv = a.out.as_deref().is_some_and(|p| p.extension().is_some_and(|e| e == "csv"));
            let text = if csv { report.to_csv()? } else { report.to_json()? };
            write_or_print(a.out.as_deref(), &text)?;
        }
        Command::Gradcam(a) => {
            let model = load_model(&a.model)?;
            let image = read_pgm(&a.image)?;
            let cam = gradcam(&model, &replicate_channels(&image), a.class)?;
            let overlay = a.out.extension().is_some_and(|e| e == "ppm");
            let mode = if overlay { ExportMode::JetOverlay(&image) } else { ExportMode::Gray };
            export_heatmap(&cam.heatmap, &a.out, mode)?;
            let (x, y) = peak(&cam.heatmap);
            println!(
                "{}",
                serde_json::json!({
                    "class": a.class,
                    "logit": cam.score,
                    "peak": [x, y],
                    "weights": cam.weights,
                    "out": a.out,
                })
            );
        }
        Command::Quadrant(a) => {
            let ds = load_dataset(&a.data)?;
            let teacher = load_model(&a.teacher)?;
            let student = load_model(&a.student)?;
            let val = a.split.val_indices(&ds)?;
            let items = class_of_interest_items(&ds, &ds.annotated(&val))?;
            let table = quadrant_analysis(&teacher, &student, &ds, &items, a.threshold)?;
            println!("{table}");
            if let Some(out) = &a.out {
                fs::write(out, table.to_json()?).map_err(|e| io_error(out, e))?;
            }
        }
        Command::Bench(a) => {
            let (model, name) = match a.model.parse::<ModelPreset>() {
                Ok(p) => (Model::build(p, a.classes, a.size, 0)?, p.name().to_string()),
                Err(_) => (load_model(&a.model)?, a.model.clone()),
            };
            let report = bench_latency(&model, &name, a.size, a.runs, a.warmup)?;
            write_or_print(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
