//! Command-line front end: `train`, `evaluate`, `predict` and `bench`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::bench_gemm_sweep;
use crate::data::{
    decode_image, list_images, load_dataset, prepare_splits, ProtocolConfig, ResizeMode, CLASS_NAMES,
    DEFAULT_BALANCE_TARGET, DEFAULT_FOLDS, DEFAULT_HOLDOUT,
};
use crate::error::{Error, Result};
use crate::gemm::{detected_cores, TileConfig, DEFAULT_TILE, THREADS_ENV};
use crate::model::{evaluate, predict, train, TrainOptions, TrainReport, Variant};
use crate::modelfile::{load_model, save_model, write_atomic};
use crate::optim::SgdConfig;

pub const MODEL_FILE: &str = "model.cnf";
pub const REPORT_FILE: &str = "report.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Parser)]
#[command(name = "cnf", version, about = "Train and run fish-species CNNs on a tiled GEMM core")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validated training; writes model, report and split files.
    Train(TrainArgs),
    /// Scores a saved model on a directory-per-class image tree.
    Evaluate(EvaluateArgs),
    /// Writes a submission CSV of class probabilities.
    Predict(PredictArgs),
    /// Times naive, tiled and parallel GEMM; CSV on stdout.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Model1,
    Model2,
    Model3,
    Lenet5,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Model1 => Variant::Model1,
            VariantArg::Model2 => Variant::Model2,
            VariantArg::Model3 => Variant::Model3,
            VariantArg::Lenet5 => Variant::Lenet5,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ResizeArg {
    Squash,
    CenterCrop,
}

impl From<ResizeArg> for ResizeMode {
    fn from(r: ResizeArg) -> Self {
        match r {
            ResizeArg::Squash => ResizeMode::Squash,
            ResizeArg::CenterCrop => ResizeMode::CenterCrop,
        }
    }
}

#[derive(Debug, Args)]
pub struct GemmArgs {
    #[arg(long, default_value_t = DEFAULT_TILE)]
    pub tile: usize,
    /// Worker threads; falls back to CNF_THREADS, then the core count.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl GemmArgs {
    fn config(&self) -> Result<TileConfig> {
        TileConfig::new(self.tile, resolve_threads(self.threads)?)
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        Err(_) => Ok(detected_cores()),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "model1")]
    pub variant: VariantArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epochs per fold.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    /// Stop after this many folds.
    #[arg(long)]
    pub max_folds: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Per-class holdout counts in class order.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_BALANCE_TARGET)]
    pub balance_target: usize,
    #[arg(long, value_enum, default_value = "squash")]
    pub resize: ResizeArg,
    #[arg(long)]
    pub fresh_per_fold: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub gemm: GemmArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "squash")]
    pub resize: ResizeArg,
    /// Print the metrics as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub gemm: GemmArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image files or directories of images.
    #[arg(long, required = true, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "squash")]
    pub resize: ResizeArg,
    #[command(flatten)]
    pub gemm: GemmArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = DEFAULT_TILE)]
    pub tile: usize,
    /// One or more worker counts for the parallel kernel.
    #[arg(long, value_delimiter = ',')]
    pub threads: Option<Vec<usize>>,
}

/// Outcome of a failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::Io { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Train(args) => cmd_train(&args, stdout),
        Command::Evaluate(args) => cmd_evaluate(&args, stdout),
        Command::Predict(args) => cmd_predict(&args, stdout),
        Command::Bench(args) => cmd_bench(&args, stdout),
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn write_out(stdout: &mut dyn Write, text: &str) -> std::result::Result<(), Failure> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| io_fail(Path::new("<stdout>"), e))
}

pub fn sgd_from_args(args: &TrainArgs) -> Result<SgdConfig> {
    let base = SgdConfig::default();
    let cfg = SgdConfig {
        lr: args.lr.unwrap_or(base.lr),
        momentum: args.momentum.unwrap_or(base.momentum),
        weight_decay: args.weight_decay.unwrap_or(base.weight_decay),
        batch_size: args.batch.unwrap_or(base.batch_size),
        epochs_per_fold: args.epochs.unwrap_or(base.epochs_per_fold),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    if !args.data.is_dir() {
        return Err(Failure::usage(format!("data directory {} does not exist", args.data.display())));
    }
    let variant = Variant::from(args.variant);
    let mut config = variant.config();
    if config.classes() != Some(CLASS_NAMES.len()) {
        return Err(Failure::usage(format!(
            "{variant} is a shape-only reference and cannot be trained on the {}-class data",
            CLASS_NAMES.len()
        )));
    }
    if let Some(p) = args.dropout {
        if !(0.0..1.0).contains(&p) {
            return Err(Failure::usage(format!("--dropout must be in [0, 1), got {p}")));
        }
        config = config.with_dropout(p);
    }
    let opts = TrainOptions {
        sgd: sgd_from_args(args)?,
        fresh_per_fold: args.fresh_per_fold,
        max_folds: args.max_folds,
        gemm: args.gemm.config()?,
    };
    let protocol = ProtocolConfig {
        holdout_per_class: args.holdout.clone().unwrap_or_else(|| DEFAULT_HOLDOUT.to_vec()),
        balance_target: args.balance_target,
        folds: args.folds,
    };

    let dataset = load_dataset(&args.data, args.resize.into())?;
    log::info!("loaded {} images: {:?}", dataset.images.len(), dataset.classes.counts);
    let prepared = prepare_splits(&dataset, &protocol, args.seed)?;
    let (model, report) = train(
        &config,
        &prepared.balanced,
        &prepared.plan,
        &prepared.holdout,
        &opts,
        args.seed,
    )?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_fail(&args.out, e))?;
    write_atomic(&args.out.join(SPLIT_FILE), &serde_json::to_vec_pretty(&prepared.plan).map_err(Error::from)?)?;
    write_atomic(&args.out.join(REPORT_FILE), &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
    save_model(&model, &args.out.join(MODEL_FILE))?;
    write_out(stdout, &render_report(&report))
}

/// Summary row in the train/validation log-loss layout plus the holdout
/// confusion matrix.
pub fn render_report(report: &TrainReport) -> String {
    let mut s = format!(
        "{:<8} {:>14} {:>17}\n{:<8} {:>14.4} {:>17.4}\n",
        "model",
        "train logloss",
        "valid. logloss",
        report.model,
        report.summary.train_logloss_last,
        report.holdout.as_ref().map_or(report.summary.validation_logloss_mean, |h| h.logloss),
    );
    if let Some(h) = &report.holdout {
        let names: Vec<&str> = report.class_names.iter().map(String::as_str).collect();
        s.push_str(&format!("\nholdout accuracy {:.4} over {} images\n", h.accuracy, h.samples));
        s.push_str(&h.confusion.table(&names));
    }
    s
}

pub fn cmd_evaluate(args: &EvaluateArgs, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    let mut model = load_model(&args.model)?;
    model.network = model.network.clone().with_gemm(args.gemm.config()?);
    if !args.data.is_dir() {
        return Err(Failure::usage(format!("data directory {} does not exist", args.data.display())));
    }
    let dataset = load_dataset(&args.data, args.resize.into())?;
    let metrics = evaluate(&model, &dataset.images)?;
    let text = if args.json {
        serde_json::to_string_pretty(&metrics).map_err(Error::from)? + "\n"
    } else {
        let names: Vec<&str> = model.class_names.iter().map(String::as_str).collect();
        format!(
            "logloss {:.6}\naccuracy {:.4}\nsamples {}\n{}",
            metrics.logloss,
            metrics.accuracy,
            metrics.samples,
            metrics.confusion.table(&names)
        )
    };
    write_out(stdout, &text)
}

/// Rounds a probability row to 6 decimals and pushes the rounding residue
/// onto the largest entry so the printed values sum to exactly 1.
pub fn round_row(probs: &[f64]) -> Vec<i64> {
    const SCALE: f64 = 1e6;
    let mut micros: Vec<i64> = probs.iter().map(|p| (p * SCALE).round() as i64).collect();
    let residue = 1_000_000 - micros.iter().sum::<i64>();
    if let Some(top) = (0..micros.len()).max_by_key(|&i| (micros[i], std::cmp::Reverse(i))) {
        micros[top] += residue;
    }
    micros
}

fn format_micros(v: i64) -> String {
    format!("{}.{:06}", v / 1_000_000, v % 1_000_000)
}

pub fn submission_header(class_names: &[String]) -> String {
    let mut h = String::from("image");
    for name in class_names {
        h.push(',');
        h.push_str(name);
    }
    h
}

pub fn cmd_predict(args: &PredictArgs, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    let mut model = load_model(&args.model)?;
    model.network = model.network.clone().with_gemm(args.gemm.config()?);
    let side = model.network.input_shape();
    if side != [3, crate::data::INPUT_SIDE, crate::data::INPUT_SIDE] {
        return Err(Failure::usage(format!("model input {side:?} is not a 48×48 RGB network")));
    }
    let mut files = Vec::new();
    for p in &args.images {
        if p.is_dir() {
            files.extend(list_images(p)?);
        } else {
            files.push(p.clone());
        }
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for f in &files {
        match decode_image(f, args.resize.into()) {
            Ok(t) => {
                names.push(f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
                tensors.push(t);
            }
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if tensors.is_empty() {
        return Err(Failure {
            code: 1,
            message: "no input image could be decoded".into(),
        });
    }
    let rows = predict(&model, &tensors)?;
    let mut csv = submission_header(&model.class_names);
    csv.push('\n');
    for (name, row) in names.iter().zip(&rows) {
        csv.push_str(name);
        for v in round_row(row) {
            csv.push(',');
            csv.push_str(&format_micros(v));
        }
        csv.push('\n');
    }
    match &args.out {
        Some(path) => write_atomic(path, csv.as_bytes()).map_err(Failure::from),
        None => write_out(stdout, &csv),
    }
}

pub fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    let threads = match &args.threads {
        Some(t) => t.clone(),
        None => vec![resolve_threads(None)?],
    };
    let report = bench_gemm_sweep(&args.sizes, args.reps, args.tile, &threads)?;
    write_out(stdout, &report.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_renormalises_to_one() {
        let row = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let micros = round_row(&row);
        assert_eq!(micros.iter().sum::<i64>(), 1_000_000);
        assert_eq!(micros, vec![333_334, 333_333, 333_333]);
        let row = [0.1234564, 0.8765436];
        assert_eq!(round_row(&row).iter().sum::<i64>(), 1_000_000);
    }

    #[test]
    fn micros_print_with_six_decimals() {
        assert_eq!(format_micros(1_000_000), "1.000000");
        assert_eq!(format_micros(42), "0.000042");
    }

    #[test]
    fn header_follows_class_order() {
        let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        assert_eq!(submission_header(&names), "image,ALB,BET,DOL,LAG,NoF,Outros,Shark,YFT");
    }

    #[test]
    fn flag_overrides_take_precedence() {
        let cli = Cli::parse_from(["cnf", "train", "--data", "x", "--epochs", "2", "--folds", "2", "--lr", "0.5"]);
        let Command::Train(args) = cli.command else { panic!() };
        let sgd = sgd_from_args(&args).unwrap();
        assert_eq!(sgd.epochs_per_fold, 2);
        assert_eq!(sgd.lr, 0.5);
        assert_eq!(sgd.momentum, 0.8);
        assert_eq!(args.folds, 2);
    }
}
