//! Command-line front end. Every subcommand that takes `--out` writes its
//! artifacts there together with a `run.json` recording inputs, their
//! hashes, the config hash, the seed and a timestamp.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::aggregator::{grad_check, GradCheckDims};
use crate::config::{compute_fingerprint, derive_config, ConfigOverrides, DataFingerprint, RunConfig, TrainingMode, DEFAULT_SEED};
use crate::data::{
    generate_synthetic_dataset, load_manifest, write_synthetic_dataset, DatasetManifest, Split, SyntheticSpec, Task,
};
use crate::error::{Error, Result};
use crate::inference::{
    aggregate_patients, predict_classification, predict_regression, predict_survival, SlidePrediction, SlideRecord,
};
use crate::metrics::{evaluate, rejection_csv, rejection_from_predictions, EvalOptions, EvaluationReport, KappaWeighting};
use crate::trainer::{load_checkpoint, train_to_dir};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "nnmil", version, about = "Multiple-instance learning on patch-embedding bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal synthetic corpus.
    Synth(SynthArgs),
    /// Summarize the training split of a dataset.
    Fingerprint(FingerprintArgs),
    /// Derive a run configuration from a fingerprint.
    Plan(PlanArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Predict with uncertainty for one split.
    Predict(PredictArgs),
    /// Score predictions against the manifest labels.
    Evaluate(EvaluateArgs),
    /// Metric after rejecting the most uncertain predictions.
    RejectCurve(RejectArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory embedding paths resolve against; holds `manifest.json` when
    /// `--manifest` is absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "classification", value_parser = parse_task)]
    task: Task,
    #[arg(long, default_value_t = 500)]
    n_bags: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 80)]
    min_patches: usize,
    #[arg(long, default_value_t = 200)]
    max_patches: usize,
    #[arg(long, default_value_t = 0.05)]
    signal_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    signal_strength: f64,
    /// Classification only.
    #[arg(long, default_value_t = 0.5)]
    positive_rate: f64,
    /// Survival only.
    #[arg(long, default_value_t = 0.3)]
    censoring_rate: f64,
    /// Norm of the coefficient vector (regression and survival).
    #[arg(long, default_value_t = 1.0)]
    coefficient_norm: f64,
    /// Full spec as JSON; overrides every other generator flag.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FingerprintArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    fingerprint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainingMode>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run configuration; derived from the data when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainingMode>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = Split::parse)]
    split: Split,
    /// Survival evaluation time: `median` (of training event times) or a number.
    #[arg(long, default_value = "median")]
    eval_time: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `predictions.jsonl` from `predict`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "none")]
    kappa_weighting: KappaWeighting,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RejectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    predictions: PathBuf,
    /// Comma-separated rejection fractions in [0, 1).
    #[arg(long, default_value = "0,0.05,0.1,0.15,0.2,0.25,0.3")]
    fractions: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// `DxH`, e.g. `8x4`.
    #[arg(long, default_value = "8x4")]
    dims: String,
    #[arg(long, default_value = "classification", value_parser = parse_task)]
    task: Task,
    /// Output classes (classification only).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown task '{s}'"))
}

fn parse_mode(s: &str) -> std::result::Result<TrainingMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown mode '{s}' (nnmil, full_bag_batch1)"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Provenance for one command invocation.
struct RunRecord {
    command: &'static str,
    argv: Vec<String>,
    inputs: Vec<(PathBuf, String)>,
    config_sha256: Option<String>,
    seed: Option<u64>,
}

impl RunRecord {
    fn new(command: &'static str, argv: &[String]) -> Self {
        RunRecord {
            command,
            argv: argv.to_vec(),
            inputs: Vec::new(),
            config_sha256: None,
            seed: None,
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_hex(&read_bytes(path)?);
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    fn config(&mut self, config: &RunConfig) -> Result<()> {
        self.config_sha256 = Some(sha256_hex(config.to_json_string()?.as_bytes()));
        self.seed = Some(config.seed);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let inputs: Vec<_> = self
            .inputs
            .iter()
            .map(|(p, h)| json!({"path": p.display().to_string(), "sha256": h}))
            .collect();
        let record = json!({
            "command": self.command,
            "argv": self.argv,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": inputs,
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "timestamp_unix": timestamp,
        });
        write_text(&dir.join("run.json"), &serde_json::to_string_pretty(&record)?)
    }
}

fn open_manifest(data: &DataArgs, run: &mut RunRecord) -> Result<DatasetManifest> {
    let path = match (&data.manifest, &data.data_dir) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => d.join("manifest.json"),
        (None, None) => return Err(Error::Validation("either --manifest or --data-dir is required".into())),
    };
    run.input(&path)?;
    let mut manifest = load_manifest(&path)?;
    if let Some(dir) = &data.data_dir {
        manifest.base_dir = dir.clone();
    }
    Ok(manifest)
}

fn synth(args: SynthArgs, run: &mut RunRecord) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            run.input(path)?;
            serde_json::from_slice(&read_bytes(path)?)?
        }
        None => {
            let coefficients = (args.task != Task::Classification).then(|| {
                let norm = args.coefficient_norm / (args.embed_dim as f64).sqrt();
                (0..args.embed_dim).map(|j| if j % 2 == 0 { norm } else { -norm }).collect()
            });
            SyntheticSpec {
                n_bags: args.n_bags,
                patches_per_bag_range: (args.min_patches, args.max_patches),
                embed_dim: args.embed_dim,
                task: args.task,
                signal_fraction: args.signal_fraction,
                signal_strength: args.signal_strength,
                positive_rate: (args.task == Task::Classification).then_some(args.positive_rate),
                coefficients,
                censoring_rate: (args.task == Task::Survival).then_some(args.censoring_rate),
                train_fraction: 0.6,
                val_fraction: 0.2,
                seed: args.seed,
            }
        }
    };
    run.seed = Some(spec.seed);
    let data = generate_synthetic_dataset(&spec)?;
    write_synthetic_dataset(&data, &args.out)?;
    write_text(&args.out.join("spec.json"), &serde_json::to_string_pretty(&spec)?)?;
    run.write(&args.out)?;
    println!("wrote {} bags to {}", data.bags.len(), args.out.display());
    Ok(())
}

fn fingerprint(args: FingerprintArgs, run: &mut RunRecord) -> Result<()> {
    let manifest = open_manifest(&args.data, run)?;
    let fp = compute_fingerprint(&manifest, &manifest.load_all()?)?;
    let text = serde_json::to_string_pretty(&fp)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_text(&out.join("fingerprint.json"), &text)?;
        run.write(out)?;
    }
    println!("{text}");
    Ok(())
}

fn overrides(mode: Option<TrainingMode>, max_epochs: Option<usize>, seed: Option<u64>) -> ConfigOverrides {
    ConfigOverrides {
        training_mode: mode,
        max_epochs,
        seed,
        ..Default::default()
    }
}

fn plan(args: PlanArgs, run: &mut RunRecord) -> Result<()> {
    let fp: DataFingerprint = match &args.fingerprint {
        Some(path) => {
            run.input(path)?;
            serde_json::from_slice(&read_bytes(path)?)?
        }
        None => {
            let manifest = open_manifest(&args.data, run)?;
            compute_fingerprint(&manifest, &manifest.load_all()?)?
        }
    };
    let config = derive_config(&fp, fp.task, &overrides(args.mode, args.max_epochs, args.seed))?;
    run.config(&config)?;
    let text = config.to_json_string()?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_text(&out.join("config.json"), &text)?;
        run.write(out)?;
    }
    println!("{text}");
    Ok(())
}

fn train(args: TrainArgs, run: &mut RunRecord) -> Result<()> {
    let manifest = open_manifest(&args.data, run)?;
    let bags = manifest.load_all()?;
    let config = match &args.config {
        Some(path) => {
            run.input(path)?;
            let mut cfg = RunConfig::from_json_str(&String::from_utf8_lossy(&read_bytes(path)?))?;
            if let Some(mode) = args.mode {
                cfg.training_mode = mode;
                cfg.overrides.insert("training_mode".into(), json!(mode));
            }
            if let Some(epochs) = args.max_epochs {
                cfg.max_epochs = epochs;
                cfg.overrides.insert("max_epochs".into(), json!(epochs));
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
                cfg.overrides.insert("seed".into(), json!(seed));
            }
            cfg
        }
        None => {
            let fp = compute_fingerprint(&manifest, &bags)?;
            derive_config(&fp, manifest.task, &overrides(args.mode, args.max_epochs, args.seed))?
        }
    };
    run.config(&config)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.json"), &config.to_json_string()?)?;
    let (_, report) = train_to_dir(&config, &manifest, &bags, &args.out)?;
    run.write(&args.out)?;
    let last = report.epochs.last();
    println!(
        "trained {} epochs (best {:?}); final val loss {:?}",
        report.epochs.len(),
        report.best_epoch,
        last.and_then(|e| e.val_loss)
    );
    Ok(())
}

fn predict(args: PredictArgs, run: &mut RunRecord) -> Result<()> {
    let manifest = open_manifest(&args.data, run)?;
    run.input(&args.checkpoint)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    run.config(&ck.config)?;
    if ck.config.task != manifest.task {
        return Err(Error::Validation(format!(
            "checkpoint task {} but manifest task {}",
            ck.config.task, manifest.task
        )));
    }
    let windows = ck.windows()?;
    let eval_times = match (manifest.task, &ck.baseline) {
        (Task::Survival, Some(b)) => vec![match args.eval_time.as_str() {
            "median" => b.median_event_time,
            other => {
                let t: f64 = other
                    .parse()
                    .map_err(|_| Error::Validation(format!("--eval-time must be 'median' or a number, got '{other}'")))?;
                if !(t.is_finite() && t >= 0.0) {
                    return Err(Error::Validation(format!("--eval-time must be non-negative, got {t}")));
                }
                t
            }
        }],
        (Task::Survival, None) => return Err(Error::Corruption("survival checkpoint lacks a baseline".into())),
        _ => vec![],
    };
    let mut records = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == args.split) {
        let bag = manifest.load_bag(entry)?;
        let prediction = match manifest.task {
            Task::Classification => SlidePrediction::Classification(predict_classification(&ck.params, &bag, &windows)?),
            Task::Regression => SlidePrediction::Regression(predict_regression(&ck.params, &bag, &windows)?),
            Task::Survival => SlidePrediction::Survival(predict_survival(
                &ck.params,
                &bag,
                &windows,
                ck.baseline.as_ref().expect("checked above"),
                &eval_times,
            )?),
        };
        records.push(SlideRecord {
            slide_id: entry.slide_id.clone(),
            patient_id: entry.patient_id.clone(),
            prediction,
        });
    }
    if records.is_empty() {
        return Err(Error::Validation(format!("split {:?} has no slides", args.split)));
    }
    let patients = aggregate_patients(&records)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("predictions.jsonl"), &jsonl(&records)?)?;
    write_text(&args.out.join("patients.jsonl"), &jsonl(&patients)?)?;
    run.write(&args.out)?;
    println!("{} slide and {} patient predictions", records.len(), patients.len());
    Ok(())
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_predictions(path: &Path, run: &mut RunRecord) -> Result<Vec<SlideRecord>> {
    run.input(path)?;
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn evaluate_cmd(args: EvaluateArgs, run: &mut RunRecord) -> Result<()> {
    let manifest = open_manifest(&args.data, run)?;
    let records = read_predictions(&args.predictions, run)?;
    run.seed = Some(args.seed);
    let opts = EvalOptions {
        kappa_weighting: args.kappa_weighting,
        n_replicates: args.replicates,
        seed: args.seed,
    };
    let report = evaluate(&manifest, &records, &opts)?;
    create_dir(&args.out)?;
    let text = serde_json::to_string_pretty(&report)?;
    write_text(&args.out.join("evaluation.json"), &text)?;
    if let EvaluationReport::Survival {
        km_low_risk,
        km_high_risk,
        ..
    } = &report
    {
        let n_low = km_low_risk.at_risk.first().copied().unwrap_or(0);
        write_text(&args.out.join("km_low_risk.csv"), &km_low_risk.to_csv(n_low))?;
        if let Some(high) = km_high_risk {
            let n_high = high.at_risk.first().copied().unwrap_or(0);
            write_text(&args.out.join("km_high_risk.csv"), &high.to_csv(n_high))?;
        }
    }
    run.write(&args.out)?;
    println!("{text}");
    Ok(())
}

fn reject_curve(args: RejectArgs, run: &mut RunRecord) -> Result<()> {
    let manifest = open_manifest(&args.data, run)?;
    let records = read_predictions(&args.predictions, run)?;
    let fractions = args
        .fractions
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad fraction '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let points = rejection_from_predictions(&manifest, &records, &fractions)?;
    create_dir(&args.out)?;
    let csv = rejection_csv(&points);
    write_text(&args.out.join("rejection.csv"), &csv)?;
    write_text(&args.out.join("rejection.json"), &serde_json::to_string_pretty(&points)?)?;
    run.write(&args.out)?;
    print!("{csv}");
    Ok(())
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Validation(format!("--dims must look like DxH, got '{s}'"));
    let (d, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((d.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn gradcheck(args: GradcheckArgs, run: &mut RunRecord) -> Result<bool> {
    let (d, h) = parse_dims(&args.dims)?;
    let dims = GradCheckDims {
        embed_dim: d,
        hidden_dim: h,
        out_dim: if args.task == Task::Classification { args.classes } else { 1 },
    };
    run.seed = Some(args.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let err = grad_check(dims, args.task, args.trials, args.eps, args.dropout, &mut rng)?;
    let pass = err < GRADCHECK_TOLERANCE;
    let result = json!({
        "embed_dim": d, "hidden_dim": h, "out_dim": dims.out_dim, "task": args.task,
        "trials": args.trials, "eps": args.eps, "max_relative_error": err, "pass": pass,
    });
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_text(&out.join("gradcheck.json"), &serde_json::to_string_pretty(&result)?)?;
        run.write(out)?;
    }
    println!("max relative error: {err:.3e} ({})", if pass { "pass" } else { "FAIL" });
    Ok(pass)
}

/// Runs one command line and returns the process exit code: 0 on success,
/// 1 for usage and validation errors, 2 for I/O and corrupt input.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Synth(a) => synth(a, &mut RunRecord::new("synth", &args)),
        Command::Fingerprint(a) => fingerprint(a, &mut RunRecord::new("fingerprint", &args)),
        Command::Plan(a) => plan(a, &mut RunRecord::new("plan", &args)),
        Command::Train(a) => train(a, &mut RunRecord::new("train", &args)),
        Command::Predict(a) => predict(a, &mut RunRecord::new("predict", &args)),
        Command::Evaluate(a) => evaluate_cmd(a, &mut RunRecord::new("evaluate", &args)),
        Command::RejectCurve(a) => reject_curve(a, &mut RunRecord::new("reject-curve", &args)),
        Command::Gradcheck(a) => match gradcheck(a, &mut RunRecord::new("gradcheck", &args)) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims("8x4").unwrap(), (8, 4));
        assert!(parse_dims("8").is_err());
        assert!(parse_dims("ax4").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["nnmil", "frobnicate"]), 1);
        assert_eq!(run(["nnmil"]), 1);
        assert_eq!(run(["nnmil", "--help"]), 0);
    }

    #[test]
    fn gradcheck_command() {
        assert_eq!(run(["nnmil", "gradcheck", "--dims", "8x4", "--task", "classification"]), 0);
        assert_eq!(run(["nnmil", "gradcheck", "--dims", "4x8"]), 1);
    }
}
