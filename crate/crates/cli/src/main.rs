//! `mnclglf`: pretraining, linear evaluation, ablations, and self-checks
//! for multi-network contrastive learning on global and local features.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.

mod convert;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use mnclglf_core::check::{run_all_checks, CheckHooks};
use mnclglf_core::config::{EvalConfig, SampleMode, TrainConfig};
use mnclglf_core::data::{load_split, Split};
use mnclglf_core::error::Error;
use mnclglf_core::eval::{evaluate, EvalOutcome};
use mnclglf_core::nn::backbone::BackboneKind;
use mnclglf_core::synth::{generate_to_dir, SynthSpec};
use mnclglf_core::trainer::{fit, load_online_stack, FitOptions};

use manifest::{fingerprint_file, write_manifest, DirLock, RunManifest};

#[derive(Parser)]
#[command(name = "mnclglf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining
    Pretrain(PretrainArgs),
    /// Frozen-encoder linear probe
    LinearEval(LinearEvalArgs),
    /// Hyperparameter sweeps
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Run the numerical self-check suite
    Check,
    /// Per-channel normalization constants of a dataset
    Stats { data: PathBuf },
    /// Convert a directory of P6 PPM images to the flat binary layout
    Convert {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Generate the bundled synthetic shape dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct PretrainArgs {
    /// Run config file ([train]/[augment]/[loss] sections)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding train.bin/train.meta
    #[arg(long)]
    data: PathBuf,
    /// Output directory (trace, checkpoints, manifest)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Resume from a checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
    // flag overrides; flags win over the config file with a warning
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    combine_k: Option<usize>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    sample_mode: Option<String>,
    #[arg(long)]
    queue_capacity: Option<usize>,
}

#[derive(Args, Clone)]
struct LinearEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding train/test splits
    #[arg(long)]
    data: PathBuf,
    /// Where to write eval_result.json (defaults to the checkpoint's dir)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable crop/flip on probe-training inputs
    #[arg(long)]
    no_probe_augment: bool,
}

#[derive(Subcommand, Clone)]
enum AblateCommand {
    /// Sweep the momentum-branch loss weight
    Lambda(AblateArgs),
    /// Sweep the patch-combination size
    K(AblateArgs),
    /// Full combination set vs one sampled embedding per step
    Samples(AblateSamplesArgs),
}

#[derive(Args, Clone)]
struct AblateArgs {
    /// Comma-separated sweep values
    #[arg(long)]
    values: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    eval_epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct AblateSamplesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    eval_epochs: Option<usize>,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Core(core) => match core {
            Error::Parameter(_) => 2,
            Error::Format { .. } | Error::Validation(_) | Error::Config(_) | Error::Io { .. } => 3,
            Error::Dimension(_) | Error::Structure(_) | Error::Numerical(_) => 4,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Core(core) => eprintln!("error: {core}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::LinearEval(args) => cmd_linear_eval(args),
        Command::Ablate(cmd) => match cmd {
            AblateCommand::Lambda(args) => cmd_ablate_scalar(args, Axis::Lambda),
            AblateCommand::K(args) => cmd_ablate_scalar(args, Axis::K),
            AblateCommand::Samples(args) => cmd_ablate_samples(args),
        },
        Command::Check => cmd_check(),
        Command::Stats { data } => cmd_stats(&data),
        Command::Convert { src, out, split } => {
            let ds = convert::convert_dir(&src, &out, &split)?;
            println!(
                "converted {} records ({} classes, {}x{}x{}) into {}",
                ds.len(),
                ds.class_count,
                ds.channels(),
                ds.height(),
                ds.width(),
                out.display()
            );
            Ok(())
        }
        Command::Synth {
            out,
            train,
            test,
            classes,
            side,
            seed,
        } => {
            let spec = SynthSpec {
                train,
                test,
                classes,
                side,
                seed,
            };
            generate_to_dir(&spec, &out)?;
            println!(
                "wrote {train} train and {test} test records ({classes} classes, {side}x{side}) to {}",
                out.display()
            );
            Ok(())
        }
    }
}

/// Loads the config file (or defaults) and applies flag overrides; flags win
/// over differing config values with a warning.
fn effective_config(args: &PretrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    let from_file = args.config.is_some();
    let warn = |name: &str, old: String, new: String| {
        if from_file && old != new {
            eprintln!("warning: flag --{name} {new} overrides config value {old}");
        }
    };
    if let Some(v) = args.seed {
        warn("seed", cfg.seed.to_string(), v.to_string());
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        warn("epochs", cfg.epochs.to_string(), v.to_string());
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        warn("batch-size", cfg.batch_size.to_string(), v.to_string());
        cfg.batch_size = v;
    }
    if let Some(v) = args.temperature {
        warn("temperature", cfg.loss.temperature.to_string(), v.to_string());
        cfg.loss.temperature = v;
    }
    if let Some(v) = args.lambda {
        warn("lambda", cfg.loss.lambda.to_string(), v.to_string());
        cfg.loss.lambda = v;
    }
    if let Some(v) = args.combine_k {
        warn("combine-k", cfg.combine_k.to_string(), v.to_string());
        cfg.combine_k = v;
    }
    if let Some(v) = &args.backbone {
        let kind = BackboneKind::parse(v)
            .ok_or_else(|| CliError::Usage(format!("unknown backbone {v}")))?;
        warn("backbone", cfg.backbone.as_str().into(), v.clone());
        if cfg.backbone != kind {
            let arch = mnclglf_core::nn::stack::ArchConfig::for_kind(kind);
            cfg.backbone = kind;
            cfg.proj_hidden = arch.proj_hidden;
            cfg.proj_out = arch.proj_out;
            cfg.pred_hidden = arch.pred_hidden;
        }
    }
    if let Some(v) = &args.sample_mode {
        let mode = SampleMode::parse(v)
            .ok_or_else(|| CliError::Usage(format!("unknown sample mode {v}")))?;
        warn("sample-mode", cfg.sample_mode.as_str().into(), v.clone());
        cfg.sample_mode = mode;
    }
    if let Some(v) = args.queue_capacity {
        warn("queue-capacity", cfg.queue_capacity.to_string(), v.to_string());
        cfg.queue_capacity = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let cfg = effective_config(&args)?;
    let _lock = DirLock::acquire(&args.out)?;
    let train_bin = args.data.join("train.bin");
    write_manifest(
        &args.out,
        &RunManifest {
            command: "pretrain".into(),
            config_echo: cfg.to_text(),
            seed: cfg.seed,
            dataset_fingerprint: Some(fingerprint_file(&train_bin)?),
            outputs: vec!["trace.csv".into(), "final.ckpt".into()],
        },
        args.force,
    )?;
    let dataset = Arc::new(load_split(&args.data, "train", Split::Train)?);
    let outcome = fit::<f32>(
        &dataset,
        &cfg,
        &args.out,
        &FitOptions {
            resume_from: args.resume.clone(),
            milestone_epochs: vec![],
            verbose: !args.quiet,
        },
    )?;
    println!(
        "pretraining done: {} steps, checkpoint {}, trace {}",
        outcome.steps_run,
        outcome.final_checkpoint.display(),
        outcome.trace_path.display()
    );
    Ok(())
}

fn eval_config(epochs: Option<usize>, seed: Option<u64>, no_probe_augment: bool) -> EvalConfig {
    let mut cfg = EvalConfig::default();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if no_probe_augment {
        cfg.probe_augment = false;
    }
    cfg
}

fn json_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn run_linear_eval(
    checkpoint: &Path,
    data: &Path,
    eval_cfg: &EvalConfig,
) -> Result<(EvalOutcome, TrainConfig), CliError> {
    let (mut stack, train_cfg) = load_online_stack::<f32>(checkpoint)?;
    let train = load_split(data, "train", Split::Train)?;
    let test = load_split(data, "test", Split::Eval)?;
    let outcome = evaluate(&mut stack, &train, &test, eval_cfg, &train_cfg.augment)?;
    Ok((outcome, train_cfg))
}

fn cmd_linear_eval(args: LinearEvalArgs) -> Result<(), CliError> {
    let eval_cfg = eval_config(args.epochs, args.seed, args.no_probe_augment);
    let (outcome, train_cfg) = run_linear_eval(&args.checkpoint, &args.data, &eval_cfg)?;
    println!(
        "linear evaluation: top1 = {:.4}  top5 = {:.4}",
        outcome.top1, outcome.top5
    );
    let out_dir = args
        .out
        .clone()
        .or_else(|| args.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let record = format!(
        "{{\n  \"top1\": {:.6},\n  \"top5\": {:.6},\n  \"probe_epochs\": {},\n  \"config\": \"{}\"\n}}\n",
        outcome.top1,
        outcome.top5,
        eval_cfg.epochs,
        json_escape(&train_cfg.to_text())
    );
    let path = out_dir.join("eval_result.json");
    fs::write(&path, record).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    println!("result record: {}", path.display());
    Ok(())
}

enum Axis {
    Lambda,
    K,
}

fn cmd_ablate_scalar(args: AblateArgs, axis: Axis) -> Result<(), CliError> {
    let mut raw: Vec<f64> = Vec::new();
    for tok in args.values.split(',') {
        let v: f64 = tok
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad sweep value {tok:?}")))?;
        if raw.contains(&v) {
            eprintln!("warning: duplicate sweep value {v} ignored");
            continue;
        }
        raw.push(v);
    }
    if raw.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let base = PretrainArgs {
        config: args.config.clone(),
        data: args.data.clone(),
        out: args.out.clone(),
        force: args.force,
        resume: None,
        quiet: args.quiet,
        seed: None,
        epochs: None,
        batch_size: None,
        temperature: None,
        lambda: None,
        combine_k: None,
        backbone: None,
        sample_mode: None,
        queue_capacity: None,
    };
    let base_cfg = effective_config(&base)?;
    let _lock = DirLock::acquire(&args.out)?;
    let eval_cfg = eval_config(args.eval_epochs, Some(base_cfg.seed), false);
    let mut rows = Vec::new();
    for v in &raw {
        let mut cfg = base_cfg.clone();
        let label = match axis {
            Axis::Lambda => {
                cfg.loss.lambda = *v;
                format!("lambda-{v}")
            }
            Axis::K => {
                let k = *v as usize;
                if k as f64 != *v || !(1..=4).contains(&k) {
                    return Err(CliError::Usage(format!("combine k must be 1..=4, got {v}")));
                }
                cfg.combine_k = k;
                format!("k-{k}")
            }
        };
        cfg.validate()?;
        let run_dir = args.out.join(&label);
        let ckpt = run_dir.join("final.ckpt");
        let cached = ckpt.exists() && !args.force;
        if cached {
            eprintln!("note: reusing cached checkpoint {}", ckpt.display());
        } else {
            write_manifest(
                &run_dir,
                &RunManifest {
                    command: format!("ablate {label}"),
                    config_echo: cfg.to_text(),
                    seed: cfg.seed,
                    dataset_fingerprint: Some(fingerprint_file(&args.data.join("train.bin"))?),
                    outputs: vec!["final.ckpt".into()],
                },
                args.force,
            )?;
            let dataset = Arc::new(load_split(&args.data, "train", Split::Train)?);
            fit::<f32>(
                &dataset,
                &cfg,
                &run_dir,
                &FitOptions {
                    verbose: !args.quiet,
                    ..Default::default()
                },
            )?;
        }
        let (outcome, _) = run_linear_eval(&ckpt, &args.data, &eval_cfg)?;
        rows.push((label, *v, outcome));
    }
    println!("{:<14} {:>8} {:>8}", "run", "top1", "top5");
    for (label, v, o) in &rows {
        let mark = match axis {
            Axis::K if (*v - 2.0).abs() < f64::EPSILON => "  (reference best)",
            Axis::Lambda if (*v - 6.0).abs() < f64::EPSILON => "  (reference best)",
            _ => "",
        };
        println!("{label:<14} {:>8.4} {:>8.4}{mark}", o.top1, o.top5);
    }
    if matches!(axis, Axis::K) {
        println!("combinations per k: k=1 -> 4, k=2 -> 6, k=3 -> 4, k=4 -> 1");
    }
    Ok(())
}

fn cmd_ablate_samples(args: AblateSamplesArgs) -> Result<(), CliError> {
    let base = PretrainArgs {
        config: args.config.clone(),
        data: args.data.clone(),
        out: args.out.clone(),
        force: args.force,
        resume: None,
        quiet: args.quiet,
        seed: None,
        epochs: None,
        batch_size: None,
        temperature: None,
        lambda: None,
        combine_k: None,
        backbone: None,
        sample_mode: None,
        queue_capacity: None,
    };
    let base_cfg = effective_config(&base)?;
    let _lock = DirLock::acquire(&args.out)?;
    let eval_cfg = eval_config(args.eval_epochs, Some(base_cfg.seed), false);
    // proportional milestones of the configured run length
    let e = base_cfg.epochs;
    let mut milestones: Vec<usize> = [e / 4, e / 2, 3 * e / 4, e]
        .into_iter()
        .filter(|&m| m > 0)
        .collect();
    milestones.dedup();
    let dataset = Arc::new(load_split(&args.data, "train", Split::Train)?);
    let mut table: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for (label, mode) in [
        ("full", SampleMode::Full),
        ("one-embedding", SampleMode::SingleEmbedding),
    ] {
        let mut cfg = base_cfg.clone();
        cfg.sample_mode = mode; // both modes share the same seed and init
        let run_dir = args.out.join(label);
        let cached = run_dir.join("final.ckpt").exists() && !args.force;
        if cached {
            eprintln!("note: reusing cached run {}", run_dir.display());
        } else {
            write_manifest(
                &run_dir,
                &RunManifest {
                    command: format!("ablate samples {label}"),
                    config_echo: cfg.to_text(),
                    seed: cfg.seed,
                    dataset_fingerprint: Some(fingerprint_file(&args.data.join("train.bin"))?),
                    outputs: vec!["final.ckpt".into()],
                },
                args.force,
            )?;
            fit::<f32>(
                &dataset,
                &cfg,
                &run_dir,
                &FitOptions {
                    milestone_epochs: milestones.clone(),
                    verbose: !args.quiet,
                    ..Default::default()
                },
            )?;
        }
        let mut row = Vec::new();
        for &m in &milestones {
            let ckpt = if m == e {
                run_dir.join("final.ckpt")
            } else {
                run_dir.join(format!("milestone_ep{m}.ckpt"))
            };
            let (o, _) = run_linear_eval(&ckpt, &args.data, &eval_cfg)?;
            row.push((m, o.top1));
        }
        table.push((label.to_string(), row));
    }
    print!("{:<16}", "mode");
    for m in &milestones {
        print!(" {:>8}", format!("{m}e"));
    }
    println!();
    for (label, row) in &table {
        print!("{label:<16}");
        for (_, top1) in row {
            print!(" {top1:>8.4}");
        }
        println!();
    }
    Ok(())
}

fn cmd_check() -> Result<(), CliError> {
    let results = run_all_checks(&CheckHooks::default());
    println!("{:<24} {:<6} {:>14}  detail", "check", "status", "max err");
    let mut failed = false;
    for r in &results {
        let metric = r
            .metric
            .map(|m| format!("{m:.3e}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<24} {:<6} {:>14}  {}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            metric,
            r.detail
        );
        failed |= !r.passed;
    }
    if failed {
        Err(CliError::Core(Error::Numerical(
            "one or more self-checks failed".into(),
        )))
    } else {
        Ok(())
    }
}

fn cmd_stats(data: &Path) -> Result<(), CliError> {
    let ds = if data.is_dir() {
        load_split(data, "train", Split::Train)?
    } else {
        let meta_path = data.with_extension("meta");
        let meta = mnclglf_core::data::DatasetMeta::load(&meta_path)?;
        mnclglf_core::data::load_cifar_binary(data, &meta, Split::Train)?
    };
    let (mean, std) = ds.channel_stats();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    println!("records = {}", ds.len());
    println!("mean = {}", fmt(&mean));
    println!("std = {}", fmt(&std));
    println!("# config keys for the [augment] section:");
    println!("# mean = {}", fmt(&mean));
    println!("# std = {}", fmt(&std));
    Ok(())
}
