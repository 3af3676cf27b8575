//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::config::{AttentionExclusion, FilterTargetMode};
use crate::error::{Error, Result};
use crate::flops::{format_mflops, gamma_schedule, model_flops, Dims};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::metrics::metrics_csv;
use crate::harness::train::kept_fractions;
use crate::harness::{evaluate, export_mask_histogram, generate_synthetic, train, RunConfig, TrainOutcome, TrainRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tokengate", version, about = "Token-gated encoder training and FLOPs analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, checkpoint, histogram and FLOPs report.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train one model per gamma and write a summary table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated gamma values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        gammas: Vec<f64>,
    },
    /// Print the analytic FLOPs report for given dims and active counts.
    Flops(FlopsArgs),
    /// Evaluate a checkpoint on its held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the gate-value histogram CSV of a checkpoint.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_filter: Option<f64>,
    #[arg(long)]
    pub lambda_bi: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub filter_target_mode: Option<FilterTargetMode>,
    #[arg(long)]
    pub attention_exclusion: Option<AttentionExclusion>,
    /// Dotted-key override, e.g. `--set train.batch_size=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Use L=12, I=128, J=768.
    #[arg(long)]
    pub paper_dims: bool,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Active tokens per block, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "gamma")]
    pub counts: Option<Vec<usize>>,
    /// Schedule: first block full, later blocks at round(gamma * I).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::Numeric { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses arguments, runs the command, prints diagnostics, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(stdout) => {
            print!("{stdout}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Runs a command and returns what it would print on success.
pub fn dispatch(command: Command) -> std::result::Result<String, Failure> {
    match command {
        Command::Train { run } => cmd_train(&run),
        Command::Sweep { run, gammas } => cmd_sweep(&run, &gammas),
        Command::Flops(args) => cmd_flops(&args),
        Command::Eval { checkpoint, out } => cmd_eval(&checkpoint, out.as_deref()),
        Command::ExportMasks { checkpoint, out, bins } => cmd_export_masks(&checkpoint, &out, bins),
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// Applies `a.b.c=value` to a config; values parse as JSON, falling back to strings.
pub fn apply_override(cfg: &RunConfig, assignment: &str) -> Result<RunConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "expected KEY=VALUE"))?;
    let mut doc = serde_json::to_value(cfg).expect("config serializes");
    let mut node = &mut doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .filter(|n| n.is_object())
            .ok_or_else(|| Error::config(key, "unknown config section"))?;
    }
    let leaf = parts[parts.len() - 1];
    let obj = node.as_object_mut().ok_or_else(|| Error::config(key, "not a config section"))?;
    if !obj.contains_key(leaf) {
        return Err(Error::config(key, "unknown config field"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    obj.insert(leaf.to_string(), value);
    serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))
}

/// Effective configuration after file, flags and dotted overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(v) = args.gamma {
        cfg.model.gamma = v;
    }
    if let Some(v) = args.alpha {
        cfg.model.alpha = v;
    }
    if let Some(v) = args.lambda_filter {
        cfg.model.lambda_filter = v;
    }
    if let Some(v) = args.lambda_bi {
        cfg.model.lambda_bi = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.model.seed = v;
    }
    if let Some(v) = args.filter_target_mode {
        cfg.model.filter_target_mode = v;
    }
    if let Some(v) = args.attention_exclusion {
        cfg.model.attention_exclusion = v;
    }
    for o in &args.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes config echo, metrics, checkpoint, histogram, FLOPs report and summary.
pub fn write_run_artifacts(dir: &Path, cfg: &RunConfig, run: &TrainRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    write(&dir.join("metrics.csv"), &metrics_csv(&run.metrics, cfg.model.blocks))?;
    Checkpoint::from_model(cfg, &run.model).save(&dir.join("checkpoint.json"))?;
    let hist = export_mask_histogram(&run.model, cfg.train.histogram_bins)?;
    write(&dir.join("histogram.csv"), &hist.to_csv())?;

    let mut summary = serde_json::json!({
        "gamma": cfg.model.gamma,
        "kept_frac": kept_fractions(&run.model),
    });
    if let Some(eval) = &run.eval {
        write(&dir.join("flops.json"), &eval.flops.to_json())?;
        write(&dir.join("flops.csv"), &eval.flops.to_csv())?;
        summary["eval"] = serde_json::to_value(eval).expect("eval serializes");
    }
    match &run.outcome {
        TrainOutcome::Completed => summary["status"] = "completed".into(),
        TrainOutcome::Diverged { step, reason } => {
            summary["status"] = "diverged".into();
            summary["diverged_at_step"] = (*step).into();
            summary["reason"] = reason.clone().into();
        }
    }
    write(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
}

fn train_and_write(dir: &Path, cfg: &RunConfig) -> Result<TrainRun> {
    let run = train(cfg)?;
    write_run_artifacts(dir, cfg, &run)?;
    Ok(run)
}

fn cmd_train(args: &RunArgs) -> std::result::Result<String, Failure> {
    let cfg = resolve_config(args)?;
    let run = train_and_write(&args.out, &cfg)?;
    let mut out = String::new();
    match (&run.outcome, &run.eval) {
        (TrainOutcome::Completed, Some(eval)) => {
            let _ = writeln!(out, "accuracy {:.4}", eval.accuracy);
            let _ = writeln!(
                out,
                "flops {} ({})",
                format_mflops(eval.flops.total),
                eval.flops.speedup_label().unwrap_or_default()
            );
            let _ = writeln!(out, "artifacts in {}", args.out.display());
            Ok(out)
        }
        _ => Err(run.into_result().err().map(Failure::from).unwrap_or(Failure {
            code: EXIT_NUMERIC,
            message: "training did not complete".into(),
        })),
    }
}

fn cmd_sweep(args: &RunArgs, gammas: &[f64]) -> std::result::Result<String, Failure> {
    if gammas.is_empty() {
        return Err(Failure {
            code: EXIT_USAGE,
            message: "--gammas needs at least one value".into(),
        });
    }
    let base = resolve_config(args)?;
    for &g in gammas {
        crate::config::check_gamma(g)?;
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut table = String::from("gamma,accuracy,total_flops,speedup,status\n");
    let mut failures = 0;
    for &g in gammas {
        let mut cfg = base.clone();
        cfg.model.gamma = g;
        let dir = args.out.join(format!("gamma_{g:.2}"));
        match train_and_write(&dir, &cfg) {
            Ok(TrainRun {
                outcome: TrainOutcome::Completed,
                eval: Some(eval),
                ..
            }) => {
                let _ = writeln!(
                    table,
                    "{g},{},{},{},ok",
                    eval.accuracy, eval.flops.total, eval.flops.speedup
                );
            }
            Ok(run) => {
                failures += 1;
                let reason = match run.outcome {
                    TrainOutcome::Diverged { step, .. } => format!("diverged at step {step}"),
                    TrainOutcome::Completed => "no evaluation".into(),
                };
                let _ = writeln!(table, "{g},,,,{reason}");
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(table, "{g},,,,error: {}", e.to_string().replace(',', ";"));
            }
        }
    }
    write(&args.out.join("summary.csv"), &table)?;
    if failures > 0 {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failures} of {} runs failed; see summary.csv", gammas.len()),
        });
    }
    Ok(table)
}

fn cmd_flops(args: &FlopsArgs) -> std::result::Result<String, Failure> {
    let base = if args.paper_dims {
        Dims::BERT_BASE
    } else {
        Dims {
            blocks: 4,
            seq_len: 16,
            hidden: 32,
        }
    };
    let dims = Dims {
        blocks: args.blocks.unwrap_or(base.blocks),
        seq_len: args.seq_len.unwrap_or(base.seq_len),
        hidden: args.hidden.unwrap_or(base.hidden),
    };
    dims.validate()?;
    let counts = match (&args.counts, args.gamma) {
        (Some(c), _) => c.clone(),
        (None, Some(g)) => gamma_schedule(g, dims)?,
        (None, None) => vec![dims.seq_len; dims.blocks],
    };
    let report = model_flops(&counts, dims)?;
    Ok(match args.format {
        OutputFormat::Text => report.render(),
        OutputFormat::Json => report.to_json() + "\n",
        OutputFormat::Csv => report.to_csv(),
    })
}

fn cmd_eval(checkpoint: &Path, out: Option<&Path>) -> std::result::Result<String, Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.config.validate()?;
    let model = ck.to_model()?;
    let data = generate_synthetic(&ck.config.task)?;
    let eval = evaluate(&model, &data.eval)?;
    let json = serde_json::to_string_pretty(&eval).expect("eval serializes");
    if let Some(path) = out {
        write(path, &json)?;
    }
    Ok(json + "\n")
}

fn cmd_export_masks(checkpoint: &Path, out: &Path, bins: Option<usize>) -> std::result::Result<String, Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let hist = export_mask_histogram(&model, bins.unwrap_or(ck.config.train.histogram_bins))?;
    write(out, &hist.to_csv())?;
    Ok(format!("wrote {}\n", out.display()))
}
