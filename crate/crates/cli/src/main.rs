//! Experiment CLI: fit rational activations, run configuration-driven
//! adaptation experiments, and compute diagnostics over checkpoints.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 runtime
//! numeric failure, 1 other errors. Failures print a machine-readable JSON
//! envelope to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nora_core::checkpoint;
use nora_core::data::Dataset;
use nora_core::diagnostics;
use nora_core::experiment::{self, ExperimentError};
use nora_core::fit::{self, FitLoss, FitSpec, FitTarget};

#[derive(Parser)]
#[command(
    name = "nora",
    about = "Group-wise rational activation adapters: fitting, training, diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment config (all matrix cells).
    Run {
        /// Path to the JSON experiment config.
        config: PathBuf,
    },
    /// Fit a rational activation to a reference function.
    Fit(FitArgs),
    /// Error-decay study over increasing total degree; emits CSV.
    RateStudy(RateStudyArgs),
    /// Per-layer Lipschitz data and product bound of an MLP checkpoint.
    Lipschitz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = -8.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 8.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 10_000)]
        grid_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deviation bound check between a base and an adapted checkpoint.
    Deviation {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapted: PathBuf,
        /// Dataset file providing probe inputs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distribution-distance adaptability score between two checkpoints.
    Adaptability {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consolidated comparison of completed run directories.
    Compare {
        /// Two or more run directories (each containing report.json).
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable/total parameter counts of a checkpoint.
    CountParams {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Exclude the classification head from the trainable count.
        #[arg(long)]
        exclude_head: bool,
    },
}

#[derive(Args)]
struct FitArgs {
    /// gelu | relu | tanh | silu | abs | constant=<v>
    #[arg(long, default_value = "gelu")]
    target: String,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    hi: f64,
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value = "least-squares")]
    loss: String,
    #[arg(long, default_value_t = 2001)]
    grid_points: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RateStudyArgs {
    #[arg(long, default_value = "tanh")]
    target: String,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    hi: f64,
    /// Comma-separated strictly increasing total degrees.
    #[arg(long, default_value = "2,4,6,8,10")]
    degrees: String,
    #[arg(long, default_value = "sup-norm")]
    loss: String,
    #[arg(long, default_value_t = 1001)]
    grid_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_target(text: &str) -> Result<FitTarget, ExperimentError> {
    match text {
        "gelu" => Ok(FitTarget::Gelu),
        "relu" => Ok(FitTarget::Relu),
        "tanh" => Ok(FitTarget::Tanh),
        "silu" => Ok(FitTarget::Silu),
        "abs" => Ok(FitTarget::Abs),
        other => match other.strip_prefix("constant=") {
            Some(v) => v
                .parse::<f64>()
                .map(|value| FitTarget::Constant { value })
                .map_err(|e| ExperimentError::Config(format!("constant target: {e}"))),
            None => Err(ExperimentError::Config(format!(
                "unknown target {other:?} (expected gelu|relu|tanh|silu|abs|constant=<v>)"
            ))),
        },
    }
}

fn parse_loss(text: &str) -> Result<FitLoss, ExperimentError> {
    match text {
        "least-squares" => Ok(FitLoss::LeastSquares),
        "sup-norm" => Ok(FitLoss::SupNorm),
        other => Err(ExperimentError::Config(format!(
            "unknown loss {other:?} (expected least-squares|sup-norm)"
        ))),
    }
}

fn emit(out: &Option<PathBuf>, contents: &str) -> Result<(), ExperimentError> {
    match out {
        Some(path) => {
            std::fs::write(path, contents)?;
            Ok(())
        }
        None => {
            println!("{contents}");
            Ok(())
        }
    }
}

fn probe_batch(path: &PathBuf, probes: usize) -> Result<nora_core::Tensor, ExperimentError> {
    let dataset = Dataset::read_file(path).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let count = probes.max(1).min(dataset.len());
    let indices: Vec<usize> = (0..count).collect();
    Ok(dataset.batch(&indices).0)
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                ExperimentError::Config(format!("cannot read {}: {e}", config.display()))
            })?;
            let parsed = experiment::parse_config(&text)?;
            let outcomes = experiment::run(&parsed)?;
            for outcome in &outcomes {
                println!(
                    "run {} -> {}",
                    outcome.report.run_id,
                    outcome.run_dir.display()
                );
            }
            Ok(())
        }
        Command::Fit(args) => {
            let mut spec = FitSpec::new(
                parse_target(&args.target)?,
                (args.lo, args.hi),
                (args.m, args.n),
            );
            spec.loss = parse_loss(&args.loss)?;
            spec.grid_points = args.grid_points;
            spec.max_iters = args.max_iters;
            let report = fit::fit_rational(&spec)?;
            emit(&args.out, &serde_json::to_string_pretty(&report)?)
        }
        Command::RateStudy(args) => {
            let degrees: Vec<usize> = args
                .degrees
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse::<usize>()
                        .map_err(|e| ExperimentError::Config(format!("degree {part:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let study = fit::rate_study(
                parse_target(&args.target)?,
                (args.lo, args.hi),
                &degrees,
                parse_loss(&args.loss)?,
                args.grid_points,
            )?;
            let mut csv = String::from("N,m,n,sup_error,l2_error\n");
            for point in &study.points {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    point.total_degree, point.m, point.n, point.sup_error, point.l2_error
                ));
            }
            csv.push_str(&format!(
                "# target={} regressor={} slope={} r_squared={}\n",
                study.target, study.regressor, study.rate_fit.slope, study.rate_fit.r_squared
            ));
            emit(&args.out, &csv)
        }
        Command::Lipschitz {
            checkpoint: path,
            lo,
            hi,
            grid_points,
            out,
        } => {
            let loaded = checkpoint::load(&path)?;
            let report = diagnostics::lipschitz_bound(&loaded.model, (lo, hi), grid_points)
                .map_err(|e| ExperimentError::Numeric(e.to_string()))?;
            emit(&out, &serde_json::to_string_pretty(&report)?)
        }
        Command::Deviation {
            base,
            adapted,
            data,
            probes,
            out,
        } => {
            let base = checkpoint::load(&base)?;
            let adapted = checkpoint::load(&adapted)?;
            let probe = probe_batch(&data, probes)?;
            let report = diagnostics::deviation_check(&base.model, &adapted.model, &probe)
                .map_err(|e| ExperimentError::Numeric(e.to_string()))?;
            emit(&out, &serde_json::to_string_pretty(&report)?)
        }
        Command::Adaptability {
            before,
            after,
            data,
            probes,
            out,
        } => {
            let before = checkpoint::load(&before)?;
            let after = checkpoint::load(&after)?;
            let probe = probe_batch(&data, probes)?;
            let report = diagnostics::adaptability_score(&before.model, &after.model, &probe)
                .map_err(|e| ExperimentError::Numeric(e.to_string()))?;
            emit(&out, &serde_json::to_string_pretty(&report)?)
        }
        Command::Compare { dirs, out } => {
            let csv = experiment::compare(&dirs)?;
            emit(&out, &csv)
        }
        Command::CountParams {
            checkpoint: path,
            exclude_head,
        } => {
            let loaded = checkpoint::load(&path)?;
            let body = serde_json::json!({
                "trainable": loaded.model.count_trainable(!exclude_head),
                "total": loaded.model.total_params(),
                "head_included": !exclude_head,
            });
            println!("{}", serde_json::to_string_pretty(&body)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = match &err {
                ExperimentError::Config(_) | ExperimentError::Refused(_) => ("config", 2),
                ExperimentError::Numeric(_) => ("numeric", 3),
                ExperimentError::Io(_) | ExperimentError::Json(_) => ("io", 1),
            };
            let envelope = serde_json::json!({
                "error": { "kind": kind, "message": err.to_string() }
            });
            eprintln!("{envelope}");
            ExitCode::from(code)
        }
    }
}
