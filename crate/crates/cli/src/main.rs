mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use assist_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{BackendChoice, CalibrationMethod, PolicyKind, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "assist", version, about = "Budgeted engine-assistance experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the built-in toy engine.
    #[arg(long, global = true)]
    pub fake_engine: bool,
    /// UCI engine executable.
    #[arg(long, global = true)]
    pub engine: Option<PathBuf>,
    /// Argument passed to the engine executable (repeatable).
    #[arg(long = "engine-arg", global = true, allow_hyphen_values = true)]
    pub engine_args: Vec<String>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Fewer samples per decision (lower fidelity).
    #[arg(long, global = true)]
    pub fast: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct MatchArgs {
    #[arg(long)]
    pub games: Option<usize>,
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long)]
    pub weak_elo: Option<u32>,
    #[arg(long)]
    pub strong_elo: Option<u32>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    D0,
    Di,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Play the no-intervention (d0) and single-intervention (di) logs.
    GenData {
        #[arg(long, value_enum, default_value = "both")]
        kind: DataKind,
        #[command(flatten)]
        m: MatchArgs,
    },
    /// Import a PGN file as a human game dataset.
    Ingest {
        pgn: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        min_elo: Option<u32>,
        #[arg(long)]
        max_elo: Option<u32>,
    },
    /// Fill raw engine scores into a dataset.
    Annotate {
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        /// Continue from the cursor saved by an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Fit per-bucket calibration curves on d0.
    Calibrate {
        #[arg(long)]
        d0: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<CalibrationMethod>,
        #[arg(long)]
        bucket_width: Option<u32>,
        #[arg(long)]
        min_samples: Option<usize>,
        /// Leave the datasets uncalibrated.
        #[arg(long)]
        no_apply: bool,
        /// Further datasets to calibrate in place.
        #[arg(long = "apply-to")]
        apply_to: Vec<PathBuf>,
    },
    TrainPredictors {
        #[arg(long)]
        d0: Option<PathBuf>,
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long)]
        family: Option<String>,
    },
    /// Play games under a policy, one dataset per budget.
    Play {
        #[arg(long, value_enum)]
        policy: Option<PolicyKind>,
        #[arg(long, value_delimiter = ',')]
        budget: Option<Vec<u32>>,
        #[arg(long = "t", alias = "thresholds", value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        slack: Option<Vec<f64>>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        #[command(flatten)]
        m: MatchArgs,
    },
    /// Build move banks and the uplift table from calibrated d0 and di.
    FitUplift {
        #[arg(long)]
        d0: Option<PathBuf>,
        #[arg(long)]
        di: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<u32>,
        #[arg(long)]
        bin_width: Option<u32>,
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Engine-free score of a threshold vector.
    Simulate {
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        #[arg(long)]
        horizon: Option<u32>,
        #[arg(long)]
        banks: Option<PathBuf>,
        #[arg(long)]
        uplift: Option<PathBuf>,
    },
    /// Bayesian optimisation of the thresholds.
    Optimize {
        #[arg(long, value_enum)]
        backend: Option<BackendChoice>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        init_points: Option<usize>,
        #[arg(long, alias = "iters")]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lower: Option<f64>,
        #[arg(long)]
        upper: Option<f64>,
        #[arg(long)]
        ordered: bool,
        #[arg(long)]
        games_per_eval: Option<usize>,
        #[arg(long)]
        runs_per_eval: Option<u64>,
        #[arg(long)]
        banks: Option<PathBuf>,
        #[arg(long)]
        uplift: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[command(flatten)]
        m: MatchArgs,
    },
    /// Engine-vs-human conversion gap over (n, alpha).
    GapGrid {
        #[arg(long)]
        engine_data: Option<PathBuf>,
        #[arg(long)]
        human: PathBuf,
        #[arg(long = "n", value_delimiter = ',')]
        n_values: Option<Vec<u32>>,
        #[arg(long = "alpha", value_delimiter = ',')]
        alpha_values: Option<Vec<f64>>,
        #[arg(long)]
        min_cell: Option<usize>,
        #[arg(long)]
        min_elo: Option<u32>,
        #[arg(long)]
        max_elo: Option<u32>,
    },
    /// CSV tables and SVG plots from a run directory.
    Report {
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_engine_failure() {
        3
    } else if matches!(e, Error::Config(_)) {
        2
    } else {
        4
    }
}

fn class(code: u8) -> &'static str {
    match code {
        2 => "config",
        3 => "engine",
        _ => "data",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = ctrlc::set_handler(|| {
        if assist_core::orchestrator::stop_requested() {
            std::process::exit(130);
        }
        assist_core::orchestrator::request_stop();
        commands::status("stop-requested", serde_json::json!({}));
    });
    let outcome = RunConfig::resolve(&cli.global).and_then(|cfg| commands::run(cfg, cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            commands::status(
                "error",
                serde_json::json!({ "class": class(code), "message": e.to_string() }),
            );
            ExitCode::from(code)
        }
    }
}
