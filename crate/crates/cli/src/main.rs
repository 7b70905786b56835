//! `geowalk`: synthesis, graph building, prompt pretraining, adapter
//! training, evaluation, expert analysis, the insertion sweep and the
//! invariant self-check.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 usage or
//! validation error, 3 missing upstream artifact.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geowalk::GeoError;

#[derive(Parser, Debug)]
#[command(
    name = "geowalk",
    version,
    about = "Geometry prompts and mixture-of-geometry adapters"
)]
pub struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArg {
    /// Output directory (falls back to the config's `out_dir`).
    #[arg(long, env = "GEOWALK_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Catalog CSV; defaults to `<out>/catalog.csv`.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Targets CSV; defaults to `<out>/targets.csv`.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Directory holding the graph files; defaults to `<out>`.
    #[arg(long)]
    pub graphs: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic hierarchical catalog with targets.
    Synth {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
    },
    /// Build the Euclidean, hyperbolic and spherical KNN graphs.
    BuildGraph {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pretrain one prompt encoder per geometry.
    TrainPrompt {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Warm-fit the host model, then train adapters, projections and heads.
    TrainAdapter {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        /// Directory holding the encoder checkpoints; defaults to `<out>`.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `geometry` (E, S, H experts) or `euclidean` (three E experts).
        #[arg(long, default_value = "geometry")]
        experts: String,
    },
    /// Score a predictions file against targets.
    Evaluate {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Mean gate weight per expert and task from a gate trace.
    AnalyzeExperts {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Adapter training at several insertion periods from one backbone.
    Sweep {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Comma-separated periods, e.g. `1,2,4`.
        #[arg(long, value_delimiter = ',')]
        periods: Option<Vec<usize>>,
    },
    /// Run the invariant suite and print a JSON report.
    Check {
        /// Perturb one kernel to confirm the suite catches it.
        #[arg(long)]
        inject_fault: Option<String>,
        /// Samples per statistical manifold check.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
    Geo(GeoError),
}

impl From<GeoError> for Failure {
    fn from(e: GeoError) -> Self {
        Failure::Geo(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => 2,
        Failure::Check(_) => 1,
        Failure::Geo(e) => match e.root() {
            GeoError::Dependency { .. } => 3,
            GeoError::InvalidSpec(_)
            | GeoError::Dimension { .. }
            | GeoError::Normalization { .. }
            | GeoError::Validation(_)
            | GeoError::Config(_)
            | GeoError::Parse { .. }
            | GeoError::Version { .. }
            | GeoError::EmptyInput(_)
            | GeoError::UndefinedVariance
            | GeoError::Csv(_)
            | GeoError::Json(_) => 2,
            _ => 1,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
                Failure::Geo(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
