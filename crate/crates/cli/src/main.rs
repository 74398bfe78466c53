use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcsa_dtr::mnboot::CovarianceEstimator;
use mcsa_dtr::simlab::{Rollout, Scenario};
use mcsa_dtr::{ErrorKind, WeightScheme};

mod commands;
mod output;

#[derive(Parser)]
#[command(name = "mcsa-dtr", version, about = "Optimal dynamic treatment regimes by dWOLS with sensitivity analysis for unmeasured confounding")]
struct Cli {
    /// Worker threads. Results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a panel from one of the simulation DGPs.
    Simulate(SimulateArgs),
    /// Fit dWOLS to a panel.
    Fit(FitArgs),
    /// Monte Carlo sensitivity analysis with m-out-of-n bootstrap intervals.
    Sensa(SensaArgs),
    /// Repeated-sampling study over prior scenarios.
    Study(StudyArgs),
    /// Plasmode data sets and the plasmode study.
    Plasmode(PlasmodeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DgpArgs {
    /// Built-in DGP with default parameters.
    #[arg(long, value_parser = ["one-stage", "two-stage"], required_unless_present = "dgp_file", conflicts_with = "dgp_file")]
    pub dgp: Option<String>,
    /// JSON file with a DGP and parameter overrides.
    #[arg(long)]
    pub dgp_file: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AnalysisArgs {
    /// Bootstrap/Monte Carlo repetitions per analysis.
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Resample-size exponent parameter.
    #[arg(long, default_value_t = 0.05)]
    pub kappa: f64,
    /// Pretest level.
    #[arg(long, default_value_t = 0.05)]
    pub nu: f64,
    /// Interval error level, one value or one per stage.
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    pub vartheta: Vec<f64>,
    /// Balancing weights.
    #[arg(long, default_value = "overlap")]
    pub weights: WeightScheme,
    /// Covariance used by the nonregularity pretest.
    #[arg(long, default_value = "sandwich")]
    pub covariance: CovarianceEstimator,
    /// Point estimates only.
    #[arg(long)]
    pub no_intervals: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output panel CSV.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write the latent confounder to `<out stem>.latent.csv`.
    #[arg(long)]
    pub emit_latent: bool,
    /// Write the DGP's model and narrow-centred sensitivity spec files here.
    #[arg(long)]
    pub spec_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Panel CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Model spec file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "overlap")]
    pub weights: WeightScheme,
    /// JSON bundle output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SensaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Confounder model and prior spec file.
    #[arg(long)]
    pub sensitivity: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    /// Study repetitions.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Scenario ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<Scenario>>,
    /// Evaluation patients for the proportion optimal.
    #[arg(long, default_value_t = 10_000)]
    pub n_eval: usize,
    #[arg(long, default_value = "truth")]
    pub rollout: Rollout,
    /// Sample size for the pseudo-true confounder parameters.
    #[arg(long, default_value_t = 1_000_000)]
    pub zeta_n: usize,
    /// 1000 repetitions and B = 500 unless given explicitly.
    #[arg(long)]
    pub full_paper_scale: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlasmodeArgs {
    /// Covariate CSV with the columns the model references.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub covariates: Option<PathBuf>,
    /// Use a synthetic stand-in cohort of this size.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Plasmode model spec file; defaults to the stand-in model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of plasmode data sets.
    #[arg(long, alias = "n-sets", default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Prior sd of beta_u and the confounder intercept.
    #[arg(long, default_value_t = 0.05)]
    pub sd_main: f64,
    /// Prior sd of the other confounder coefficients.
    #[arg(long, default_value_t = 0.1)]
    pub sd_other: f64,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Write the data sets instead of analysing them.
    #[arg(long)]
    pub generate_only: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Sensa(a) => commands::sensa(a),
        Command::Study(a) => commands::study(a),
        Command::Plasmode(a) => commands::plasmode(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
