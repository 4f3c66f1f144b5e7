//! `ordelta` command-line tool.
//!
//! Every subcommand writes its data files plus a `manifest.json` into
//! `--out-dir`. Failures print a JSON error object on stderr and exit with
//! 1 for bad input or 2 for numerical failures.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::manifest::Run;

#[derive(Parser, Debug)]
#[command(name = "ordelta", version)]
#[command(about = "Delta-adjusted multiple imputation for an MNAR ordinal covariate")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads for per-copy fits and replications (default: all cores).
    #[arg(long, global = true, env = "ORDELTA_THREADS")]
    threads: Option<usize>,

    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the cumulative-link model of x1 on the observed rows.
    Fit(FitArgs),
    /// Impute x1 under MAR.
    Impute(ImputeArgs),
    /// Delta-adjust an imputation set.
    Adjust(AdjustArgs),
    /// Fit the outcome model to every copy and pool.
    Analyze(AnalyzeArgs),
    /// Pool per-copy fits written by `analyze`.
    Pool(PoolArgs),
    /// Category profiles of imputed values across a delta grid.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo run of a simulation design.
    Simulate(SimulateArgs),
    /// Monte Carlo run emitting a wide table (one column per method).
    ReplicateTable(ScenarioArgs),
    /// Write the synthetic trauma-registry dataset.
    Trauma(TraumaArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON schema naming the column roles.
    #[arg(long)]
    pub schema: PathBuf,
    /// Reference category override, `column=code` (repeatable).
    #[arg(long = "ref")]
    pub refs: Vec<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "probit")]
    pub link: String,
}

#[derive(Args, Debug)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of imputations.
    #[arg(long = "M", alias = "m", default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value = "probit")]
    pub link: String,
    /// Use the random-intercept Gibbs sampler (needs a cluster column).
    #[arg(long)]
    pub hier: bool,
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 100)]
    pub between: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AdjustArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Long CSV written by `impute`.
    #[arg(long)]
    pub imputations: PathBuf,
    /// JSON delta specification.
    #[arg(long)]
    pub delta: PathBuf,
    #[arg(long, default_value = "probit")]
    pub link: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub imputations: PathBuf,
    /// glm-logit, glmm-logit-ri, linear or auto.
    #[arg(long, default_value = "auto")]
    pub model: String,
}

#[derive(Args, Debug)]
pub struct PoolArgs {
    /// `fits.json` written by `analyze`.
    #[arg(long)]
    pub fits: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub imputations: PathBuf,
    /// JSON list of `{label, delta}` scenarios.
    #[arg(long)]
    pub grid: PathBuf,
    /// Nominal column to stratify the profiles by.
    #[arg(long)]
    pub by: Option<String>,
    /// JSON plausibility rules.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, default_value = "probit")]
    pub link: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ScenarioArgs {
    /// Built-in design: nonhier-extreme, hier-extreme, nonhier-intermediate, nonhier-continuous.
    #[arg(long, required_unless_present = "config")]
    pub design: Option<String>,
    /// JSON scenario configuration (overrides --design).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replications.
    #[arg(long = "R", alias = "r")]
    pub r: Option<usize>,
    /// Imputations per replication.
    #[arg(long = "M", alias = "m")]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Also write the first replication's complete and masked data.
    #[arg(long)]
    pub emit_data: bool,
}

#[derive(Args, Debug)]
pub struct TraumaArgs {
    /// JSON trauma configuration (default: built-in).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::from(1)
                }
                _ => report_error("usage", &e.to_string(), 1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            return report_error("usage", &format!("cannot set {n} threads: {e}"), 1);
        }
    }
    let mut run = match Run::new(command_name(&cli.command), &cli.out_dir) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let outcome = match &cli.command {
        Command::Fit(a) => commands::fit(a, &mut run),
        Command::Impute(a) => commands::impute(a, &mut run),
        Command::Adjust(a) => commands::adjust(a, &mut run),
        Command::Analyze(a) => commands::analyze(a, &mut run),
        Command::Pool(a) => commands::pool(a, &mut run),
        Command::Diagnose(a) => commands::diagnose(a, &mut run),
        Command::Simulate(a) => commands::simulate(a, &mut run),
        Command::ReplicateTable(a) => commands::replicate_table(a, &mut run),
        Command::Trauma(a) => commands::trauma(a, &mut run),
    };
    match outcome.and_then(|()| run.finish()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Fit(_) => "fit",
        Command::Impute(_) => "impute",
        Command::Adjust(_) => "adjust",
        Command::Analyze(_) => "analyze",
        Command::Pool(_) => "pool",
        Command::Diagnose(_) => "diagnose",
        Command::Simulate(_) => "simulate",
        Command::ReplicateTable(_) => "replicate-table",
        Command::Trauma(_) => "trauma",
    }
}

fn fail(e: manifest::CliError) -> ExitCode {
    let code = if e.is_user_error() { 1 } else { 2 };
    report_error(e.kind(), &e.to_string(), code)
}

fn report_error(kind: &str, message: &str, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message.trim() }, "exit_code": code });
    eprintln!("{body}");
    ExitCode::from(code)
}
