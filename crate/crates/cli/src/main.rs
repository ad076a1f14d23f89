mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "heisenlab", version, about = "Page-table side channels and TLB-preloading defenses, simulated")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one scenario once and write its event log, trace and report.
    Run(RunArgs),
    /// Explore schedules and compare traces across secrets.
    Explore(ExploreArgs),
    /// Apply the transaction-splitting pass and print the result.
    Instrument(CommonArgs),
    /// Simulate abort rates under a load preset.
    LoadSim(LoadArgs),
    /// List scenarios, defenses, strategies and load presets.
    List,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Log,
    Trace,
    Report,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Random,
    Exhaustive,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
    /// Size parameter of the scenario (fib n, genome width, page or line count).
    #[arg(long, visible_alias = "param", allow_hyphen_values = true)]
    pub n: Option<i64>,
    #[arg(long)]
    pub defense: Option<String>,
    /// Strategy name, or `all` for every built-in one.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub hyperthreading: Option<bool>,
    #[arg(long, allow_hyphen_values = true)]
    pub init_cntr: Option<i64>,
    #[arg(long)]
    pub func_skp: Option<usize>,
    /// Preload read-write data pages with reads only.
    #[arg(long)]
    pub preload_read_only: bool,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub emit: Vec<Emit>,
    /// Directory for output files; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Index into the secret set.
    #[arg(long, default_value_t = 0)]
    pub secret: usize,
}

#[derive(Args, Debug)]
pub struct ExploreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, visible_alias = "depth")]
    pub schedule_depth: Option<usize>,
    #[arg(long)]
    pub samples: Option<u64>,
    #[arg(long, env = "HEISENLAB_SEED")]
    pub seed: Option<u64>,
    /// State budget of exhaustive exploration.
    #[arg(long)]
    pub budget: Option<u64>,
}

#[derive(Args, Debug)]
pub struct LoadArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Preset name, or `all`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Simulated seconds.
    #[arg(long)]
    pub duration: Option<u64>,
    #[arg(long, env = "HEISENLAB_SEED")]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
