//! `threshold-lab`: stationary solves, trajectories, simulations and sweeps
//! for server farms with threshold-based sleep/wake control.
//!
//! Every option can also be given in a `--config` file as `key = value`
//! (flag names with `_` for `-`); flags override the file.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RawConfig, RunConfig};
use exit::CliError;

/// Environment variable bounding the worker thread count.
const THREADS_VAR: &str = "THRESHOLD_LAB_THREADS";

#[derive(Parser)]
#[command(
    name = "threshold-lab",
    version,
    about = "Supermarket server farms with threshold sleep/wake control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary mean-field distribution and performance measures (JSON).
    Solve(Flags),
    /// Mean-field trajectory from the empty system (CSV).
    Ode(Flags),
    /// Finite-N simulation ensemble (JSON report and per-batch CSV).
    Simulate(Flags),
    /// Simulated vs mean-field mean queue length over server counts (CSV).
    Compare(Flags),
    /// Performance measures over a parameter grid (CSV).
    Sweep(Flags),
    /// Largest threshold meeting a queue-length or sojourn bound (JSON).
    #[command(name = "optimal-m")]
    OptimalM(Flags),
}

#[derive(Args)]
struct Flags {
    /// File of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-server arrival rate [0.39].
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    /// Service rate [1].
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<String>,
    /// Queues sampled per arrival [2].
    #[arg(long, allow_hyphen_values = true)]
    d: Option<String>,
    /// Wake threshold [2].
    #[arg(long, allow_hyphen_values = true)]
    m: Option<String>,
    /// Servers in the simulation [100].
    #[arg(long, allow_hyphen_values = true)]
    n_servers: Option<String>,
    /// Root seed of the random streams [1].
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Warm-up time [10 / (mu - lambda)].
    #[arg(long, allow_hyphen_values = true)]
    t_warmup: Option<String>,
    /// Measurement time [about 1e6 arrivals].
    #[arg(long, allow_hyphen_values = true)]
    t_measure: Option<String>,
    /// Batches per replication [20].
    #[arg(long, allow_hyphen_values = true)]
    n_batches: Option<String>,
    /// Independent replications [1].
    #[arg(long, allow_hyphen_values = true)]
    n_replications: Option<String>,
    /// Abort a simulation when any queue exceeds this length.
    #[arg(long, allow_hyphen_values = true)]
    queue_cap: Option<String>,
    /// `without` or `with` replacement [without].
    #[arg(long)]
    sampling: Option<String>,
    /// `uniform` or `prefer-working` [uniform].
    #[arg(long)]
    tie_break: Option<String>,
    /// Maximum working levels for the solvers; also the `ode` truncation [m + 30].
    #[arg(long, allow_hyphen_values = true)]
    k_max: Option<String>,
    /// ODE local error tolerance per step.
    #[arg(long, allow_hyphen_values = true)]
    tol_ode: Option<String>,
    /// Fixed-point bisection tolerance.
    #[arg(long, allow_hyphen_values = true)]
    tol_fixedpoint: Option<String>,
    /// `ode` end time [50].
    #[arg(long, allow_hyphen_values = true)]
    t_end: Option<String>,
    /// `ode` output spacing [0.5].
    #[arg(long, allow_hyphen_values = true)]
    output_interval: Option<String>,
    /// `sweep` parameter: lambda, mu, d, m or n_servers.
    #[arg(long)]
    param: Option<String>,
    /// `sweep` values: `a,b,c` or `start:stop:step`.
    #[arg(long, allow_hyphen_values = true)]
    values: Option<String>,
    /// `sweep` evaluation: `fixedpoint` or `simulation` [fixedpoint].
    #[arg(long)]
    method: Option<String>,
    /// `compare` server counts, comma separated [20,50,100,200,500].
    #[arg(long, allow_hyphen_values = true)]
    n: Option<String>,
    /// `optimal-m` bound on the criterion.
    #[arg(long, allow_hyphen_values = true)]
    bound: Option<String>,
    /// `optimal-m` criterion: `eq` or `es` [eq].
    #[arg(long)]
    criterion: Option<String>,
    /// `optimal-m` largest threshold searched [50].
    #[arg(long, allow_hyphen_values = true)]
    m_max: Option<String>,
    /// Output file [stdout].
    #[arg(long)]
    out: Option<String>,
    /// `simulate` per-batch CSV [next to --out].
    #[arg(long)]
    batches_csv: Option<String>,
}

impl Flags {
    fn raw(&self) -> Result<RawConfig, CliError> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        let flags = [
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("d", &self.d),
            ("m", &self.m),
            ("n_servers", &self.n_servers),
            ("seed", &self.seed),
            ("t_warmup", &self.t_warmup),
            ("t_measure", &self.t_measure),
            ("n_batches", &self.n_batches),
            ("n_replications", &self.n_replications),
            ("queue_cap", &self.queue_cap),
            ("sampling", &self.sampling),
            ("tie_break", &self.tie_break),
            ("k_max", &self.k_max),
            ("tol_ode", &self.tol_ode),
            ("tol_fixedpoint", &self.tol_fixedpoint),
            ("t_end", &self.t_end),
            ("output_interval", &self.output_interval),
            ("param", &self.param),
            ("values", &self.values),
            ("method", &self.method),
            ("n", &self.n),
            ("bound", &self.bound),
            ("criterion", &self.criterion),
            ("m_max", &self.m_max),
            ("out", &self.out),
            ("batches_csv", &self.batches_csv),
        ];
        let mut overrides = RawConfig::default();
        for (key, value) in flags {
            if let Some(v) = value {
                overrides.set(key, v)?;
            }
        }
        raw.overlay(&overrides);
        Ok(raw)
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(text) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads = match text.trim().parse::<usize>() {
        Ok(n) if n >= 1 => n,
        _ => {
            return Err(CliError::invalid(format!(
                "invalid value `{text}` for {THREADS_VAR}"
            )))
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::invalid(format!("cannot start thread pool: {e}")))
}

type Action = fn(&RunConfig) -> Result<(), CliError>;

fn run(command: Command) -> Result<(), CliError> {
    init_threads()?;
    let (flags, action): (&Flags, Action) = match &command {
        Command::Solve(f) => (f, commands::solve_cmd),
        Command::Ode(f) => (f, commands::ode_cmd),
        Command::Simulate(f) => (f, commands::simulate_cmd),
        Command::Compare(f) => (f, commands::compare_cmd),
        Command::Sweep(f) => (f, commands::sweep_cmd),
        Command::OptimalM(f) => (f, commands::optimal_m_cmd),
    };
    let cfg = RunConfig::from_raw(&flags.raw()?)?;
    action(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::INVALID_INPUT
            } else {
                exit::OK
            });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
