//! Command-line driver for robagg: simulation studies, shard aggregation and
//! detection, and quick self-checks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod selfcheck;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use robagg::distsim::{run_study, sig6};
use robagg::{tau_c, ModelKind};

pub use config::{parse_config, Overrides};
pub use error::{CliError, Result};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "ROBAGG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "robagg", version, about = "Robust one-shot aggregation of distributed M-estimators")]
pub struct Cli {
    /// Print progress and timings to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    /// Worker threads (default: $ROBAGG_THREADS, else one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo study and report BIAS, SD, ASE, CP, RE and HR.
    Simulate(SimulateArgs),
    /// Fit one CSV shard per server, aggregate, and screen the servers.
    FitAggregateDetect(ShardArgs),
    /// Print the efficiency constant tau_c.
    Tau {
        #[arg(long, allow_negative_numbers = true)]
        c: f64,
    },
    /// Run fast invariant self-tests.
    Check,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Study configuration file (flat TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Number of servers.
    #[arg(long = "k", visible_alias = "K")]
    pub k: Option<usize>,
    /// Observations per server.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub c: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// none, omniscient, gaussian or bitflip.
    #[arg(long)]
    pub contamination: Option<String>,
    /// Number of contaminated servers (default floor(K^(1/4))).
    #[arg(long)]
    pub count: Option<usize>,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replicate, per-server detection CSV path.
    #[arg(long)]
    pub detection_out: Option<PathBuf>,
    /// Validate the configuration and exit without computing or writing.
    #[arg(long)]
    pub dry_run: bool,
}

impl SimulateArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            k: self.k,
            n: self.n,
            c: self.c,
            alpha: self.alpha,
            seed: self.seed,
            replicates: self.replicates,
            contamination: self.contamination.clone(),
            count: self.count,
        }
    }
}

#[derive(Debug, Args)]
pub struct ShardArgs {
    /// One CSV file per server, each with a `y` column and the same header.
    #[arg(required = true)]
    pub shards: Vec<PathBuf>,
    #[arg(long, default_value = "logistic")]
    pub model: String,
    #[arg(long, default_value_t = 1.345, allow_negative_numbers = true)]
    pub c: f64,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Aggregation CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Detection CSV path.
    #[arg(long)]
    pub detection_out: Option<PathBuf>,
    /// Read and validate the shards and exit without fitting or writing.
    #[arg(long)]
    pub dry_run: bool,
}

/// Resolves the worker-thread count from the flag, then the environment.
pub fn thread_count(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let n = match (flag, env) {
        (Some(n), _) => n,
        (None, Some(v)) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        (None, None) => return Ok(None),
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be >= 1".into()));
    }
    Ok(Some(n))
}

fn note(verbose: bool, msg: impl AsRef<str>) {
    if verbose {
        eprintln!("{}", msg.as_ref());
    }
}

/// Runs a parsed command line, writing the human report to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let env = std::env::var(THREADS_ENV).ok();
    if let Some(n) = thread_count(cli.threads, env.as_deref())? {
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let io = |source| CliError::Io { path: PathBuf::from("<stdout>"), source };
    let verbose = cli.verbose;
    match cli.command {
        Command::Simulate(args) => simulate(&args, verbose, stdout),
        Command::FitAggregateDetect(args) => fit_aggregate_detect(&args, verbose, stdout),
        Command::Tau { c } => {
            if !(c > 0.0) {
                return Err(CliError::Usage(format!("c must be positive, got {c}")));
            }
            writeln!(stdout, "c = {c}  tau_c = {}", sig6(tau_c(c))).map_err(io)
        }
        Command::Check => {
            let outcomes = selfcheck::run_checks();
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                let tag = if o.passed { "ok  " } else { "FAIL" };
                writeln!(stdout, "{tag} {}  {}", o.name, o.detail).map_err(io)?;
            }
            if failed > 0 {
                return Err(CliError::SelfCheck { failed, total: outcomes.len() });
            }
            Ok(())
        }
    }
}

fn simulate(args: &SimulateArgs, verbose: bool, stdout: &mut dyn std::io::Write) -> Result<()> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?,
        None => String::new(),
    };
    let cfg = parse_config(&text, &args.overrides())?;
    let io = |source| CliError::Io { path: PathBuf::from("<stdout>"), source };
    if args.dry_run {
        return writeln!(
            stdout,
            "configuration ok: {} model, K = {}, n = {}, c = {}, {} replicates, contamination = {}",
            cfg.model, cfg.k, cfg.n, cfg.c, cfg.replicates, cfg.contamination.kind
        )
        .map_err(io);
    }
    let start = Instant::now();
    let metrics = run_study(&cfg)?;
    note(verbose, format!("study finished in {:.2}s", start.elapsed().as_secs_f64()));

    let mut artifacts = Vec::new();
    if let Some(p) = &args.out {
        artifacts.push((p.as_path(), metrics.to_csv()));
    }
    if let Some(p) = &args.detection_out {
        artifacts.push((p.as_path(), pipeline::simulation_detection_csv(&metrics)));
    }
    pipeline::write_artifacts(&artifacts)?;
    for (p, _) in &artifacts {
        note(verbose, format!("wrote {}", p.display()));
    }
    write!(stdout, "{}", pipeline::simulation_report(&metrics, &cfg)).map_err(io)
}

fn fit_aggregate_detect(args: &ShardArgs, verbose: bool, stdout: &mut dyn std::io::Write) -> Result<()> {
    let model = args.model.parse::<ModelKind>()?;
    let io = |source| CliError::Io { path: PathBuf::from("<stdout>"), source };
    let shards = ingest::read_shards(&args.shards)?;
    let rows: usize = shards.iter().map(|s| s.observations.len()).sum();
    note(verbose, format!("read {} shards, {rows} rows", shards.len()));
    if args.dry_run {
        robagg::HuberConfig::with_c(args.c)?;
        if !(args.alpha > 0.0 && args.alpha < 1.0) {
            return Err(CliError::Usage(format!("alpha must lie strictly between 0 and 1, got {}", args.alpha)));
        }
        return writeln!(
            stdout,
            "inputs ok: {} shards, {rows} rows, covariates {:?}",
            shards.len(),
            shards[0].covariates
        )
        .map_err(io);
    }
    let start = Instant::now();
    let analysis = pipeline::fit_aggregate_detect(&shards, model, args.c, args.alpha)?;
    note(verbose, format!("fit and aggregation took {:.2}s", start.elapsed().as_secs_f64()));

    let mut artifacts = Vec::new();
    if let Some(p) = &args.out {
        artifacts.push((p.as_path(), analysis.to_csv()));
    }
    if let Some(p) = &args.detection_out {
        artifacts.push((p.as_path(), analysis.detection.to_csv()));
    }
    pipeline::write_artifacts(&artifacts)?;
    for (p, _) in &artifacts {
        note(verbose, format!("wrote {}", p.display()));
    }
    write!(stdout, "{}", analysis.to_table()).map_err(io)
}
