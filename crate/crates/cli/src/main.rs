use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ancilla_qpd::estimate::ThetaGrid;
use ancilla_qpd::weights::Objective;
use ancilla_qpd_cli::commands::{self, ScopeChoice};
use ancilla_qpd_cli::config::{preset, ConventionSpec, RunConfig};
use ancilla_qpd_cli::report;
use ancilla_qpd_cli::CliError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ancilla-qpd", version, about = "Ancilla-based quasiprobability estimation of multi-time correlations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Any,
    MinInf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Auto,
    Full,
    Final,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Standard,
    Literal,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: two-time, three-time, qpd-two-time, qpd, projective.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config's θ (radians).
    #[arg(long)]
    theta: Option<f64>,
    /// RNG seed; falls back to the config, then ANCILLA_QPD_SEED, then 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trajectories.
    #[arg(long)]
    n: Option<usize>,
    /// Output file (or directory for fig3); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON noise model.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, value_enum)]
    convention: Option<ConventionArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for quasiprobability weights of a built-in measurement set.
    Weights {
        #[arg(long)]
        set: String,
        #[arg(long = "A", default_value = "Z")]
        a: String,
        #[arg(long = "B", default_value = "I")]
        b: String,
        #[arg(long, value_enum, default_value = "min-inf")]
        objective: ObjectiveArg,
        #[arg(long, value_enum, default_value = "auto")]
        scope: ScopeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact values for a configuration.
    Oracle(RunArgs),
    /// Sample trajectories to CSV.
    Sample(RunArgs),
    /// Estimate correlations or QPDs from a trajectory CSV.
    Reconstruct {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        trajectories: PathBuf,
        /// Precomputed weights JSON; derived from the config when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Leggett–Garg parameter, exact and sampled.
    Lgi(RunArgs),
    /// θ sweep of the configured estimator, written as CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        start: Option<f64>,
        #[arg(long)]
        stop: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Full qubit reproduction report (JSON and CSV files).
    Fig3 {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "fig3_out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        convention: ConventionArg,
        #[arg(long)]
        start: Option<f64>,
        #[arg(long)]
        stop: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn load(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match (&run.config, &run.preset) {
        (Some(p), _) => RunConfig::from_path(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(CliError::Config("one of --config or --preset is required".into())),
    };
    if let Some(t) = run.theta {
        cfg = cfg.with_theta(t);
    }
    if let Some(path) = &run.noise {
        cfg.noise = Some(commands::read_noise(path)?);
    }
    if let Some(c) = run.convention {
        cfg.ry_convention = match c {
            ConventionArg::Standard => ConventionSpec::Standard,
            ConventionArg::Literal => ConventionSpec::Literal,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn n_of(run: &RunArgs, cfg: &RunConfig) -> usize {
    run.n.or(cfg.n_trajectories).unwrap_or(10_000)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut s = std::io::stdout().lock();
            s.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn grid(base: Option<ThetaGrid>, start: Option<f64>, stop: Option<f64>, count: Option<usize>) -> ThetaGrid {
    let g = base.unwrap_or_else(report::default_grid);
    ThetaGrid {
        start: start.unwrap_or(g.start),
        stop: stop.unwrap_or(g.stop),
        count: count.unwrap_or(g.count),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Weights { set, a, b, objective, scope, out } => {
            let objective = match objective {
                ObjectiveArg::Any => Objective::AnyFeasible,
                ObjectiveArg::MinInf => Objective::MinInfNorm,
            };
            let scope = match scope {
                ScopeArg::Auto => ScopeChoice::Auto,
                ScopeArg::Full => ScopeChoice::Full,
                ScopeArg::Final => ScopeChoice::Final,
            };
            let (w, warning) = commands::cmd_weights(&set, &b, &a, objective, scope)?;
            if let Some(msg) = warning {
                eprintln!("warning: {msg}");
            }
            emit(out.as_deref(), &commands::to_json(&w))
        }
        Command::Oracle(run) => {
            let cfg = load(&run)?;
            emit(run.out.as_deref(), &commands::to_json(&commands::cmd_oracle(&cfg)?))
        }
        Command::Sample(run) => {
            let cfg = load(&run)?;
            let seed = commands::resolve_seed(run.seed, cfg.seed)?;
            let records = commands::cmd_sample(&cfg, n_of(&run, &cfg), seed)?;
            let mut buf = Vec::new();
            commands::write_trajectories(&mut buf, &records, cfg.steps.len())?;
            emit(run.out.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::Reconstruct { run, trajectories, weights } => {
            let cfg = load(&run)?;
            let file = std::fs::File::open(&trajectories)
                .map_err(|e| CliError::Io(format!("{}: {e}", trajectories.display())))?;
            let records = commands::read_trajectories(file)?;
            let w = weights.as_deref().map(commands::read_weights).transpose()?;
            emit(run.out.as_deref(), &commands::to_json(&commands::cmd_reconstruct(&cfg, &records, w)?))
        }
        Command::Lgi(run) => {
            let cfg = load(&run)?;
            let seed = commands::resolve_seed(run.seed, cfg.seed)?;
            emit(run.out.as_deref(), &commands::to_json(&commands::cmd_lgi(&cfg, n_of(&run, &cfg), seed)?))
        }
        Command::Sweep { run, start, stop, count } => {
            let cfg = load(&run)?;
            let seed = commands::resolve_seed(run.seed, cfg.seed)?;
            let g = grid(cfg.theta_grid, start, stop, count);
            let rows = commands::cmd_sweep(&cfg, &g, n_of(&run, &cfg), seed)?;
            let mut buf = Vec::new();
            commands::write_sweep_csv(&mut buf, &rows)?;
            emit(run.out.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::Fig3 { seed, n, out, convention, start, stop, count } => {
            let seed = commands::resolve_seed(seed, None)?;
            let conv = match convention {
                ConventionArg::Standard => ConventionSpec::Standard,
                ConventionArg::Literal => ConventionSpec::Literal,
            };
            let started = Instant::now();
            let rep = report::run_fig3(n, seed, &grid(None, start, stop, count), conv.into())?;
            report::write_fig3(&out, &rep)?;
            for c in &rep.checks {
                eprintln!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.criterion, c.detail);
            }
            eprintln!("wrote {} in {:.2?}", out.display(), started.elapsed());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
