use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eos_core::harness::commands::{
    cmd_oracle_check, cmd_quad, cmd_sweep, cmd_taylor_switch, cmd_track_direction, cmd_train, CommandReport, Context,
};
use eos_core::harness::ExperimentConfig;
use eos_core::Error;

/// Relative output directories are placed under this directory when set.
const OUT_ROOT_ENV: &str = "EOS_OUT_ROOT";

#[derive(Parser)]
#[command(name = "eos", version, about = "Edge-of-stability experiments for non-Euclidean gradient descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the initialization, Frank-Wolfe and simulation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sharpness every N steps (0 disables).
    #[arg(long, global = true)]
    cadence: Option<usize>,
    /// Worker threads for Frank-Wolfe restarts and sweep cells.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train once and log every step.
    Train,
    /// Stability diagram of a quadratic around 2/S.
    Quad,
    /// Train over a grid of step sizes and seeds.
    Sweep,
    /// Compare training with its frozen quadratic model from switch steps.
    TaylorSwitch,
    /// Follow the curvature along a frozen sharpness maximizer.
    TrackDirection,
    /// Frank-Wolfe sharpness against an exact oracle.
    OracleCheck,
}

fn resolve_out(cli_out: Option<&Path>, config_out: &Path) -> PathBuf {
    let out = cli_out.unwrap_or(config_out);
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn execute(cli: &Cli) -> Result<CommandReport, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    })?;
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    if let Some(c) = cli.cadence {
        config.measurement.cadence = c;
    }
    config.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = resolve_out(cli.out.as_deref(), &config.output.dir);
    let ctx = Context::new(config, base, out);
    match cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Quad => cmd_quad(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::TaylorSwitch => cmd_taylor_switch(&ctx),
        Command::TrackDirection => cmd_track_direction(&ctx),
        Command::OracleCheck => cmd_oracle_check(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for a in &report.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::from(report.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                _ => 1,
            })
        }
    }
}
