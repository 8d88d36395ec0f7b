mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{CliError, Outcome};
use config::{parse_config, to_toml, RunConfig};
use output::OutputDir;

/// Statistical laboratory for weakly nonlinear three-wave systems.
#[derive(Parser)]
#[command(name = "wavekin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `ensemble.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a random-phase ensemble and record spectra and fields.
    Simulate(Common),
    /// Evolve the spectrum under the kinetic equation.
    Kinetic(Common),
    /// Evolve the one-mode intensity PDF toward its stationary law.
    Pdf(Common),
    /// Evolve the joint PDF of a few active modes.
    Peierls(Common),
    /// Phase drift and dispersion of a tracked ensemble, plus the toy demo.
    Phase(Common),
    /// Run the expansion identity battery.
    Verify(Common),
    /// Run the numbered acceptance criteria.
    Accept(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Simulate(_) => "simulate",
            Self::Kinetic(_) => "kinetic",
            Self::Pdf(_) => "pdf",
            Self::Peierls(_) => "peierls",
            Self::Phase(_) => "phase",
            Self::Verify(_) => "verify",
            Self::Accept(_) => "accept",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::Simulate(c)
            | Self::Kinetic(c)
            | Self::Pdf(c)
            | Self::Peierls(c)
            | Self::Phase(c)
            | Self::Verify(c)
            | Self::Accept(c) => c,
        }
    }
}

fn workers_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("WAVEKIN_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(config::ConfigError::Range {
                key: "WAVEKIN_WORKERS".into(),
                message: format!("must be a positive integer, got {v:?}"),
            }
            .into()),
        },
        Err(_) => Ok(None),
    }
}

fn run(cmd: &Command) -> Result<bool, CliError> {
    let started = Instant::now();
    let common = cmd.common();
    let text = std::fs::read_to_string(&common.config)?;
    let mut cfg: RunConfig = parse_config(&text)?;
    cfg.workers = workers_from_env()?;
    if let Some(w) = cfg.workers {
        // fails only if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }
    let seed = common.seed.unwrap_or(cfg.ensemble.master_seed);
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    let mut out = OutputDir::create(&dir)?;

    let Outcome { report, passed } = match cmd {
        Command::Simulate(_) => commands::simulate(&cfg, seed, &mut out)?,
        Command::Kinetic(_) => commands::kinetic_run(&cfg, &mut out)?,
        Command::Pdf(_) => commands::pdf(&cfg, &mut out)?,
        Command::Peierls(_) => commands::peierls(&cfg, &mut out)?,
        Command::Phase(_) => commands::phase(&cfg, seed, &mut out)?,
        Command::Verify(_) => commands::verify(&cfg, seed, &mut out)?,
        Command::Accept(_) => commands::accept(&cfg, common.seed, &mut out)?,
    };
    out.write_json(
        "report.json",
        &json!({ "command": cmd.name(), "passed": passed, "results": report }),
    )?;

    let manifest = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_path": common.config,
        "config": to_toml(&cfg),
        "seeds": { "master": seed, "override": common.seed },
        "workers": cfg.workers.unwrap_or_else(rayon::current_num_threads),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "files": out.files(),
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    std::fs::write(out.path().join("manifest.json"), bytes)?;
    eprintln!(
        "{}: {} -> {}",
        cmd.name(),
        if passed { "ok" } else { "failed" },
        out.path().display()
    );
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
