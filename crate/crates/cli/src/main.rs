//! `jhol`: batch front end for the J-holomorphic disk toolkit.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use jhol_core::Error;

use crate::commands::Context;
use crate::config::Config;
use crate::output::{Meta, Output, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Validate,
    SolveDisk,
    Metric,
    Completeness,
    SchwarzScan,
    GaugeScan,
    Linking,
    OperatorsSelftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::SolveDisk => "solve-disk",
            Command::Metric => "metric",
            Command::Completeness => "completeness",
            Command::SchwarzScan => "schwarz-scan",
            Command::GaugeScan => "gauge-scan",
            Command::Linking => "linking",
            Command::OperatorsSelftest => "operators-selftest",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "jhol", version, about = "J-holomorphic disks, Kobayashi-Royden estimates and linking invariants")]
struct Cli {
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; records go to stdout without one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `resolution` in the config.
    #[arg(long)]
    resolution: Option<usize>,
    /// Overrides `epsilon` in the config.
    #[arg(long)]
    epsilon: Option<f64>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        2
    } else if e.is_out_of_regime() {
        3
    } else {
        4
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (mut cfg, dir) = match &cli.config {
        Some(p) => Config::load(p)?,
        None => (Config::default(), PathBuf::new()),
    };
    cfg.seed = cli.seed.or(cfg.seed);
    cfg.resolution = cli.resolution.or(cfg.resolution);
    cfg.epsilon = cli.epsilon.or(cfg.epsilon);
    cfg.solve.validate()?;
    let structure = cfg.structure(&dir)?;
    let meta = Meta {
        command: cli.command.name(),
        version: VERSION,
        resolution: cfg.resolution(),
        epsilon: structure.epsilon(),
        mu_bound: commands::mu_bound(&structure),
        seed: cfg.seed,
    };
    let ctx = Context::new(&cfg, structure)?;
    let mut out = Output::new(meta);
    let result = match cli.command {
        Command::Validate => commands::validate_structure(&ctx, &mut out),
        Command::SolveDisk => commands::solve_disk(&ctx, &mut out),
        Command::Metric => commands::metric(&ctx, &mut out),
        Command::Completeness => commands::completeness(&ctx, &mut out),
        Command::SchwarzScan => commands::schwarz_scan(&ctx, &mut out),
        Command::GaugeScan => commands::gauge(&ctx, &mut out),
        Command::Linking => commands::linking(&ctx, &mut out),
        Command::OperatorsSelftest => commands::operators_selftest(&ctx, &mut out),
    };
    let summary = match &result {
        Ok(s) => serde_json::json!({ "meta": &out.meta, "status": "ok", "records": out.record_count(), "result": s }),
        Err(e) => serde_json::json!({
            "meta": &out.meta,
            "status": "error",
            "exit_code": exit_code(e),
            "error": e.to_string(),
            "records": out.record_count(),
        }),
    };
    out.write(cli.out.as_deref(), &summary)?;
    result.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jhol {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
