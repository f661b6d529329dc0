//! `kgkam`: runs the spectrum, scan, homological, KAM and decay pipelines from a TOML config.

mod artifact;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use artifact::Artifact;
use config::RunConfig;

/// Invalid or inconsistent configuration (exit status 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Spectrum,
    Scan,
    Homological,
    Kam,
    Decay,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Spectrum => "spectrum",
            Mode::Scan => "scan",
            Mode::Homological => "homological",
            Mode::Kam => "kam",
            Mode::Decay => "decay",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kgkam", version, about = "Reducible KAM tori for Klein-Gordon on the sphere")]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Number of KAM steps (overrides `schedule.steps`).
    #[arg(long)]
    steps: Option<usize>,
}

fn load(cli: &Cli) -> Result<(RunConfig, Vec<u8>)> {
    let bytes = std::fs::read(&cli.config)
        .map_err(|e| ConfigError(format!("reading {}: {e}", cli.config.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| ConfigError(format!("config is not UTF-8: {e}")))?;
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(format!("parsing config: {e}")))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.steps {
        cfg.schedule.steps = Some(k);
    }
    Ok((cfg, bytes))
}

fn run(cli: &Cli) -> Result<bool> {
    let (cfg, bytes) = load(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut art = Artifact::create(&cli.out)?;
    match cli.mode {
        Mode::Spectrum => pipeline::spectrum(&cfg, &mut art),
        Mode::Scan => pipeline::scan(&cfg, &mut art),
        Mode::Homological => pipeline::homological(&cfg, &mut art),
        Mode::Kam => pipeline::kam(&cfg, &mut art, cfg.schedule.steps.unwrap_or(3)),
        Mode::Decay => pipeline::decay(&cfg, &mut art),
    }
    .with_context(|| format!("{} pipeline", cli.mode.name()))?;
    art.finish(cli.mode.name(), &cli.config, &bytes, &cfg, cli.threads)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("kgkam: acceptance checks failed; see {}/manifest.json", cli.out.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("kgkam: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
