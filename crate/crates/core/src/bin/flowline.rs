use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use flowline_uq::config::RunConfig;
use flowline_uq::pipeline::{Pipeline, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Forward,
    Synth,
    Invert,
    Lcurve,
    Spectrum,
    Sample,
    Predict,
    All,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Forward => Stage::Forward,
            Command::Synth => Stage::Synth,
            Command::Invert => Stage::Invert,
            Command::Lcurve => Stage::Lcurve,
            Command::Spectrum => Stage::Spectrum,
            Command::Sample => Stage::Sample,
            Command::Predict => Stage::Predict,
            Command::All => Stage::All,
        }
    }
}

/// Basal sliding inversion and flux prediction under uncertainty for a 2D ice flowline.
#[derive(Debug, Parser)]
#[command(name = "flowline", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for Hessian actions.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> flowline_uq::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let stage: Stage = cli.command.into();
    let mut pipeline = Pipeline::new(cfg, cli.out, cli.threads)?;
    let t = std::time::Instant::now();
    pipeline.run(stage)?;
    eprintln!(
        "{} finished in {:.1} s; artifacts in {}",
        stage.name(),
        t.elapsed().as_secs_f64(),
        pipeline.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
