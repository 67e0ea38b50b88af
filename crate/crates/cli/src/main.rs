use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use loft_lab_core::harness::check::run_checks;
use loft_lab_core::harness::report::render_report;
use loft_lab_core::harness::{emit_outputs, load_config, run, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(
    name = "loft-lab",
    version,
    about = "Filter-partitioned pretraining experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment a config describes.
    Run {
        config: PathBuf,
        /// Replace the config's seed list with this single master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config's output_dir.
        #[arg(long, env = "LOFT_LAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Run a theory-mode config.
    Theory {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "LOFT_LAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Run the quick invariant and oracle suites.
    Check,
    /// Print accuracy, theory and communication tables from an output directory.
    Report { outdir: PathBuf },
}

fn output_dir(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, require: Option<Mode>) -> anyhow::Result<bool> {
    let mut cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(mode) = require {
        if cfg.mode != mode {
            bail!("{} is not a theory config", config.display());
        }
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let outdir = output_dir(out, &cfg);
    let bundle = run(&cfg)?;
    let manifest = emit_outputs(&bundle, &outdir)?;
    for f in &manifest.files {
        println!("{}/{} ({} rows, sha256 {})", outdir.display(), f.file, f.rows, f.sha256);
    }
    for f in &bundle.failed {
        eprintln!("cell {} failed: {}", f.cell, f.error);
    }
    Ok(bundle.all_ok())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => execute(config, seed, out, None),
        Command::Theory { config, seed, out } => execute(config, seed, out, Some(Mode::Theory)),
        Command::Check => {
            let outcomes = run_checks();
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<24} {:>7.2}s  {}", o.name, o.seconds, o.detail);
            }
            Ok(outcomes.iter().all(|o| o.passed))
        }
        Command::Report { outdir } => render_report(&outdir)
            .map(|text| {
                print!("{text}");
                true
            })
            .map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
