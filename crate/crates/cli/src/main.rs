//! Command-line front end: single runs, sweeps, report assembly and
//! embedding export.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use casa_core::controller::{run, Mode, Setup};
use casa_core::report::{emit_reports, export_embeddings, run_sweep, write_run, SWEEP_CSV};
use casa_core::{parse_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "casa", version, about = "Continual active learning with pseudo-domain discovery")]
struct Cli {
    /// Root for default output locations; overrides `output_dir` from the config.
    #[arg(long, env = "CASA_OUT_ROOT", global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mode on one seed and write its artifacts and reports.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "casa")]
        mode: Mode,
        /// Defaults to the first seed listed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<root>/<mode>/seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every mode over the config's parameter grid and seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "casa,naive")]
        modes: Vec<Mode>,
        /// Sweep directory; defaults to `<root>/sweep`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild summary, curve and purity tables and the manifest of run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Write the style embedding of every generated sample as CSV.
    ExportEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => parse_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let root = |cfg: &ExperimentConfig| cli.out_root.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match &cli.command {
        Command::Run { config, mode, seed, out } => {
            let cfg = load(config.as_deref())?;
            let seed = pick_seed(&cfg, *seed);
            let dir = out
                .clone()
                .unwrap_or_else(|| root(&cfg).join(mode.as_str()).join(format!("seed{seed}")));
            let setup = Setup::new(&cfg, seed).context("preparing experiment")?;
            let result = run(&setup, *mode).with_context(|| format!("{mode} run, seed {seed}"))?;
            write_run(&result, &cfg, &dir)?;
            emit_reports(&dir)?;
            let mae: Vec<String> = result.final_mae.iter().map(|v| format!("{v:.3}")).collect();
            println!(
                "{mode} seed {seed}: labels {}/{} final MAE [{}] -> {}",
                result.labels_used,
                result.budget,
                mae.join(", "),
                dir.display()
            );
        }
        Command::Sweep { config, modes, out } => {
            let cfg = load(config.as_deref())?;
            let dir = out.clone().unwrap_or_else(|| root(&cfg).join("sweep"));
            let summary = run_sweep(&cfg, modes, Some(&dir))?;
            let failed: usize = summary.cells.iter().map(|c| c.failures.len()).sum();
            println!(
                "{} cells, {failed} failed runs -> {}",
                summary.cells.len(),
                dir.join(SWEEP_CSV).display()
            );
            if failed > 0 {
                bail!("{failed} sweep runs failed; see {}", dir.join(SWEEP_CSV).display());
            }
        }
        Command::Report { dirs } => {
            for d in dirs {
                let files = emit_reports(d).with_context(|| format!("reporting {}", d.display()))?;
                println!("{}: {} files", d.display(), files.len());
            }
        }
        Command::ExportEmbeddings { config, seed, out } => {
            let cfg = load(config.as_deref())?;
            let seed = pick_seed(&cfg, *seed);
            let setup = Setup::new(&cfg, seed).context("preparing experiment")?;
            let n = export_embeddings(&setup, out)?;
            println!("{n} embeddings -> {}", out.display());
        }
    }
    Ok(())
}
