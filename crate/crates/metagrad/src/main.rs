use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metagrad::dropgrad::NoiseMode;
use metagrad::harness::{
    cmd_ablate_layers, cmd_eval, cmd_sweep, cmd_train, fmt_real, parse_config, RunConfig,
};
use metagrad::Result;

#[derive(Parser)]
#[command(
    name = "metagrad",
    about = "Meta-learning lab: MAML-family training with inner-loop gradient dropout",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run and write metrics.csv + best.ckpt.
    Train {
        /// Configuration file (flat `key = value` lines; every key optional).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on fresh meta-test episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of test episodes.
        #[arg(long)]
        episodes: usize,
        /// Sample test tasks from the family's shifted (out-of-domain) range.
        #[arg(long)]
        cross_domain: bool,
    },
    /// Train and evaluate a (mode, p, seed) grid; one report.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated dropout rates, e.g. 0,0.1,0.2.
        #[arg(long)]
        p_list: String,
        /// Comma-separated noise modes, e.g. binary,gaussian.
        #[arg(long)]
        modes: String,
        /// Seeds per cell, counting up from the config's seed.
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one run per layer selector.
    AblateLayers {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated selectors: none, all, or '+'-joined labels (L0+OUT).
        #[arg(long)]
        selectors: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let outcome = cmd_train(&cfg)?;
            println!(
                "trained {}: best meta-val loss {} at epoch {} ({} epochs run)",
                outcome.run_id,
                fmt_real(outcome.best_val_loss),
                outcome.best_epoch,
                outcome.epochs_run
            );
            println!("metrics:    {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            config,
            seed,
            episodes,
            cross_domain,
        } => {
            let cfg = load(&config, seed, None)?;
            let (stats, report) = cmd_eval(&checkpoint, &cfg, episodes, cross_domain)?;
            let domain = if cross_domain { "cross-domain" } else { "in-domain" };
            println!(
                "meta-test {} ({} episodes): loss {} ± {}",
                domain,
                stats.n,
                fmt_real(stats.mean_loss),
                fmt_real(stats.ci95_loss)
            );
            if let (Some(m), Some(c)) = (stats.mean_metric, stats.ci95_metric) {
                println!("accuracy: {} ± {}", fmt_real(m), fmt_real(c));
            }
            println!("report: {}", report.display());
        }
        Command::Sweep {
            config,
            p_list,
            modes,
            seeds,
            out,
        } => {
            let cfg = load(&config, None, None)?;
            let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let p_list = parse_f64_list(&p_list)?;
            let modes = parse_mode_list(&modes)?;
            let report = cmd_sweep(&cfg, &modes, &p_list, seeds, &out_dir)?;
            println!("report: {}", report.display());
        }
        Command::AblateLayers {
            config,
            selectors,
            out,
        } => {
            let cfg = load(&config, None, None)?;
            let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let selectors: Vec<String> = selectors
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            let report = cmd_ablate_layers(&cfg, &selectors, &out_dir)?;
            println!("report: {}", report.display());
        }
    }
    Ok(())
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|e| {
                metagrad::Error::InvalidConfig(format!("bad rate {t:?} in p-list: {e}"))
            })
        })
        .collect()
}

fn parse_mode_list(s: &str) -> Result<Vec<NoiseMode>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(NoiseMode::parse)
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
