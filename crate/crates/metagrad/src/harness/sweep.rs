//! Grid runners. A sweep trains and evaluates one run per (mode, p, seed)
//! cell; a layer ablation does the same per layer selector with a fixed
//! seed, so every cell shares the task pool and only the noise placement
//! differs. Cells are independent; a failed cell is recorded and the grid
//! continues.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::evalcmd::cmd_eval;
use super::metrics::{write_report, ReportRow};
use super::train::cmd_train;
use crate::dropgrad::{NoiseConfig, NoiseMode};
use crate::error::{Error, Result};

fn blank_stats_row(
    run_id: String,
    config: &RunConfig,
    mode: &str,
    p: f64,
    selector: String,
    note: String,
) -> ReportRow {
    ReportRow {
        run_id,
        seed: config.seed,
        algorithm: config.meta.algorithm,
        noise_mode: mode.to_string(),
        p,
        selector,
        domain: "in",
        episodes: 0,
        mean_loss: None,
        ci95_loss: None,
        mean_metric: None,
        ci95_metric: None,
        note,
    }
}

/// Train one cell and evaluate its best checkpoint in-domain with
/// `eval_episodes` episodes.
fn run_cell(config: &RunConfig) -> Result<super::EvalStats> {
    let outcome = cmd_train(config)?;
    let (stats, _) = cmd_eval(
        &outcome.checkpoint_path,
        config,
        config.eval_episodes,
        false,
    )?;
    Ok(stats)
}

/// Rate sweep: one run per (mode, p, seed index), seeds counting up from the
/// base config's seed. Emits `report.csv` in `out_dir` with raw (mode, p)
/// cell labels; per-cell outputs land in `out_dir/<cell id>/`.
pub fn cmd_sweep(
    base: &RunConfig,
    modes: &[NoiseMode],
    p_list: &[f64],
    n_seeds: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    for &p in p_list {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidRate(p));
        }
    }
    if modes.is_empty() || p_list.is_empty() || n_seeds == 0 {
        return Err(Error::InvalidConfig(
            "sweep needs at least one mode, one rate, and one seed".to_string(),
        ));
    }
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut rows = Vec::with_capacity(modes.len() * p_list.len() * n_seeds);
    for &mode in modes {
        for &p in p_list {
            for s in 0..n_seeds {
                let seed = base.seed + s as u64;
                let cell_id = format!(
                    "{}-{}-p{}-s{}",
                    base.meta.algorithm.as_str(),
                    mode.as_str(),
                    p,
                    seed
                );
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.set_noise(mode, p)?;
                cfg.out_dir = out_dir.join(&cell_id);
                let selector = cfg.selector_string();
                rows.push(match run_cell(&cfg) {
                    Ok(stats) => ReportRow {
                        run_id: cell_id,
                        seed,
                        algorithm: cfg.meta.algorithm,
                        noise_mode: mode.as_str().to_string(),
                        p,
                        selector,
                        domain: "in",
                        episodes: stats.n,
                        mean_loss: Some(stats.mean_loss),
                        ci95_loss: Some(stats.ci95_loss),
                        mean_metric: stats.mean_metric,
                        ci95_metric: stats.ci95_metric,
                        note: String::new(),
                    },
                    Err(e) => blank_stats_row(
                        cell_id,
                        &cfg,
                        mode.as_str(),
                        p,
                        selector,
                        format!("error: {e}"),
                    ),
                });
            }
        }
    }
    let report_path = out_dir.join("report.csv");
    write_report(&report_path, &rows)?;
    Ok(report_path)
}

/// A parsed ablation selector: noise disabled outright, or a concrete layer
/// selection ("all" = every layer, the empty-selector default).
enum Selector {
    NoiseOff,
    Layers(BTreeSet<String>),
}

fn parse_selector(raw: &str, labels: &BTreeSet<String>) -> Result<Selector> {
    match raw {
        "none" => Ok(Selector::NoiseOff),
        "all" => Ok(Selector::Layers(BTreeSet::new())),
        _ => {
            let mut set = BTreeSet::new();
            for label in raw.split('+').map(str::trim) {
                if label.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "empty layer label in selector {raw:?}"
                    )));
                }
                if !labels.contains(label) {
                    return Err(Error::UnknownLayer(label.to_string()));
                }
                set.insert(label.to_string());
            }
            Ok(Selector::Layers(set))
        }
    }
}

/// Layer ablation: one run per selector at the base seed, so every cell
/// shares initialization and task pool. Selectors are validated against the
/// configured architecture before anything runs. Rows carry the selector
/// string verbatim.
pub fn cmd_ablate_layers(
    base: &RunConfig,
    selectors: &[String],
    out_dir: &Path,
) -> Result<PathBuf> {
    if selectors.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least one selector".to_string(),
        ));
    }
    base.validate()?;
    let labels: BTreeSet<String> = base.model_spec()?.layer_labels().into_iter().collect();
    let parsed: Vec<(String, Selector)> = selectors
        .iter()
        .map(|raw| parse_selector(raw, &labels).map(|s| (raw.clone(), s)))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(parsed.len());
    for (verbatim, selector) in parsed {
        let mut cfg = base.clone();
        match selector {
            Selector::NoiseOff => cfg.meta.noise = NoiseConfig::off(),
            Selector::Layers(set) => cfg.meta.noise.layer_selector = set,
        }
        cfg.out_dir = out_dir.join(&verbatim);
        let (mode, p) = super::config::canonical_noise(&cfg.meta.noise);
        let run_id = format!(
            "{}-{}-p{}-{}-s{}",
            cfg.meta.algorithm.as_str(),
            mode,
            p,
            verbatim,
            cfg.seed
        );
        rows.push(match run_cell(&cfg) {
            Ok(stats) => ReportRow {
                run_id,
                seed: cfg.seed,
                algorithm: cfg.meta.algorithm,
                noise_mode: mode.to_string(),
                p,
                selector: verbatim,
                domain: "in",
                episodes: stats.n,
                mean_loss: Some(stats.mean_loss),
                ci95_loss: Some(stats.ci95_loss),
                mean_metric: stats.mean_metric,
                ci95_metric: stats.ci95_metric,
                note: String::new(),
            },
            Err(e) => {
                blank_stats_row(run_id, &cfg, mode, p, verbatim, format!("error: {e}"))
            }
        });
    }
    let report_path = out_dir.join("report.csv");
    write_report(&report_path, &rows)?;
    Ok(report_path)
}
