//! The evaluation driver: score a trained checkpoint on freshly sampled
//! meta-test episodes, in-domain or from the family's shifted
//! (out-of-domain) range, and write a one-row report.

use std::path::{Path, PathBuf};

use super::config::{canonical_noise, RunConfig};
use super::metrics::{write_report, ReportRow};
use super::{evaluate_tasks, load_run_checkpoint, EvalStats};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tasks::{sample_task, Task};

/// Evaluate `checkpoint` over `n_episodes` test tasks. Episodes come from
/// the `eval` substream ("test-<i>"), disjoint by name from the validation
/// episodes training drew. Cross-domain evaluation samples from the shifted
/// parameter range; the checkpoint is still whichever one source-domain
/// validation selected. Writes `report.csv` into the configured output
/// directory and returns the stats with the report path.
pub fn cmd_eval(
    checkpoint: &Path,
    config: &RunConfig,
    n_episodes: usize,
    cross_domain: bool,
) -> Result<(EvalStats, PathBuf)> {
    config.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidConfig(
            "evaluation needs at least one episode".to_string(),
        ));
    }
    if cross_domain && !config.family.has_shift() {
        return Err(Error::InvalidConfig(
            "cross-domain evaluation requested but the family has no shifted range".to_string(),
        ));
    }
    let spec = config.model_spec()?;
    let (params, alpha) = load_run_checkpoint(checkpoint, &spec, &config.meta)?;

    let root = RngStream::from_seed(config.seed);
    let eval_root = root.substream("eval");
    let tasks: Vec<Task> = (0..n_episodes)
        .map(|i| {
            let mut rng = eval_root.substream(&format!("test-{i}"));
            sample_task(
                &config.family,
                config.k_shot,
                config.n_query,
                &mut rng,
                cross_domain,
            )
        })
        .collect::<Result<_>>()?;

    let stats = evaluate_tasks(&params, &alpha, &spec, &tasks, &config.meta, "meta-test")?;

    let (mode, p) = canonical_noise(&config.meta.noise);
    let row = ReportRow {
        run_id: config.run_id(),
        seed: config.seed,
        algorithm: config.meta.algorithm,
        noise_mode: mode.to_string(),
        p,
        selector: config.selector_string(),
        domain: if cross_domain { "cross" } else { "in" },
        episodes: n_episodes,
        mean_loss: Some(stats.mean_loss),
        ci95_loss: Some(stats.ci95_loss),
        mean_metric: stats.mean_metric,
        ci95_metric: stats.ci95_metric,
        note: if n_episodes == 1 {
            "degenerate-sample".to_string()
        } else {
            String::new()
        },
    };
    std::fs::create_dir_all(&config.out_dir)?;
    let report_path = config.out_dir.join("report.csv");
    write_report(&report_path, &[row])?;
    Ok((stats, report_path))
}
