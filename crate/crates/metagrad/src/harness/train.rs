//! The training driver: epochs of outer steps over a frozen task pool, a
//! fixed seeded validation set scored with noise off after every epoch,
//! best-validation checkpointing, and early stopping.

use std::path::PathBuf;

use super::config::{canonical_noise, RunConfig};
use super::metrics::{write_metrics, MetricsRecord};
use super::{evaluate_tasks, save_run_checkpoint};
use crate::error::{Error, Result};
use crate::metalearn::{meta_step, AlphaSet, OptState};
use crate::model::init_mlp;
use crate::rng::RngStream;
use crate::tasks::{make_pool, sample_from_pool, sample_task, Task};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_id: String,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Train per the configuration: writes `metrics.csv` (one meta-train and one
/// meta-val row per epoch, after a meta-val row for the initialization at
/// epoch 0) and `best.ckpt` (the parameters with the lowest meta-validation
/// loss seen). A non-finite loss aborts the run, flushing the rows written
/// so far plus a final "abort" row before the error propagates.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.model_spec()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let metrics_path = config.out_dir.join("metrics.csv");
    let checkpoint_path = config.out_dir.join("best.ckpt");

    let root = RngStream::from_seed(config.seed);
    let params = init_mlp(&spec, &mut root.substream("init"));
    let alpha = AlphaSet::for_algorithm(config.meta.algorithm, config.meta.alpha0, &params);
    let pool = make_pool(&config.family, config.n_pool, &mut root.substream("pool"))?;
    let eval_root = root.substream("eval");
    let val_tasks: Vec<Task> = (0..config.n_val_tasks)
        .map(|i| {
            let mut rng = eval_root.substream(&format!("val-{i}"));
            sample_task(&config.family, config.k_shot, config.n_query, &mut rng, false)
        })
        .collect::<Result<_>>()?;

    let run_id = config.run_id();
    let (mode, p) = canonical_noise(&config.meta.noise);
    let record = |epoch: usize, split: &'static str, loss: f64, metric: Option<f64>| {
        MetricsRecord {
            run_id: run_id.clone(),
            seed: config.seed,
            algorithm: config.meta.algorithm,
            noise_mode: mode,
            p,
            epoch,
            split,
            loss,
            metric,
        }
    };

    let mut rows: Vec<MetricsRecord> = Vec::new();
    let result = run_epochs(
        config,
        &spec,
        params,
        alpha,
        &pool,
        &root,
        &val_tasks,
        &checkpoint_path,
        &record,
        &mut rows,
    );
    if let Err((epoch, _)) = &result {
        rows.push(record(*epoch, "abort", f64::NAN, None));
    }
    write_metrics(&metrics_path, &rows)?;
    let (best_val_loss, best_epoch, epochs_run) = result.map_err(|(_, e)| e)?;

    Ok(TrainOutcome {
        run_id,
        best_val_loss,
        best_epoch,
        epochs_run,
        metrics_path,
        checkpoint_path,
    })
}

/// The epoch loop proper; errors carry the epoch they struck in so the
/// caller can stamp the abort record.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    config: &RunConfig,
    spec: &crate::model::MlpSpec,
    mut theta: crate::model::ParamSet,
    mut alpha: AlphaSet,
    pool: &crate::tasks::TaskPool,
    root: &RngStream,
    val_tasks: &[Task],
    checkpoint_path: &std::path::Path,
    record: &dyn Fn(usize, &'static str, f64, Option<f64>) -> MetricsRecord,
    rows: &mut Vec<MetricsRecord>,
) -> std::result::Result<(f64, usize, usize), (usize, Error)> {
    let sampling_root = root.substream("task-sampling");
    let noise_root = root.substream("noise");
    let at = |epoch: usize| move |e: Error| (epoch, e);

    let val0 = evaluate_tasks(&theta, &alpha, spec, val_tasks, &config.meta, "meta-val")
        .map_err(at(0))?;
    rows.push(record(0, "meta-val", val0.mean_loss, val0.mean_metric));
    save_run_checkpoint(checkpoint_path, &theta, &alpha).map_err(at(0))?;

    let mut best = (val0.mean_loss, 0usize);
    let mut opt_state = OptState::new(&theta, &alpha);
    let mut stalled = 0usize;
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=config.meta.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..config.meta.episodes_per_epoch {
            let mut task_rng = sampling_root.substream(&format!("step-{step}"));
            let tasks: Vec<Task> = (0..config.meta.meta_batch)
                .map(|_| {
                    sample_from_pool(pool, config.k_shot, config.n_query, &mut task_rng)
                })
                .collect::<Result<_>>()
                .map_err(at(epoch))?;
            let step_noise = noise_root.substream(&format!("step-{step}"));
            let out = meta_step(
                &theta,
                &alpha,
                spec,
                &tasks,
                &config.meta,
                &step_noise,
                &mut opt_state,
            )
            .map_err(at(epoch))?;
            theta = out.params;
            alpha = out.alpha;
            loss_sum += out.mean_query_loss;
            step += 1;
        }
        let train_loss = loss_sum / config.meta.episodes_per_epoch as f64;
        rows.push(record(epoch, "meta-train", train_loss, None));

        let val = evaluate_tasks(&theta, &alpha, spec, val_tasks, &config.meta, "meta-val")
            .map_err(at(epoch))?;
        rows.push(record(epoch, "meta-val", val.mean_loss, val.mean_metric));
        epochs_run = epoch;

        if val.mean_loss < best.0 {
            best = (val.mean_loss, epoch);
            save_run_checkpoint(checkpoint_path, &theta, &alpha).map_err(at(epoch))?;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= config.meta.early_stop_patience {
                break;
            }
        }
    }
    Ok((best.0, best.1, epochs_run))
}
