//! Experiment harness: configuration, training/evaluation drivers with early
//! stopping, and the grid runners (rate sweep, layer ablation), all emitting
//! deterministic CSV.
//!
//! RNG discipline: the run seed owns named substreams — `init` (weights),
//! `pool` (training task pool), `task-sampling` (episode draws),
//! `noise` (gradient dropout and activation dropout), `eval` (validation
//! and test episodes). Changing the noise configuration therefore never
//! perturbs what any other stream draws.

mod config;
mod evalcmd;
mod metrics;
mod sweep;
mod train;

pub use config::{canonical_noise, parse_config, parse_config_str, RunConfig};
pub use evalcmd::cmd_eval;
pub use metrics::{
    fmt_real, write_metrics, write_report, MetricsRecord, ReportRow, METRICS_HEADER,
    REPORT_HEADER,
};
pub use sweep::{cmd_ablate_layers, cmd_sweep};
pub use train::{cmd_train, TrainOutcome};

use std::path::Path;

use crate::error::{Error, Result};
use crate::metalearn::{meta_test_adapt, Algorithm, AlphaSet, MetaConfig};
use crate::model::{load_checkpoint, save_checkpoint, MlpSpec, ParamSet};
use crate::tasks::Task;
use crate::tensor::Tensor;

/// Summary statistics of one evaluation pass: mean query loss (and accuracy
/// for classification) with 95% confidence half-widths.
#[derive(Clone, Copy, Debug)]
pub struct EvalStats {
    pub n: usize,
    pub mean_loss: f64,
    pub ci95_loss: f64,
    pub mean_metric: Option<f64>,
    pub ci95_metric: Option<f64>,
}

fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Run the meta-test protocol (noise and dropout off) over a task list and
/// aggregate. `context` names the split in error reports.
pub fn evaluate_tasks(
    params: &ParamSet,
    alpha: &AlphaSet,
    spec: &MlpSpec,
    tasks: &[Task],
    meta: &MetaConfig,
    context: &str,
) -> Result<EvalStats> {
    let mut losses = Vec::with_capacity(tasks.len());
    let mut accs = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let (loss, acc) = meta_test_adapt(params, alpha, spec, task, meta)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteEval {
                name: context.to_string(),
                index: i,
            });
        }
        losses.push(loss);
        if let Some(a) = acc {
            accs.push(a);
        }
    }
    let (mean_loss, ci95_loss) = mean_ci(&losses);
    let (mean_metric, ci95_metric) = if accs.len() == tasks.len() {
        let (m, c) = mean_ci(&accs);
        (Some(m), Some(c))
    } else {
        (None, None)
    };
    Ok(EvalStats {
        n: tasks.len(),
        mean_loss,
        ci95_loss,
        mean_metric,
        ci95_metric,
    })
}

/// Checkpoints store the model parameters and, for learned per-parameter
/// rates, one extra "alpha."-prefixed entry per parameter.
fn checkpoint_params(params: &ParamSet, alpha: &AlphaSet) -> ParamSet {
    let mut parts: Vec<(String, String, Tensor)> = params
        .iter()
        .map(|p| (p.name.clone(), p.layer.clone(), p.tensor.clone()))
        .collect();
    if let AlphaSet::PerParam(entries) = alpha {
        for (name, t) in entries {
            let layer = params
                .iter()
                .find(|p| &p.name == name)
                .map(|p| p.layer.clone())
                .unwrap_or_else(|| "OUT".to_string());
            parts.push((format!("alpha.{name}"), layer, t.clone()));
        }
    }
    ParamSet::from_parts(parts)
}

pub(crate) fn save_run_checkpoint(
    path: &Path,
    params: &ParamSet,
    alpha: &AlphaSet,
) -> Result<()> {
    save_checkpoint(&checkpoint_params(params, alpha), path)
}

/// Load a checkpoint and split it back into parameters and (for MetaSGD)
/// learned rates, rejecting any disagreement with the configured
/// architecture and algorithm.
pub(crate) fn load_run_checkpoint(
    path: &Path,
    spec: &MlpSpec,
    meta: &MetaConfig,
) -> Result<(ParamSet, AlphaSet)> {
    let loaded = load_checkpoint(path)?;
    let mut theta_parts: Vec<(String, String, Tensor)> = Vec::new();
    let mut alpha_parts: Vec<(String, Tensor)> = Vec::new();
    for p in loaded.iter() {
        match p.name.strip_prefix("alpha.") {
            Some(base) => alpha_parts.push((base.to_string(), p.tensor.clone())),
            None => theta_parts.push((p.name.clone(), p.layer.clone(), p.tensor.clone())),
        }
    }

    let mismatch = |msg: String| {
        Err(Error::InvalidConfig(format!(
            "checkpoint {} does not match the configuration: {msg}",
            path.display()
        )))
    };

    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for i in 0..spec.n_layers() {
        let (d_in, d_out) = (spec.layer_dims[i], spec.layer_dims[i + 1]);
        expected.push((format!("w{i}"), vec![d_in, d_out]));
        expected.push((format!("b{i}"), vec![1, d_out]));
    }
    if theta_parts.len() != expected.len() {
        return mismatch(format!(
            "{} parameters, expected {}",
            theta_parts.len(),
            expected.len()
        ));
    }
    for ((name, _, tensor), (want_name, want_shape)) in theta_parts.iter().zip(&expected) {
        if name != want_name || tensor.shape() != want_shape.as_slice() {
            return mismatch(format!(
                "parameter {name} {:?}, expected {want_name} {want_shape:?}",
                tensor.shape()
            ));
        }
    }

    let alpha = if meta.algorithm == Algorithm::MetaSgd {
        if alpha_parts.len() != expected.len() {
            return mismatch(format!(
                "{} learned-rate entries, expected {} for metasgd",
                alpha_parts.len(),
                expected.len()
            ));
        }
        for ((name, tensor), (want_name, want_shape)) in alpha_parts.iter().zip(&expected) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return mismatch(format!(
                    "learned rate {name} {:?}, expected {want_name} {want_shape:?}",
                    tensor.shape()
                ));
            }
        }
        AlphaSet::PerParam(alpha_parts)
    } else {
        if !alpha_parts.is_empty() {
            return mismatch(format!(
                "checkpoint carries learned rates but algorithm is {}",
                meta.algorithm.as_str()
            ));
        }
        AlphaSet::Scalar(meta.alpha0)
    };

    Ok((ParamSet::from_parts(theta_parts), alpha))
}
