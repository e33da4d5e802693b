//! The bilevel training loops. Inner loop: a few gradient-descent steps on a
//! task's support set, optionally with gradient dropout. Outer loop: update
//! the shared initialization using query losses of the adapted models —
//! differentiating through the inner steps (second order), approximating the
//! inner Jacobian as identity (first order), or additionally learning
//! per-parameter inner rates.

use crate::autodiff::{Graph, GradMap, NodeId};
use crate::dropgrad::{draw_masks, NoiseConfig, NoiseMode};
use crate::error::{Error, Result};
use crate::model::{accuracy, forward_nodes, loss_node, Head, MlpSpec, ParamSet};
use crate::rng::RngStream;
use crate::tasks::Task;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    /// Full second-order meta-gradient through the inner loop.
    Maml2,
    /// First-order approximation: query gradient evaluated at the adapted
    /// parameters, inner Jacobian treated as identity.
    Maml1,
    /// Second-order plus learned per-parameter inner rates.
    MetaSgd,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Maml2 => "maml2",
            Algorithm::Maml1 => "maml1",
            Algorithm::MetaSgd => "metasgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "maml2" => Ok(Algorithm::Maml2),
            "maml1" => Ok(Algorithm::Maml1),
            "metasgd" => Ok(Algorithm::MetaSgd),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm {other:?} (expected maml2, maml1, or metasgd)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OuterOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OuterOptimizer {
    pub fn default_adam() -> Self {
        OuterOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything the training loop needs to know about one run.
#[derive(Clone, Debug)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    /// Inner learning rate (MetaSGD: initialization of the learned rates).
    pub alpha0: f64,
    /// Outer learning rate.
    pub eta: f64,
    pub n_inner: usize,
    pub meta_batch: usize,
    pub outer_optimizer: OuterOptimizer,
    pub noise: NoiseConfig,
    /// Baseline regularizer: inverted dropout on hidden activations during
    /// meta-training (0 disables).
    pub activation_dropout: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub early_stop_patience: usize,
}

/// Inner learning rates: one shared scalar, or (for MetaSGD) a learned
/// tensor per parameter, keyed like the ParamSet.
#[derive(Clone, Debug)]
pub enum AlphaSet {
    Scalar(f64),
    PerParam(Vec<(String, Tensor)>),
}

impl AlphaSet {
    pub fn for_algorithm(algorithm: Algorithm, alpha0: f64, params: &ParamSet) -> AlphaSet {
        match algorithm {
            Algorithm::MetaSgd => AlphaSet::PerParam(
                params
                    .iter()
                    .map(|p| (p.name.clone(), Tensor::filled(p.tensor.shape(), alpha0)))
                    .collect(),
            ),
            _ => AlphaSet::Scalar(alpha0),
        }
    }

    pub fn entries(&self) -> Option<&[(String, Tensor)]> {
        match self {
            AlphaSet::Scalar(_) => None,
            AlphaSet::PerParam(e) => Some(e),
        }
    }
}

/// A traced inner loop: the graph it ran on, the initial parameter leaves,
/// the learned-rate leaves (empty unless per-parameter rates are in use),
/// and the adapted parameter nodes — everything the outer gradient needs.
pub struct AdaptTrace {
    pub graph: Graph,
    pub theta0: Vec<(String, NodeId)>,
    pub alpha_nodes: Vec<(String, NodeId)>,
    pub adapted: Vec<(String, NodeId)>,
}

/// Result of inner-loop adaptation: adapted parameter values, plus the
/// trace when the caller asked to differentiate through the adaptation.
pub struct Adapted {
    pub params: ParamSet,
    pub trace: Option<AdaptTrace>,
}

fn check_finite_loss(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Per-step noise masks. With per-step resampling each step draws fresh
/// masks; otherwise one mask set is drawn up front and shared across steps.
struct MaskPlan<'a> {
    noise: &'a NoiseConfig,
    shared: Option<Vec<Option<Tensor>>>,
    rng: RngStream,
}

impl<'a> MaskPlan<'a> {
    fn new(params: &ParamSet, noise: &'a NoiseConfig, base: &RngStream) -> Result<Self> {
        let mut rng = base.substream("dropgrad");
        let shared = if noise.mode != NoiseMode::Off && !noise.resample_per_step {
            Some(draw_masks(params, noise, &mut rng)?)
        } else {
            None
        };
        Ok(MaskPlan { noise, shared, rng })
    }

    fn for_step(&mut self, params: &ParamSet) -> Result<Vec<Option<Tensor>>> {
        match &self.shared {
            Some(masks) => Ok(masks.clone()),
            None => draw_masks(params, self.noise, &mut self.rng),
        }
    }
}

/// Adapt `params` to a support set with `n_inner` gradient steps,
/// θ ← θ − α ⊙ (g ⊙ n). With `create_graph` the whole loop is traced on one
/// graph and the result carries the trace; otherwise each step runs on a
/// throwaway graph. Both paths consume randomness identically (noise from
/// substream "dropgrad", activation-dropout masks from "actdrop").
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    params: &ParamSet,
    alpha: &AlphaSet,
    spec: &MlpSpec,
    support: (&Tensor, &Tensor),
    n_inner: usize,
    noise: &NoiseConfig,
    activation_dropout: f64,
    rng: &RngStream,
    create_graph: bool,
) -> Result<Adapted> {
    assert!(n_inner >= 1, "adaptation needs at least one step");
    let mut masks = MaskPlan::new(params, noise, rng)?;
    let mut act_rng = rng.substream("actdrop");

    if create_graph {
        let mut graph = Graph::new();
        let theta0 = params.register(&mut graph);
        let alpha_nodes: Vec<(String, NodeId)> = match alpha {
            AlphaSet::Scalar(_) => vec![],
            AlphaSet::PerParam(entries) => entries
                .iter()
                .map(|(name, t)| {
                    let id = graph.param(&format!("alpha.{name}"), t.clone());
                    (name.clone(), id)
                })
                .collect(),
        };
        let x = graph.constant(support.0.clone());
        let y = graph.constant(support.1.clone());

        let mut theta = theta0.clone();
        for step in 0..n_inner {
            let act = (activation_dropout > 0.0).then_some((activation_dropout, &mut act_rng));
            let pred = forward_nodes(spec, &theta, x, &mut graph, act)?;
            let loss = loss_node(&mut graph, spec.head, pred, y)?;
            check_finite_loss(graph.value(loss).item(), step)?;
            let wrt: Vec<NodeId> = theta.iter().map(|(_, id)| *id).collect();
            let grads = graph.backward_nodes(loss, &wrt)?;
            let step_masks = masks.for_step(params)?;

            let mut next = Vec::with_capacity(theta.len());
            for (((name, th), g), mask) in theta.iter().zip(grads).zip(step_masks) {
                let g = match mask {
                    Some(noise_t) => {
                        let n = graph.constant(noise_t);
                        graph.mul(g, n)?
                    }
                    None => g,
                };
                let delta = match alpha {
                    AlphaSet::Scalar(a) => graph.scalar_mul(*a, g)?,
                    AlphaSet::PerParam(_) => {
                        let (_, an) = alpha_nodes
                            .iter()
                            .find(|(n, _)| n == name)
                            .expect("alpha keyed like params");
                        graph.mul(*an, g)?
                    }
                };
                next.push((name.clone(), graph.sub(*th, delta)?));
            }
            theta = next;
        }

        let values = params.updated(|p| {
            let (_, id) = theta
                .iter()
                .find(|(n, _)| n == &p.name)
                .expect("adapted keyed like params");
            graph.value(*id).clone()
        });
        Ok(Adapted {
            params: values,
            trace: Some(AdaptTrace {
                graph,
                theta0,
                alpha_nodes,
                adapted: theta,
            }),
        })
    } else {
        let mut theta = params.clone();
        for step in 0..n_inner {
            let mut graph = Graph::new();
            let weights = theta.register(&mut graph);
            let x = graph.constant(support.0.clone());
            let act = (activation_dropout > 0.0).then_some((activation_dropout, &mut act_rng));
            let pred = forward_nodes(spec, &weights, x, &mut graph, act)?;
            let y = graph.constant(support.1.clone());
            let loss = loss_node(&mut graph, spec.head, pred, y)?;
            check_finite_loss(graph.value(loss).item(), step)?;
            let grads = graph.backward(loss, false)?;
            let step_masks = masks.for_step(&theta)?;

            theta = theta.updated(|p| {
                let idx = params.iter().position(|q| q.name == p.name).expect("key");
                let g = grads.get(&p.name).expect("grads keyed like params");
                let g = match &step_masks[idx] {
                    Some(noise_t) => g.zip(noise_t, |gv, nv| gv * nv).expect("mask shape"),
                    None => g.clone(),
                };
                match alpha {
                    AlphaSet::Scalar(a) => p
                        .tensor
                        .zip(&g, |t, gv| t - a * gv)
                        .expect("grad shape"),
                    AlphaSet::PerParam(entries) => {
                        let at = &entries
                            .iter()
                            .find(|(n, _)| n == &p.name)
                            .expect("alpha keyed like params")
                            .1;
                        let step_t = at.zip(&g, |av, gv| av * gv).expect("alpha shape");
                        p.tensor.zip(&step_t, |t, d| t - d).expect("grad shape")
                    }
                }
            });
        }
        Ok(Adapted {
            params: theta,
            trace: None,
        })
    }
}

/// One task's contribution to the outer update.
pub struct MetaGrad {
    pub theta: GradMap,
    /// Present for MetaSGD: gradient w.r.t. the learned rates, keyed by
    /// parameter name.
    pub alpha: Option<GradMap>,
    pub query_loss: f64,
}

/// Meta-gradient of the query loss after adaptation, per the configured
/// algorithm. Randomness: inner-loop draws come from `rng` as in
/// `inner_adapt`; the query activation-dropout mask (if any) from substream
/// "actdrop-query".
pub fn meta_gradient(
    params: &ParamSet,
    alpha: &AlphaSet,
    spec: &MlpSpec,
    task: &Task,
    config: &MetaConfig,
    rng: &RngStream,
) -> Result<MetaGrad> {
    let second_order = matches!(config.algorithm, Algorithm::Maml2 | Algorithm::MetaSgd);
    let adapted = inner_adapt(
        params,
        alpha,
        spec,
        (&task.support.0, &task.support.1),
        config.n_inner,
        &config.noise,
        config.activation_dropout,
        rng,
        second_order,
    )?;
    let mut query_act_rng = rng.substream("actdrop-query");
    let act = (config.activation_dropout > 0.0)
        .then_some((config.activation_dropout, &mut query_act_rng));

    if second_order {
        let mut trace = adapted.trace.expect("traced adaptation");
        let graph = &mut trace.graph;
        let xq = graph.constant(task.query.0.clone());
        let yq = graph.constant(task.query.1.clone());
        let pred = forward_nodes(spec, &trace.adapted, xq, graph, act)?;
        let qloss = loss_node(graph, spec.head, pred, yq)?;
        let query_loss = graph.value(qloss).item();
        check_finite_loss(query_loss, config.n_inner)?;

        let mut wrt: Vec<NodeId> = trace.theta0.iter().map(|(_, id)| *id).collect();
        let n_theta = wrt.len();
        wrt.extend(trace.alpha_nodes.iter().map(|(_, id)| *id));
        let grad_ids = graph.backward_nodes(qloss, &wrt)?;

        let theta = GradMap::from_pairs(
            trace
                .theta0
                .iter()
                .zip(&grad_ids[..n_theta])
                .map(|((name, _), gid)| (name.clone(), graph.value(*gid).clone()))
                .collect(),
        );
        let alpha_grads = (config.algorithm == Algorithm::MetaSgd).then(|| {
            GradMap::from_pairs(
                trace
                    .alpha_nodes
                    .iter()
                    .zip(&grad_ids[n_theta..])
                    .map(|((name, _), gid)| (name.clone(), graph.value(*gid).clone()))
                    .collect(),
            )
        });
        Ok(MetaGrad {
            theta,
            alpha: alpha_grads,
            query_loss,
        })
    } else {
        // First order: gradient of the query loss at the adapted parameters,
        // reported as the gradient w.r.t. the initialization.
        let mut graph = Graph::new();
        let weights = adapted.params.register(&mut graph);
        let xq = graph.constant(task.query.0.clone());
        let pred = forward_nodes(spec, &weights, xq, &mut graph, act)?;
        let yq = graph.constant(task.query.1.clone());
        let qloss = loss_node(&mut graph, spec.head, pred, yq)?;
        let query_loss = graph.value(qloss).item();
        check_finite_loss(query_loss, config.n_inner)?;
        let theta = graph.backward(qloss, false)?;
        Ok(MetaGrad {
            theta,
            alpha: None,
            query_loss,
        })
    }
}

/// First/second moment accumulators for one set of named tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    t: usize,
    m: Vec<(String, Tensor)>,
    v: Vec<(String, Tensor)>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl Iterator<Item = (&'a str, &'a [usize])>) -> Self {
        let zeros: Vec<(String, Tensor)> = shapes
            .map(|(name, shape)| (name.to_string(), Tensor::zeros(shape)))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Apply one outer-optimizer step to named values. SGD: v − η·g. Adam:
/// standard bias-corrected moment update with the configured betas/eps.
pub fn outer_update(
    optimizer: &OuterOptimizer,
    eta: f64,
    state: &mut AdamState,
    values: &[(String, Tensor)],
    grads: &GradMap,
) -> Result<Vec<(String, Tensor)>> {
    match optimizer {
        OuterOptimizer::Sgd => values
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .get(name)
                    .ok_or_else(|| Error::KeyMismatch(format!("no gradient for {name}")))?;
                Ok((name.clone(), t.zip(g, |tv, gv| tv - eta * gv)?))
            })
            .collect(),
        OuterOptimizer::Adam { beta1, beta2, eps } => {
            state.t += 1;
            let t = state.t as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            values
                .iter()
                .enumerate()
                .map(|(i, (name, val))| {
                    let g = grads
                        .get(name)
                        .ok_or_else(|| Error::KeyMismatch(format!("no gradient for {name}")))?;
                    let m = state.m[i].1.zip(g, |mv, gv| beta1 * mv + (1.0 - beta1) * gv)?;
                    let v = state.v[i]
                        .1
                        .zip(g, |vv, gv| beta2 * vv + (1.0 - beta2) * gv * gv)?;
                    let new_val = val.zip(&m.zip(&v, |mv, vv| {
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        eta * mhat / (vhat.sqrt() + eps)
                    })?, |tv, dv| tv - dv)?;
                    state.m[i].1 = m;
                    state.v[i].1 = v;
                    Ok((name.clone(), new_val))
                })
                .collect()
        }
    }
}

/// Optimizer state for the outer loop: moments for θ and, when rates are
/// learned, for α.
#[derive(Clone, Debug)]
pub struct OptState {
    theta: AdamState,
    alpha: Option<AdamState>,
}

impl OptState {
    pub fn new(params: &ParamSet, alpha: &AlphaSet) -> Self {
        OptState {
            theta: AdamState::new(params.iter().map(|p| (p.name.as_str(), p.tensor.shape()))),
            alpha: alpha.entries().map(|entries| {
                AdamState::new(entries.iter().map(|(n, t)| (n.as_str(), t.shape())))
            }),
        }
    }
}

pub struct StepOutcome {
    pub params: ParamSet,
    pub alpha: AlphaSet,
    pub mean_query_loss: f64,
}

/// One outer step over a meta-batch: average the per-task meta-gradients in
/// task order, then apply the outer optimizer to θ (and α for learned
/// rates). Task i draws its randomness from substream "task-<i>" of `rng`.
pub fn meta_step(
    params: &ParamSet,
    alpha: &AlphaSet,
    spec: &MlpSpec,
    tasks: &[Task],
    config: &MetaConfig,
    rng: &RngStream,
    opt_state: &mut OptState,
) -> Result<StepOutcome> {
    assert!(config.meta_batch >= 1, "meta-batch must be non-empty");
    assert_eq!(tasks.len(), config.meta_batch, "meta-batch size mismatch");
    let mut theta_sum: Option<Vec<(String, Tensor)>> = None;
    let mut alpha_sum: Option<Vec<(String, Tensor)>> = None;
    let mut loss_sum = 0.0;

    for (i, task) in tasks.iter().enumerate() {
        let task_rng = rng.substream(&format!("task-{i}"));
        let mg = meta_gradient(params, alpha, spec, task, config, &task_rng)?;
        loss_sum += mg.query_loss;
        let accumulate = |sum: &mut Option<Vec<(String, Tensor)>>, grads: &GradMap| {
            match sum {
                None => *sum = Some(grads.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()),
                Some(acc) => {
                    for ((_, at), (_, gt)) in acc.iter_mut().zip(grads.iter()) {
                        *at = at.zip(gt, |a, b| a + b).expect("congruent shapes");
                    }
                }
            }
        };
        accumulate(&mut theta_sum, &mg.theta);
        if let Some(ag) = &mg.alpha {
            accumulate(&mut alpha_sum, ag);
        }
    }

    let nb = config.meta_batch as f64;
    let mean_of = |sum: Vec<(String, Tensor)>| -> Result<GradMap> {
        let entries: Vec<(String, Tensor)> = sum
            .into_iter()
            .map(|(n, t)| (n, t.map(|v| v / nb)))
            .collect();
        for (name, t) in &entries {
            if !t.all_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        Ok(GradMap::from_pairs(entries))
    };
    let theta_mean = mean_of(theta_sum.expect("meta_batch >= 1"))?;

    let current: Vec<(String, Tensor)> = params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect();
    let updated = outer_update(
        &config.outer_optimizer,
        config.eta,
        &mut opt_state.theta,
        &current,
        &theta_mean,
    )?;
    let new_params = params.updated(|p| {
        updated
            .iter()
            .find(|(n, _)| n == &p.name)
            .expect("updated keyed like params")
            .1
            .clone()
    });

    let new_alpha = match (alpha, alpha_sum) {
        (AlphaSet::PerParam(entries), Some(sum)) => {
            let alpha_mean = mean_of(sum)?;
            let state = opt_state.alpha.as_mut().expect("alpha state");
            AlphaSet::PerParam(outer_update(
                &config.outer_optimizer,
                config.eta,
                state,
                entries,
                &alpha_mean,
            )?)
        }
        _ => alpha.clone(),
    };

    Ok(StepOutcome {
        params: new_params,
        alpha: new_alpha,
        mean_query_loss: loss_sum / nb,
    })
}

/// Meta-test protocol: adapt on the support set with noise and activation
/// dropout disabled, then score the query set. Query labels are only
/// touched after adaptation, in the loss computation. Returns the query
/// loss and, for classification, top-1 accuracy.
pub fn meta_test_adapt(
    params: &ParamSet,
    alpha: &AlphaSet,
    spec: &MlpSpec,
    task: &Task,
    config: &MetaConfig,
) -> Result<(f64, Option<f64>)> {
    // Nothing below draws randomness: noise is off and dropout disabled.
    let silent_rng = RngStream::from_seed(0);
    let adapted = inner_adapt(
        params,
        alpha,
        spec,
        (&task.support.0, &task.support.1),
        config.n_inner,
        &NoiseConfig::off(),
        0.0,
        &silent_rng,
        false,
    )?;

    let mut graph = Graph::new();
    let weights = adapted.params.register(&mut graph);
    let xq = graph.constant(task.query.0.clone());
    let pred = forward_nodes(spec, &weights, xq, &mut graph, None)?;
    let yq = graph.constant(task.query.1.clone());
    let qloss = loss_node(&mut graph, spec.head, pred, yq)?;
    let loss = graph.value(qloss).item();
    let acc = match spec.head {
        Head::Regression => None,
        Head::Classification => Some(accuracy(graph.value(pred), &task.query.1)),
    };
    Ok((loss, acc))
}
