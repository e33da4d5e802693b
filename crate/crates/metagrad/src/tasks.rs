//! Synthetic task families for episodic training: sinusoid regression and
//! gaussian-cluster classification, each sampled as (support, query) episode
//! pairs, plus a finite task pool that deliberately limits task diversity so
//! meta-overfitting becomes observable, and optional shifted parameter
//! ranges for out-of-domain evaluation.

use crate::error::{Error, Result};
use crate::model::Head;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One episode: a few labeled support rows to adapt on and held-out query
/// rows from the same underlying task to score with.
#[derive(Clone, Debug)]
pub struct Task {
    pub support: (Tensor, Tensor),
    pub query: (Tensor, Tensor),
    pub family_tag: String,
}

/// Parameters of a single concrete task, independent of the points later
/// drawn from it.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskParams {
    Sinusoid { amp: f64, phase: f64 },
    Clusters { means: Vec<Vec<f64>> },
}

/// A distribution over tasks. `shift_*` fields, when set, define the
/// alternate (out-of-domain) parameter range used by shifted sampling; they
/// must be disjoint from the training range.
#[derive(Clone, Debug)]
pub enum TaskFamily {
    Sinusoid {
        amp_range: (f64, f64),
        phase_range: (f64, f64),
        input_range: (f64, f64),
        shift_amp_range: Option<(f64, f64)>,
    },
    Clusters {
        n_way: usize,
        d_in: usize,
        mean_region: (f64, f64),
        cluster_sd: f64,
        shift_mean_region: Option<(f64, f64)>,
    },
}

fn valid_interval(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::InvalidConfig(format!(
            "{name} range [{lo}, {hi}] is not a valid interval"
        )));
    }
    Ok(())
}

// Draws are uniform on [lo, hi), so touching endpoints do not collide.
fn disjoint((a_lo, a_hi): (f64, f64), (b_lo, b_hi): (f64, f64)) -> bool {
    a_hi <= b_lo || b_hi <= a_lo
}

impl TaskFamily {
    /// The conventional sinusoid regression family: amplitude in [0.1, 5),
    /// phase in [0, pi), inputs in [-5, 5), with the out-of-domain range
    /// continuing where the amplitudes stop ([5, 10)).
    pub fn default_sinusoid() -> Self {
        TaskFamily::Sinusoid {
            amp_range: (0.1, 5.0),
            phase_range: (0.0, std::f64::consts::PI),
            input_range: (-5.0, 5.0),
            shift_amp_range: Some((5.0, 10.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskFamily::Sinusoid {
                amp_range,
                phase_range,
                input_range,
                shift_amp_range,
            } => {
                valid_interval("amplitude", *amp_range)?;
                valid_interval("phase", *phase_range)?;
                valid_interval("input", *input_range)?;
                if let Some(shift) = shift_amp_range {
                    valid_interval("shifted amplitude", *shift)?;
                    if !disjoint(*amp_range, *shift) {
                        return Err(Error::InvalidConfig(format!(
                            "shifted amplitude range {:?} overlaps the training range {:?}",
                            shift, amp_range
                        )));
                    }
                }
            }
            TaskFamily::Clusters {
                n_way,
                d_in,
                mean_region,
                cluster_sd,
                shift_mean_region,
            } => {
                if *n_way < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "clusters need at least 2 classes, got {n_way}"
                    )));
                }
                if *d_in == 0 {
                    return Err(Error::InvalidConfig("clusters need d_in >= 1".into()));
                }
                if *cluster_sd < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "cluster standard deviation must be >= 0, got {cluster_sd}"
                    )));
                }
                valid_interval("cluster mean", *mean_region)?;
                if let Some(shift) = shift_mean_region {
                    valid_interval("shifted cluster mean", *shift)?;
                    if !disjoint(*mean_region, *shift) {
                        return Err(Error::InvalidConfig(format!(
                            "shifted mean region {:?} overlaps the training region {:?}",
                            shift, mean_region
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        match self {
            TaskFamily::Sinusoid { .. } => Head::Regression,
            TaskFamily::Clusters { .. } => Head::Classification,
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            TaskFamily::Sinusoid { .. } => 1,
            TaskFamily::Clusters { d_in, .. } => *d_in,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            TaskFamily::Sinusoid { .. } => 1,
            TaskFamily::Clusters { n_way, .. } => *n_way,
        }
    }

    pub fn tag(&self, shifted: bool) -> String {
        let base = match self {
            TaskFamily::Sinusoid { .. } => "sinusoid",
            TaskFamily::Clusters { .. } => "clusters",
        };
        if shifted {
            format!("{base}-shift")
        } else {
            base.to_string()
        }
    }

    pub fn has_shift(&self) -> bool {
        match self {
            TaskFamily::Sinusoid {
                shift_amp_range, ..
            } => shift_amp_range.is_some(),
            TaskFamily::Clusters {
                shift_mean_region, ..
            } => shift_mean_region.is_some(),
        }
    }

    /// Draw the parameters of one concrete task.
    fn draw_params(&self, rng: &mut RngStream, use_shift: bool) -> Result<TaskParams> {
        match self {
            TaskFamily::Sinusoid {
                amp_range,
                phase_range,
                shift_amp_range,
                ..
            } => {
                let amp_range = if use_shift {
                    shift_amp_range.ok_or_else(|| {
                        Error::InvalidConfig(
                            "shifted sampling requested but no shift range configured".into(),
                        )
                    })?
                } else {
                    *amp_range
                };
                let amp = rng.uniform(amp_range.0, amp_range.1);
                let phase = rng.uniform(phase_range.0, phase_range.1);
                Ok(TaskParams::Sinusoid { amp, phase })
            }
            TaskFamily::Clusters {
                n_way,
                d_in,
                mean_region,
                shift_mean_region,
                ..
            } => {
                let region = if use_shift {
                    shift_mean_region.ok_or_else(|| {
                        Error::InvalidConfig(
                            "shifted sampling requested but no shift region configured".into(),
                        )
                    })?
                } else {
                    *mean_region
                };
                let means = (0..*n_way)
                    .map(|_| (0..*d_in).map(|_| rng.uniform(region.0, region.1)).collect())
                    .collect();
                Ok(TaskParams::Clusters { means })
            }
        }
    }
}

fn rows_equal(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x == y)
}

const DISJOINT_ATTEMPTS: usize = 16;

/// Materialize support and query points for fixed task parameters. Query
/// inputs colliding with a support row are redrawn a bounded number of
/// times; for continuous families collisions have probability zero, and a
/// deliberately degenerate family (e.g. zero cluster spread) keeps the
/// duplicate after the attempts run out.
fn materialize(
    family: &TaskFamily,
    params: &TaskParams,
    k_shot: usize,
    n_query: usize,
    rng: &mut RngStream,
    shifted: bool,
) -> Result<Task> {
    assert!(k_shot >= 1 && n_query >= 1);
    match (family, params) {
        (
            TaskFamily::Sinusoid { input_range, .. },
            TaskParams::Sinusoid { amp, phase },
        ) => {
            let draw_xy = |rng: &mut RngStream| {
                let x = rng.uniform(input_range.0, input_range.1);
                (x, amp * (x + phase).sin())
            };
            let mut sx = Vec::with_capacity(k_shot);
            let mut sy = Vec::with_capacity(k_shot);
            for _ in 0..k_shot {
                let (x, y) = draw_xy(rng);
                sx.push(x);
                sy.push(y);
            }
            let mut qx = Vec::with_capacity(n_query);
            let mut qy = Vec::with_capacity(n_query);
            for _ in 0..n_query {
                let (mut x, mut y) = draw_xy(rng);
                for _ in 0..DISJOINT_ATTEMPTS {
                    if !sx.contains(&x) {
                        break;
                    }
                    (x, y) = draw_xy(rng);
                }
                qx.push(x);
                qy.push(y);
            }
            Ok(Task {
                support: (
                    Tensor::new(vec![k_shot, 1], sx)?,
                    Tensor::new(vec![k_shot, 1], sy)?,
                ),
                query: (
                    Tensor::new(vec![n_query, 1], qx)?,
                    Tensor::new(vec![n_query, 1], qy)?,
                ),
                family_tag: family.tag(shifted),
            })
        }
        (
            TaskFamily::Clusters {
                n_way,
                d_in,
                cluster_sd,
                ..
            },
            TaskParams::Clusters { means },
        ) => {
            let draw_point = |class: usize, rng: &mut RngStream| -> Vec<f64> {
                means[class]
                    .iter()
                    .map(|&m| rng.normal(m, *cluster_sd))
                    .collect()
            };
            let one_hot = |class: usize| {
                let mut row = vec![0.0; *n_way];
                row[class] = 1.0;
                row
            };
            let mut sx: Vec<Vec<f64>> = Vec::with_capacity(n_way * k_shot);
            let mut sy = Vec::with_capacity(n_way * k_shot);
            for class in 0..*n_way {
                for _ in 0..k_shot {
                    sx.push(draw_point(class, rng));
                    sy.push(one_hot(class));
                }
            }
            let mut qx: Vec<Vec<f64>> = Vec::with_capacity(n_way * n_query);
            let mut qy = Vec::with_capacity(n_way * n_query);
            for class in 0..*n_way {
                for _ in 0..n_query {
                    let mut point = draw_point(class, rng);
                    for _ in 0..DISJOINT_ATTEMPTS {
                        if !sx.iter().any(|row| rows_equal(row, &point)) {
                            break;
                        }
                        point = draw_point(class, rng);
                    }
                    qx.push(point);
                    qy.push(one_hot(class));
                }
            }
            let flat = |rows: Vec<Vec<f64>>| rows.into_iter().flatten().collect::<Vec<f64>>();
            Ok(Task {
                support: (
                    Tensor::new(vec![n_way * k_shot, *d_in], flat(sx))?,
                    Tensor::new(vec![n_way * k_shot, *n_way], flat(sy))?,
                ),
                query: (
                    Tensor::new(vec![n_way * n_query, *d_in], flat(qx))?,
                    Tensor::new(vec![n_way * n_query, *n_way], flat(qy))?,
                ),
                family_tag: family.tag(shifted),
            })
        }
        _ => unreachable!("task parameters from a different family"),
    }
}

/// Draw a fresh task: parameters from the family's (possibly shifted)
/// ranges, then support/query points. For the sinusoid family `k_shot` and
/// `n_query` count points; for clusters they count points per class.
pub fn sample_task(
    family: &TaskFamily,
    k_shot: usize,
    n_query: usize,
    rng: &mut RngStream,
    use_shift: bool,
) -> Result<Task> {
    let params = family.draw_params(rng, use_shift)?;
    materialize(family, &params, k_shot, n_query, rng, use_shift)
}

/// A frozen, finite set of task parameters. Sampling from the pool re-draws
/// fresh support/query points but only ever for these tasks — the lever that
/// makes a meta-learner overfit at the task level.
#[derive(Clone, Debug)]
pub struct TaskPool {
    family: TaskFamily,
    tasks: Vec<TaskParams>,
}

pub fn make_pool(family: &TaskFamily, n_pool: usize, rng: &mut RngStream) -> Result<TaskPool> {
    assert!(n_pool >= 1);
    family.validate()?;
    let tasks = (0..n_pool)
        .map(|_| family.draw_params(rng, false))
        .collect::<Result<_>>()?;
    Ok(TaskPool {
        family: family.clone(),
        tasks,
    })
}

impl TaskPool {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn params(&self) -> &[TaskParams] {
        &self.tasks
    }
}

pub fn sample_from_pool(
    pool: &TaskPool,
    k_shot: usize,
    n_query: usize,
    rng: &mut RngStream,
) -> Result<Task> {
    let idx = rng.index(pool.tasks.len());
    materialize(&pool.family, &pool.tasks[idx], k_shot, n_query, rng, false)
}
