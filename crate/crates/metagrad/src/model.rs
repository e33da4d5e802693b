//! Dense multi-layer perceptrons: parameter storage with stable names and
//! layer labels, initialization, forward evaluation as a traced graph, and a
//! plain-text checkpoint format with bit-exact round-trips.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One named parameter tensor with its layer label ("L0", "L1", ..., "OUT").
/// Labels are the unit of layer-selective gradient noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: String,
    pub tensor: Tensor,
}

/// Ordered, immutable set of model parameters. Updates produce new sets, so
/// a ParamSet can be shared freely.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn from_parts(parts: Vec<(String, String, Tensor)>) -> Self {
        ParamSet {
            params: parts
                .into_iter()
                .map(|(name, layer, tensor)| Param {
                    name,
                    layer,
                    tensor,
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn layer_of(&self, name: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.layer.as_str())
    }

    /// Distinct layer labels in first-appearance order.
    pub fn layers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for p in &self.params {
            if !seen.contains(&p.layer.as_str()) {
                seen.push(p.layer.as_str());
            }
        }
        seen
    }

    /// New set with the same names/layers and tensors produced by `f`.
    pub fn updated(&self, mut f: impl FnMut(&Param) -> Tensor) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    layer: p.layer.clone(),
                    tensor: f(p),
                })
                .collect(),
        }
    }

    /// Copy with one coordinate of one tensor shifted by `delta` (the
    /// finite-difference probe).
    pub fn perturbed(&self, name: &str, coord: usize, delta: f64) -> ParamSet {
        self.updated(|p| {
            if p.name == name {
                let mut t = p.tensor.clone();
                t.values_mut()[coord] += delta;
                t
            } else {
                p.tensor.clone()
            }
        })
    }

    /// Register every parameter as a differentiable graph root, in order.
    pub fn register(&self, graph: &mut Graph) -> Vec<(String, NodeId)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), graph.param(&p.name, p.tensor.clone())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Regression,
    Classification,
}

/// Architecture description: layer widths (input first, output last),
/// hidden activation, and output head.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "layer dims must list at least input and output extents, all positive; got {:?}",
                layer_dims
            )));
        }
        Ok(MlpSpec {
            layer_dims,
            activation,
            head,
        })
    }

    /// Number of affine layers.
    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Layer labels in depth order: "L0", "L1", ..., with the final affine
    /// layer labeled "OUT".
    pub fn layer_labels(&self) -> Vec<String> {
        (0..self.n_layers())
            .map(|i| {
                if i + 1 == self.n_layers() {
                    "OUT".to_string()
                } else {
                    format!("L{i}")
                }
            })
            .collect()
    }
}

/// Glorot-uniform weights (± sqrt(6/(fan_in+fan_out))), zero biases. Draw
/// order is fixed (layers in depth order, weights row-major), so equal rng
/// states give bit-identical parameter sets.
pub fn init_mlp(spec: &MlpSpec, rng: &mut RngStream) -> ParamSet {
    let labels = spec.layer_labels();
    let mut parts = Vec::new();
    for i in 0..spec.n_layers() {
        let (fan_in, fan_out) = (spec.layer_dims[i], spec.layer_dims[i + 1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-s, s)).collect();
        parts.push((
            format!("w{i}"),
            labels[i].clone(),
            Tensor::new(vec![fan_in, fan_out], w).expect("weight shape"),
        ));
        parts.push((
            format!("b{i}"),
            labels[i].clone(),
            Tensor::zeros(&[1, fan_out]),
        ));
    }
    ParamSet::from_parts(parts)
}

/// Forward pass over already-registered parameter nodes (the inner loop
/// re-uses this with adapted, graph-backed parameters). `weights` must hold
/// nodes named w0/b0, w1/b1, ... matching `spec`.
///
/// `activation_dropout` multiplies each hidden activation by a fresh
/// inverted-dropout mask (0 with probability rate, else 1/(1-rate)). A rate
/// of 0 is a structural no-op and consumes no randomness.
pub fn forward_nodes(
    spec: &MlpSpec,
    weights: &[(String, NodeId)],
    x: NodeId,
    graph: &mut Graph,
    mut activation_dropout: Option<(f64, &mut RngStream)>,
) -> Result<NodeId> {
    let find = |name: &str| -> Result<NodeId> {
        weights
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter node {name}")))
    };
    let batch = {
        let s = graph.value(x).shape();
        if s.len() != 2 || s[1] != spec.layer_dims[0] {
            return Err(Error::ShapeMismatch {
                op: "mlp-forward",
                details: format!(
                    "input shape {:?}, expected [batch, {}]",
                    s, spec.layer_dims[0]
                ),
            });
        }
        s[0]
    };

    let mut h = x;
    for i in 0..spec.n_layers() {
        let w = find(&format!("w{i}"))?;
        let b = find(&format!("b{i}"))?;
        let z = graph.matmul(h, w)?;
        let z = graph.broadcast_add_bias(z, b)?;
        if i + 1 == spec.n_layers() {
            h = z;
        } else {
            let a = match spec.activation {
                Activation::Tanh => graph.tanh(z)?,
                Activation::Relu => graph.relu(z)?,
            };
            h = a;
            if let Some((rate, rng)) = activation_dropout.as_mut() {
                if *rate > 0.0 {
                    let width = spec.layer_dims[i + 1];
                    let keep = 1.0 / (1.0 - *rate);
                    let mask: Vec<f64> = (0..batch * width)
                        .map(|_| if rng.bernoulli(*rate) { 0.0 } else { keep })
                        .collect();
                    let mask = graph.constant(Tensor::new(vec![batch, width], mask)?);
                    h = graph.mul(h, mask)?;
                }
            }
        }
    }
    Ok(h)
}

/// Convenience forward: registers `params` as graph roots and evaluates the
/// network on `x`.
pub fn forward(
    params: &ParamSet,
    spec: &MlpSpec,
    x: &Tensor,
    graph: &mut Graph,
    activation_dropout: Option<(f64, &mut RngStream)>,
) -> Result<NodeId> {
    let weights = params.register(graph);
    let xn = graph.constant(x.clone());
    forward_nodes(spec, &weights, xn, graph, activation_dropout)
}

/// Head-appropriate loss node: mean squared error for regression, softmax
/// cross-entropy against one-hot rows for classification.
pub fn loss_node(graph: &mut Graph, head: Head, pred: NodeId, target: NodeId) -> Result<NodeId> {
    match head {
        Head::Regression => graph.mse(pred, target),
        Head::Classification => graph.softmax_cross_entropy(pred, target),
    }
}

/// Fraction of rows whose logits argmax matches the one-hot target argmax.
/// Ties resolve to the first maximal index on both sides.
pub fn accuracy(logits: &Tensor, targets_onehot: &Tensor) -> f64 {
    let shape = logits.shape();
    let (m, n) = (shape[0], shape[1]);
    let argmax = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    };
    let mut hits = 0usize;
    for i in 0..m {
        let lrow = &logits.values()[i * n..(i + 1) * n];
        let trow = &targets_onehot.values()[i * n..(i + 1) * n];
        if argmax(lrow) == argmax(trow) {
            hits += 1;
        }
    }
    hits as f64 / m as f64
}

const CHECKPOINT_MAGIC: &str = "MGRAD1";

/// Write `params` as plain text: a magic line, then per parameter a header
/// line `name layer dims...` and a line of values printed with
/// shortest-round-trip precision (so reloading is bit-exact).
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    for p in params.iter() {
        out.push_str(&p.name);
        out.push(' ');
        out.push_str(&p.layer);
        for d in p.tensor.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let mut first = true;
        for v in p.tensor.values() {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Checkpoint {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        Some((_, l)) => return Err(err(1, format!("bad magic {l:?}"))),
        None => return Err(err(1, "empty file".to_string())),
    }

    let mut parts = Vec::new();
    while let Some((lineno, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() < 2 {
            return Err(err(lineno + 1, format!("malformed header {header:?}")));
        }
        let name = tokens[0].to_string();
        let layer = tokens[1].to_string();
        let shape: Vec<usize> = tokens[2..]
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| err(lineno + 1, format!("bad extent {t:?}")))
            })
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();

        let Some((vlineno, vline)) = lines.next() else {
            return Err(err(lineno + 1, format!("missing values for {name}")));
        };
        let values: Vec<f64> = vline
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| err(vlineno + 1, format!("bad value {t:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != numel {
            return Err(err(
                vlineno + 1,
                format!(
                    "{name}: {} values for shape {:?} ({} expected)",
                    values.len(),
                    shape,
                    numel
                ),
            ));
        }
        parts.push((name, layer, Tensor::new(shape, values)?));
    }
    Ok(ParamSet::from_parts(parts))
}
