//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! The differentiating trick this crate depends on: `backward` does not
//! compute gradients with opaque arithmetic — it *emits the gradient
//! computation as new tape nodes*, drawn from the same op set it
//! differentiates. Gradients are therefore themselves differentiable, which
//! is what lets the outer training loop backpropagate through the inner
//! adaptation step (second-order meta-gradients) with a single mechanism.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum OpKind {
    /// Input tensor: a registered parameter, a data constant, or a value
    /// (mask, ones) emitted during backward.
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// Multiply by a compile-time-fixed scalar coefficient.
    ScalarMul(f64),
    /// Multiply a tensor by a one-element node (broadcast). The second input
    /// is the scalar.
    MulScalarNode,
    Tanh,
    Relu,
    Transpose,
    /// Row-wise softmax of a rank-2 tensor.
    Softmax,
    /// [m,n] -> [m,1] sum over columns.
    RowSum,
    /// [m,1] -> [m,ncols] repeat across columns.
    BroadcastCol,
    /// [m,n] -> [1,n] sum over rows.
    SumAxis0,
    /// [1,n] -> [nrows,n] repeat across rows.
    BroadcastAxis0,
    /// x [m,n] + bias [1,n] broadcast over rows.
    BroadcastAddBias,
    /// Mean of squared differences over all elements; rank-0 output.
    Mse,
    /// Mean over rows of -sum(targets * log softmax(logits)); rank-0 output.
    /// Targets are treated as labels, not differentiated.
    SoftmaxCrossEntropy,
    ReduceMean,
    ReduceSum,
}

struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation tape. Node inputs always reference earlier nodes,
/// so ascending id order is a topological order and a single reverse sweep
/// performs backpropagation.
pub struct Graph {
    nodes: Vec<Node>,
    roots: Vec<(String, NodeId)>,
}

/// Gradients keyed by parameter name, in parameter order. When built with
/// `create_graph`, each entry also carries the tape node that computes it, so
/// the gradient can be differentiated again.
#[derive(Clone, Debug)]
pub struct GradMap {
    entries: Vec<(String, Tensor)>,
    nodes: Option<Vec<NodeId>>,
}

impl GradMap {
    pub fn from_pairs(entries: Vec<(String, Tensor)>) -> Self {
        GradMap {
            entries,
            nodes: None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        let idx = self.entries.iter().position(|(n, _)| n == name)?;
        self.nodes.as_ref().map(|ns| ns[idx])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Check that this map is keyed exactly like `params`, in order.
    pub fn check_keys(&self, params: &ParamSet) -> Result<()> {
        let grad_names: Vec<&str> = self.names().collect();
        let param_names: Vec<&str> = params.names().collect();
        if grad_names != param_names {
            return Err(Error::KeyMismatch(format!(
                "gradient keys {:?} do not match parameter keys {:?}",
                grad_names, param_names
            )));
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            roots: Vec::new(),
        }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn roots(&self) -> &[(String, NodeId)] {
        &self.roots
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind,
            inputs,
            value,
        });
        id
    }

    /// Register a named differentiable input. These are the roots `backward`
    /// reports gradients for.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(OpKind::Leaf, vec![], value);
        self.roots.push((name.to_string(), id));
        id
    }

    /// Add a constant input (data, masks). Gradient flow stops here.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, vec![], value)
    }

    fn shape_err(op: &'static str, details: String) -> Error {
        Error::ShapeMismatch { op, details }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = va[i * k + kk];
                for j in 0..n {
                    out[i * n + j] += aik * vb[kk * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(OpKind::MatMul, vec![a, b], value))
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        kind: OpKind,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let value = self
            .value(a)
            .zip(self.value(b), f)
            .map_err(|_| Self::shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())))?;
        Ok(self.push(kind, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("subtract", OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("elementwise-multiply", OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, c: f64, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| c * v);
        Ok(self.push(OpKind::ScalarMul(c), vec![x], value))
    }

    /// Multiply every element of `x` by the single value of node `s`.
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Self::shape_err(
                "multiply-by-scalar-node",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(OpKind::MulScalarNode, vec![x, s], value))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(f64::tanh);
        Ok(self.push(OpKind::Tanh, vec![x], value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(OpKind::Relu, vec![x], value))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Self::shape_err("transpose", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(OpKind::Transpose, vec![x], value))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Self::shape_err("softmax", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(OpKind::Softmax, vec![x], value))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Self::shape_err("row-sum", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x).values();
        let out: Vec<f64> = (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
        let value = Tensor::new(vec![m, 1], out)?;
        Ok(self.push(OpKind::RowSum, vec![x], value))
    }

    pub fn broadcast_col(&mut self, x: NodeId, ncols: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[1] != 1 {
            return Err(Self::shape_err("broadcast-col", format!("{:?}", s)));
        }
        let m = s[0];
        let v = self.value(x).values();
        let mut out = vec![0.0; m * ncols];
        for i in 0..m {
            out[i * ncols..(i + 1) * ncols].fill(v[i]);
        }
        let value = Tensor::new(vec![m, ncols], out)?;
        Ok(self.push(OpKind::BroadcastCol, vec![x], value))
    }

    pub fn sum_axis0(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Self::shape_err("sum-axis0", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x).values();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v[i * n + j];
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(OpKind::SumAxis0, vec![x], value))
    }

    pub fn broadcast_axis0(&mut self, x: NodeId, nrows: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[0] != 1 {
            return Err(Self::shape_err("broadcast-axis0", format!("{:?}", s)));
        }
        let n = s[1];
        let v = self.value(x).values().to_vec();
        let mut out = Vec::with_capacity(nrows * n);
        for _ in 0..nrows {
            out.extend_from_slice(&v);
        }
        let value = Tensor::new(vec![nrows, n], out)?;
        Ok(self.push(OpKind::BroadcastAxis0, vec![x], value))
    }

    /// x [m,n] plus bias [1,n], bias repeated over rows.
    pub fn broadcast_add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 2 || sb[0] != 1 || sb[1] != sx[1] {
            return Err(Self::shape_err(
                "broadcast-add-bias",
                format!("{:?} + {:?}", sx, sb),
            ));
        }
        let (m, n) = (sx[0], sx[1]);
        let (vx, vb) = (self.value(x).values(), self.value(bias).values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = vx[i * n + j] + vb[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(OpKind::BroadcastAddBias, vec![x, bias], value))
    }

    /// Mean squared error over all elements; rank-0 output.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Self::shape_err(
                "mean-squared-error",
                format!(
                    "{:?} vs {:?}",
                    self.value(pred).shape(),
                    self.value(target).shape()
                ),
            ));
        }
        let (vp, vt) = (self.value(pred).values(), self.value(target).values());
        let n = vp.len() as f64;
        let sum: f64 = vp
            .iter()
            .zip(vt)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(OpKind::Mse, vec![pred, target], Tensor::scalar(sum / n)))
    }

    /// Cross-entropy between row-wise softmax(logits) and target rows that
    /// each sum to 1 (one-hot labels), averaged over rows. Rank-0 output.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (sl, st) = (self.value(logits).shape(), self.value(targets).shape());
        if sl.len() != 2 || sl != st {
            return Err(Self::shape_err(
                "softmax-cross-entropy",
                format!("{:?} vs {:?}", sl, st),
            ));
        }
        let (m, n) = (sl[0], sl[1]);
        let (vl, vt) = (self.value(logits).values(), self.value(targets).values());
        let mut total = 0.0;
        for i in 0..m {
            let row = &vl[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                total += vt[i * n + j] * (lse - row[j]);
            }
        }
        let value = Tensor::scalar(total / m as f64);
        Ok(self.push(OpKind::SoftmaxCrossEntropy, vec![logits, targets], value))
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(OpKind::ReduceMean, vec![x], Tensor::scalar(mean)))
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let sum = self.value(x).values().iter().sum::<f64>();
        Ok(self.push(OpKind::ReduceSum, vec![x], Tensor::scalar(sum)))
    }

    /// Gradients of a scalar `output` with respect to every registered
    /// parameter root. With `create_graph`, the returned map also carries the
    /// tape nodes computing each gradient, ready for a second backward pass.
    pub fn backward(&mut self, output: NodeId, create_graph: bool) -> Result<GradMap> {
        let roots = self.roots.clone();
        let wrt: Vec<NodeId> = roots.iter().map(|(_, id)| *id).collect();
        let grad_ids = self.backward_nodes(output, &wrt)?;
        let entries = roots
            .iter()
            .zip(&grad_ids)
            .map(|((name, _), gid)| (name.clone(), self.value(*gid).clone()))
            .collect();
        Ok(GradMap {
            entries,
            nodes: create_graph.then_some(grad_ids),
        })
    }

    /// Gradients of a scalar `output` with respect to arbitrary tape nodes,
    /// returned as tape nodes. Nodes not on a path to the output get exact
    /// zero tensors. This is the double-backward workhorse: the emitted nodes
    /// can themselves be differentiated by a later call.
    pub fn backward_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(output).numel() != 1 {
            return Err(Error::NonScalarOutput {
                shape: self.value(output).shape().to_vec(),
            });
        }
        // adjoint[i] = node computing dOutput/dNode_i, for nodes reached so
        // far. The sweep walks ids in descending order; nodes emitted during
        // the sweep get ids above `output` and are never revisited by it.
        let mut adjoint: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        let seed = self.constant(Tensor::ones(self.value(output).shape()));
        adjoint[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(a) = adjoint[id] else { continue };
            let kind = self.nodes[id].kind.clone();
            let inputs = self.nodes[id].inputs.clone();
            let contribs = self.vjp(&kind, &inputs, NodeId(id), a)?;
            for (input, contrib) in contribs {
                // Accumulation order is fixed by the descending sweep, so
                // repeated runs produce bit-identical sums.
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(existing) => self.add(existing, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|id| match adjoint.get(id.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.value(*id).shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of one node: upstream adjoint `a` in, one
    /// contribution per differentiable input out — emitted as tape nodes so
    /// the chain stays differentiable.
    fn vjp(
        &mut self,
        kind: &OpKind,
        inputs: &[NodeId],
        out: NodeId,
        a: NodeId,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        Ok(match kind {
            OpKind::Leaf => vec![],
            OpKind::MatMul => {
                let (x, y) = (inputs[0], inputs[1]);
                let yt = self.transpose(y)?;
                let dx = self.matmul(a, yt)?;
                let xt = self.transpose(x)?;
                let dy = self.matmul(xt, a)?;
                vec![(x, dx), (y, dy)]
            }
            OpKind::Add => vec![(inputs[0], a), (inputs[1], a)],
            OpKind::Sub => {
                let dy = self.scalar_mul(-1.0, a)?;
                vec![(inputs[0], a), (inputs[1], dy)]
            }
            OpKind::Mul => {
                let (x, y) = (inputs[0], inputs[1]);
                let dx = self.mul(a, y)?;
                let dy = self.mul(a, x)?;
                vec![(x, dx), (y, dy)]
            }
            OpKind::ScalarMul(c) => {
                let dx = self.scalar_mul(*c, a)?;
                vec![(inputs[0], dx)]
            }
            OpKind::MulScalarNode => {
                let (x, s) = (inputs[0], inputs[1]);
                let dx = self.mul_scalar_node(a, s)?;
                let prod = self.mul(a, x)?;
                let ds_sum = self.reduce_sum(prod)?;
                // Reshape the rank-0 sum to the scalar operand's shape is a
                // no-op at one element; gradients are compared by value.
                vec![(x, dx), (s, ds_sum)]
            }
            OpKind::Tanh => {
                // d tanh = 1 - tanh^2, expressed through the cached output
                // node so a second backward sees the dependence on x.
                let o = out;
                let oo = self.mul(o, o)?;
                let ones = self.constant(Tensor::ones(self.value(o).shape()));
                let one_minus = self.sub(ones, oo)?;
                let dx = self.mul(a, one_minus)?;
                vec![(inputs[0], dx)]
            }
            OpKind::Relu => {
                // Slope is piecewise constant (0 at the kink by convention),
                // so a constant mask is the exact derivative almost
                // everywhere and correct for higher-order passes.
                let mask = self.value(inputs[0]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                let dx = self.mul(a, mask)?;
                vec![(inputs[0], dx)]
            }
            OpKind::Transpose => {
                let dx = self.transpose(a)?;
                vec![(inputs[0], dx)]
            }
            OpKind::Softmax => {
                // Row-wise: dx = o * (a - rowsum(a * o)).
                let o = out;
                let ncols = self.value(o).shape()[1];
                let ao = self.mul(a, o)?;
                let s = self.row_sum(ao)?;
                let sb = self.broadcast_col(s, ncols)?;
                let diff = self.sub(a, sb)?;
                let dx = self.mul(o, diff)?;
                vec![(inputs[0], dx)]
            }
            OpKind::RowSum => {
                let ncols = self.value(inputs[0]).shape()[1];
                let dx = self.broadcast_col(a, ncols)?;
                vec![(inputs[0], dx)]
            }
            OpKind::BroadcastCol => {
                let dx = self.row_sum(a)?;
                vec![(inputs[0], dx)]
            }
            OpKind::SumAxis0 => {
                let nrows = self.value(inputs[0]).shape()[0];
                let dx = self.broadcast_axis0(a, nrows)?;
                vec![(inputs[0], dx)]
            }
            OpKind::BroadcastAxis0 => {
                let dx = self.sum_axis0(a)?;
                vec![(inputs[0], dx)]
            }
            OpKind::BroadcastAddBias => {
                let dbias = self.sum_axis0(a)?;
                vec![(inputs[0], a), (inputs[1], dbias)]
            }
            OpKind::Mse => {
                let (p, t) = (inputs[0], inputs[1]);
                let n = self.value(p).numel() as f64;
                let diff = self.sub(p, t)?;
                let scaled = self.mul_scalar_node(diff, a)?;
                let dp = self.scalar_mul(2.0 / n, scaled)?;
                let dt = self.scalar_mul(-2.0 / n, scaled)?;
                vec![(p, dp), (t, dt)]
            }
            OpKind::SoftmaxCrossEntropy => {
                // dL/dlogits = (softmax(logits) - targets) / batch, scaled by
                // the upstream scalar. Targets are labels: no gradient.
                let (logits, targets) = (inputs[0], inputs[1]);
                let b = self.value(logits).shape()[0] as f64;
                let sm = self.softmax(logits)?;
                let diff = self.sub(sm, targets)?;
                let scaled = self.mul_scalar_node(diff, a)?;
                let dl = self.scalar_mul(1.0 / b, scaled)?;
                vec![(logits, dl)]
            }
            OpKind::ReduceMean => {
                let x = inputs[0];
                let n = self.value(x).numel() as f64;
                let ones = self.constant(Tensor::ones(self.value(x).shape()));
                let spread = self.mul_scalar_node(ones, a)?;
                let dx = self.scalar_mul(1.0 / n, spread)?;
                vec![(x, dx)]
            }
            OpKind::ReduceSum => {
                let x = inputs[0];
                let ones = self.constant(Tensor::ones(self.value(x).shape()));
                let dx = self.mul_scalar_node(ones, a)?;
                vec![(x, dx)]
            }
        })
    }
}

/// Central-difference gradient oracle: (f(θ+h·e) − f(θ−h·e)) / 2h per
/// coordinate. Slow and simple on purpose — it is the independent check the
/// analytic gradients are tested against.
pub fn finite_diff_grad(
    loss_fn: impl Fn(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    h: f64,
) -> Result<GradMap> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut entries = Vec::new();
    for param in params.iter() {
        let mut grad = vec![0.0; param.tensor.numel()];
        for i in 0..param.tensor.numel() {
            let plus = loss_fn(&params.perturbed(&param.name, i, h))?;
            let minus = loss_fn(&params.perturbed(&param.name, i, -h))?;
            for (tag, v) in [("+", plus), ("-", minus)] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteEval {
                        name: format!("{}{}", param.name, tag),
                        index: i,
                    });
                }
            }
            grad[i] = (plus - minus) / (2.0 * h);
        }
        entries.push((
            param.name.clone(),
            Tensor::new(param.tensor.shape().to_vec(), grad)?,
        ));
    }
    Ok(GradMap::from_pairs(entries))
}

/// Agreement check used throughout the gradient tests: absolute difference
/// bounded by `tol * (1 + |reference|)` per coordinate, which behaves like a
/// relative bound away from zero without blowing up at zero.
pub fn max_rel_err(got: &Tensor, want: &Tensor) -> f64 {
    got.values()
        .iter()
        .zip(want.values())
        .map(|(&g, &w)| (g - w).abs() / (1.0 + w.abs()))
        .fold(0.0, f64::max)
}
