//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! A graph is built by applying kernels to previously created nodes; each
//! `apply` runs the forward computation immediately, so node values are
//! available while the graph is still being assembled (mining code, for
//! example, reads embedding values before deciding which loss terms to add).
//! `backward` walks the nodes in reverse creation order and accumulates one
//! gradient tensor per bound parameter. `reeval` recomputes every node from
//! the current parameter store while keeping all recorded attributes
//! (dropout masks, batch-norm mode) fixed, which is what the finite-difference
//! checker needs.

use std::collections::BTreeMap;

use crate::error::{NumgradError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Named parameter tensors. BTreeMap keeps iteration order deterministic,
/// which matters for bit-exact training replay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| NumgradError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NumgradError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Kernel identifiers with their attributes. Every kernel is differentiable
/// with respect to every tensor input (masks and indices are attributes or
/// constant inputs, not differentiated).
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// inputs `[w, x]` with `w: [out,in]`, `x: [in]` or `[r,in]` -> `[out]` / `[r,out]`.
    /// Computes `x · wᵀ` (matrix-vector when `x` is 1-D).
    Linear,
    /// inputs `[x, scale, shift, running_mean, running_var]`, `x: [r,n]`.
    /// Training mode normalizes with batch statistics (and records them on
    /// the node); inference mode normalizes with the running statistics.
    BatchNorm { training: bool, eps: f64 },
    /// inputs `[x, mask]`, same shape. Training: `x ⊙ mask` where the mask
    /// holds `0` or `1/keep` entries drawn by the caller. Inference: identity.
    Dropout { keep: f64, training: bool },
    /// `[n]` treated as one row, or `[r,n]`: softmax along each row.
    SoftmaxRow,
    /// Elementwise logistic.
    Sigmoid,
    /// `[r,n] -> [n]`: mean over rows.
    MeanRows,
    /// inputs `[w, x]` with `w: [r]`, `x: [r,n]` -> `[n]`: Σ_r w_r x_r.
    WeightedSumRows,
    /// inputs `[x, y, m]`, same shape -> scalar: Σ_k m_k (x_k − y_k)².
    SquaredDistanceMasked,
    /// Elementwise `max(0, x + margin)`.
    Hinge { margin: f64 },
    /// inputs `[x_1..x_k]`, same shape -> Σ_k c_k x_k.
    ScalarWeightedSum { coeffs: Vec<f64> },
    /// input `[table: [R,n]]` -> `[k,n]`: selected rows; gradient scatter-adds.
    GatherRows { indices: Vec<usize> },
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// `[r,c] -> [r]`: per-row sum over columns.
    RowSums,
    /// Reinterpret data under a new shape of equal size.
    Reshape { shape: Vec<usize> },
    /// inputs `[logits, targets]`, same shape -> scalar: summed stable
    /// sigmoid cross-entropy Σ max(l,0) − l·t + ln(1 + e^{−|l|}).
    SigmoidCrossEntropy,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Linear => "linear",
            Kernel::BatchNorm { .. } => "batch-normalize",
            Kernel::Dropout { .. } => "dropout",
            Kernel::SoftmaxRow => "softmax-row",
            Kernel::Sigmoid => "sigmoid",
            Kernel::MeanRows => "mean-rows",
            Kernel::WeightedSumRows => "weighted-sum-rows",
            Kernel::SquaredDistanceMasked => "squared-distance-masked",
            Kernel::Hinge { .. } => "hinge",
            Kernel::ScalarWeightedSum { .. } => "scalar-weighted-sum",
            Kernel::GatherRows { .. } => "gather-rows",
            Kernel::Mul => "mul",
            Kernel::RowSums => "row-sums",
            Kernel::Reshape { .. } => "reshape",
            Kernel::SigmoidCrossEntropy => "sigmoid-cross-entropy",
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Param(String),
    Constant,
    Apply(Kernel, Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    source: Source,
    value: Tensor,
    /// Batch mean/variance recorded by a training-mode BatchNorm node, for
    /// the trainer to fold into the running statistics after the step.
    bn_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Batch statistics harvested from one training-mode BatchNorm node.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub node: NodeId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
}

impl ComputeGraph {
    pub fn new() -> Self {
        ComputeGraph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            loss: None,
        }
    }

    fn push(&mut self, source: Source, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            source,
            value,
            bn_stats: None,
        });
        id
    }

    /// Bind a named parameter from the store as a leaf node. Each name may
    /// be bound at most once; reuse the returned id for all downstream uses.
    pub fn param(&mut self, name: &str, store: &ParamStore) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(NumgradError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let value = store.get(name)?.clone();
        if !value.all_finite() {
            return Err(NumgradError::NonFiniteLeaf {
                name: name.to_string(),
            });
        }
        let id = self.push(Source::Param(name.to_string()), value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Add a constant leaf. Constants are snapshots: `reeval` does not
    /// re-read them, so frozen parameters passed in as constants stay fixed.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NumgradError::NonFiniteLeaf {
                name: "<constant>".to_string(),
            });
        }
        Ok(self.push(Source::Constant, value))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(value))
    }

    /// Apply a kernel to existing nodes, computing the output immediately.
    pub fn apply(&mut self, kernel: Kernel, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        let in_vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, bn_stats) = forward(&kernel, &in_vals)?;
        if !value.all_finite() {
            return Err(NumgradError::NonFinite {
                kernel: kernel.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            source: Source::Apply(kernel, inputs.to_vec()),
            value,
            bn_stats,
        });
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Mark the scalar output node that backward() differentiates.
    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        let shape = self.nodes[id].value.shape().to_vec();
        if self.nodes[id].value.len() != 1 {
            return Err(NumgradError::LossNotScalar { shape });
        }
        self.loss = Some(id);
        Ok(())
    }

    pub fn loss_value(&self) -> Result<f64> {
        let id = self.loss.ok_or(NumgradError::NoLoss)?;
        self.nodes[id].value.scalar_value()
    }

    /// Batch statistics of every training-mode BatchNorm node, in node order.
    pub fn bn_batch_stats(&self) -> Vec<BnBatchStats> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| {
                n.bn_stats.as_ref().map(|(mean, var)| BnBatchStats {
                    node: id,
                    mean: mean.clone(),
                    var: var.clone(),
                })
            })
            .collect()
    }

    /// Recompute every node value from the current store, replaying all
    /// recorded attributes (dropout masks, batch-norm mode, indices).
    pub fn reeval(&mut self, store: &ParamStore) -> Result<()> {
        for id in 0..self.nodes.len() {
            match &self.nodes[id].source {
                Source::Param(name) => {
                    let value = store.get(name)?.clone();
                    if !value.all_finite() {
                        return Err(NumgradError::NonFiniteLeaf { name: name.clone() });
                    }
                    self.nodes[id].value = value;
                }
                Source::Constant => {}
                Source::Apply(kernel, inputs) => {
                    let kernel = kernel.clone();
                    let inputs = inputs.clone();
                    let in_vals: Vec<&Tensor> =
                        inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let (value, bn_stats) = forward(&kernel, &in_vals)?;
                    if !value.all_finite() {
                        return Err(NumgradError::NonFinite {
                            kernel: kernel.name(),
                            node: id,
                        });
                    }
                    self.nodes[id].value = value;
                    self.nodes[id].bn_stats = bn_stats;
                }
            }
        }
        Ok(())
    }

    /// Reverse-mode differentiation of the loss with respect to every bound
    /// parameter. Parameters the loss does not reach get zero gradients.
    pub fn backward(&self) -> Result<BTreeMap<String, Tensor>> {
        let loss_id = self.loss.ok_or(NumgradError::NoLoss)?;
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss_id] = Some(Tensor::full(self.nodes[loss_id].value.shape(), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            if let Source::Apply(kernel, inputs) = &self.nodes[id].source {
                if !adj.all_finite() {
                    return Err(NumgradError::NonFiniteGradient {
                        kernel: kernel.name(),
                        node: id,
                    });
                }
                let in_vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let input_grads = backward_kernel(kernel, &in_vals, &self.nodes[id], &adj)?;
                for (slot, grad) in input_grads.into_iter().enumerate() {
                    if let Some(g) = grad {
                        let target = inputs[slot];
                        match &mut adjoints[target] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += b;
                                }
                            }
                            None => adjoints[target] = Some(g),
                        }
                    }
                }
                adjoints[id] = Some(adj);
            } else {
                adjoints[id] = Some(adj);
            }
        }

        let mut grads = BTreeMap::new();
        for (name, &id) in &self.params {
            let grad = match &adjoints[id] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id].value.shape()),
            };
            if !grad.all_finite() {
                return Err(NumgradError::NonFiniteGradient {
                    kernel: "param",
                    node: id,
                });
            }
            grads.insert(name.clone(), grad);
        }
        Ok(grads)
    }
}

fn shape_err(kernel: &'static str, detail: String) -> NumgradError {
    NumgradError::ShapeMismatch { kernel, detail }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

type ForwardOut = (Tensor, Option<(Vec<f64>, Vec<f64>)>);

fn forward(kernel: &Kernel, inputs: &[&Tensor]) -> Result<ForwardOut> {
    let name = kernel.name();
    let arity_err = |n: usize| {
        shape_err(
            name,
            format!("expected {n} inputs, got {got}", got = inputs.len()),
        )
    };
    match kernel {
        Kernel::Linear => {
            if inputs.len() != 2 {
                return Err(arity_err(2));
            }
            let (w, x) = (inputs[0], inputs[1]);
            if w.shape().len() != 2 {
                return Err(shape_err(name, format!("w must be 2-D, got {:?}", w.shape())));
            }
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            match x.shape().len() {
                1 => {
                    if x.shape()[0] != in_dim {
                        return Err(shape_err(
                            name,
                            format!("w is {:?} but x is {:?}", w.shape(), x.shape()),
                        ));
                    }
                    let mut out = vec![0.0; out_dim];
                    for (o, out_v) in out.iter_mut().enumerate() {
                        *out_v = w.row(o).iter().zip(x.data()).map(|(a, b)| a * b).sum();
                    }
                    Ok((Tensor::vector(&out), None))
                }
                2 => {
                    let rows = x.shape()[0];
                    if x.shape()[1] != in_dim {
                        return Err(shape_err(
                            name,
                            format!("w is {:?} but x is {:?}", w.shape(), x.shape()),
                        ));
                    }
                    let mut out = vec![0.0; rows * out_dim];
                    for r in 0..rows {
                        let xr = x.row(r);
                        for o in 0..out_dim {
                            out[r * out_dim + o] =
                                w.row(o).iter().zip(xr).map(|(a, b)| a * b).sum();
                        }
                    }
                    Ok((Tensor::matrix(rows, out_dim, out)?, None))
                }
                _ => Err(shape_err(name, format!("x must be 1-D or 2-D, got {:?}", x.shape()))),
            }
        }
        Kernel::BatchNorm { training, eps } => {
            if inputs.len() != 5 {
                return Err(arity_err(5));
            }
            let (x, scale, shift, rmean, rvar) =
                (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
            if x.shape().len() != 2 {
                return Err(shape_err(name, format!("x must be 2-D, got {:?}", x.shape())));
            }
            let (rows, n) = (x.shape()[0], x.shape()[1]);
            for (label, t) in [("scale", scale), ("shift", shift), ("running_mean", rmean), ("running_var", rvar)] {
                if t.shape() != [n] {
                    return Err(shape_err(
                        name,
                        format!("{label} must be [{n}], got {:?}", t.shape()),
                    ));
                }
            }
            if rows == 0 {
                return Err(shape_err(name, "x has zero rows".to_string()));
            }
            let (mean, var) = if *training {
                let mut mean = vec![0.0; n];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        let d = x.row(r)[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                (mean, var)
            } else {
                (rmean.data().to_vec(), rvar.data().to_vec())
            };
            let mut out = vec![0.0; rows * n];
            for r in 0..rows {
                for j in 0..n {
                    let xhat = (x.row(r)[j] - mean[j]) / (var[j] + eps).sqrt();
                    out[r * n + j] = scale.data()[j] * xhat + shift.data()[j];
                }
            }
            let stats = if *training { Some((mean, var)) } else { None };
            Ok((Tensor::matrix(rows, n, out)?, stats))
        }
        Kernel::Dropout { keep, training } => {
            if inputs.len() != 2 {
                return Err(arity_err(2));
            }
            if !(*keep > 0.0 && *keep <= 1.0) {
                return Err(NumgradError::InvalidAttr {
                    kernel: name,
                    detail: format!("keep must be in (0,1], got {keep}"),
                });
            }
            let (x, mask) = (inputs[0], inputs[1]);
            if x.shape() != mask.shape() {
                return Err(shape_err(
                    name,
                    format!("x {:?} vs mask {:?}", x.shape(), mask.shape()),
                ));
            }
            if !training {
                return Ok((x.clone(), None));
            }
            let data: Vec<f64> = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
            Ok((Tensor::from_vec(x.shape().to_vec(), data)?, None))
        }
        Kernel::SoftmaxRow => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let x = inputs[0];
            if x.shape().is_empty() {
                return Err(shape_err(name, "input must be 1-D or 2-D".to_string()));
            }
            let (rows, n) = (x.rows(), x.cols());
            if n == 0 {
                return Err(shape_err(name, "rows must be non-empty".to_string()));
            }
            let mut out = vec![0.0; rows * n];
            for r in 0..rows {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    out[r * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[r * n + j] /= sum;
                }
            }
            Ok((Tensor::from_vec(x.shape().to_vec(), out)?, None))
        }
        Kernel::Sigmoid => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let x = inputs[0];
            let data: Vec<f64> = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
            Ok((Tensor::from_vec(x.shape().to_vec(), data)?, None))
        }
        Kernel::MeanRows => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let x = inputs[0];
            if x.shape().len() != 2 || x.shape()[0] == 0 {
                return Err(shape_err(
                    name,
                    format!("input must be 2-D with rows >= 1, got {:?}", x.shape()),
                ));
            }
            let (rows, n) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; n];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= rows as f64;
            }
            Ok((Tensor::vector(&out), None))
        }
        Kernel::WeightedSumRows => {
            if inputs.len() != 2 {
                return Err(arity_err(2));
            }
            let (w, x) = (inputs[0], inputs[1]);
            if x.shape().len() != 2 || w.shape() != [x.shape()[0]] {
                return Err(shape_err(
                    name,
                    format!("weights {:?} vs rows {:?}", w.shape(), x.shape()),
                ));
            }
            let (rows, n) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; n];
            for r in 0..rows {
                let wr = w.data()[r];
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += wr * v;
                }
            }
            Ok((Tensor::vector(&out), None))
        }
        Kernel::SquaredDistanceMasked => {
            if inputs.len() != 3 {
                return Err(arity_err(3));
            }
            let (x, y, m) = (inputs[0], inputs[1], inputs[2]);
            if x.shape() != y.shape() || x.shape() != m.shape() {
                return Err(shape_err(
                    name,
                    format!("{:?} vs {:?} vs {:?}", x.shape(), y.shape(), m.shape()),
                ));
            }
            let sum = x
                .data()
                .iter()
                .zip(y.data())
                .zip(m.data())
                .map(|((a, b), w)| w * (a - b) * (a - b))
                .sum();
            Ok((Tensor::scalar(sum), None))
        }
        Kernel::Hinge { margin } => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let x = inputs[0];
            let data: Vec<f64> = x.data().iter().map(|&v| (v + margin).max(0.0)).collect();
            Ok((Tensor::from_vec(x.shape().to_vec(), data)?, None))
        }
        Kernel::ScalarWeightedSum { coeffs } => {
            if inputs.is_empty() || inputs.len() != coeffs.len() {
                return Err(shape_err(
                    name,
                    format!("{} inputs vs {} coefficients", inputs.len(), coeffs.len()),
                ));
            }
            let shape = inputs[0].shape().to_vec();
            for t in inputs.iter() {
                if t.shape() != shape {
                    return Err(shape_err(
                        name,
                        format!("all inputs must share shape {shape:?}, got {:?}", t.shape()),
                    ));
                }
            }
            let mut data = vec![0.0; inputs[0].len()];
            for (t, &c) in inputs.iter().zip(coeffs) {
                for (o, v) in data.iter_mut().zip(t.data()) {
                    *o += c * v;
                }
            }
            Ok((Tensor::from_vec(shape, data)?, None))
        }
        Kernel::GatherRows { indices } => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let table = inputs[0];
            if table.shape().len() != 2 {
                return Err(shape_err(
                    name,
                    format!("table must be 2-D, got {:?}", table.shape()),
                ));
            }
            let (rows, n) = (table.shape()[0], table.shape()[1]);
            if indices.is_empty() {
                return Err(shape_err(name, "index list is empty".to_string()));
            }
            let mut data = Vec::with_capacity(indices.len() * n);
            for &idx in indices {
                if idx >= rows {
                    return Err(shape_err(
                        name,
                        format!("index {idx} out of range for table with {rows} rows"),
                    ));
                }
                data.extend_from_slice(table.row(idx));
            }
            Ok((Tensor::matrix(indices.len(), n, data)?, None))
        }
        Kernel::Mul => {
            if inputs.len() != 2 {
                return Err(arity_err(2));
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Ok((Tensor::from_vec(a.shape().to_vec(), data)?, None))
        }
        Kernel::RowSums => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let x = inputs[0];
            if x.shape().len() != 2 {
                return Err(shape_err(name, format!("input must be 2-D, got {:?}", x.shape())));
            }
            let rows = x.shape()[0];
            let out: Vec<f64> = (0..rows).map(|r| x.row(r).iter().sum()).collect();
            Ok((Tensor::vector(&out), None))
        }
        Kernel::Reshape { shape } => {
            if inputs.len() != 1 {
                return Err(arity_err(1));
            }
            let x = inputs[0];
            let expected: usize = shape.iter().product();
            if expected != x.len() {
                return Err(shape_err(
                    name,
                    format!("cannot reshape {:?} into {:?}", x.shape(), shape),
                ));
            }
            Ok((Tensor::from_vec(shape.clone(), x.data().to_vec())?, None))
        }
        Kernel::SigmoidCrossEntropy => {
            if inputs.len() != 2 {
                return Err(arity_err(2));
            }
            let (logits, targets) = (inputs[0], inputs[1]);
            if logits.shape() != targets.shape() {
                return Err(shape_err(
                    name,
                    format!("{:?} vs {:?}", logits.shape(), targets.shape()),
                ));
            }
            let sum = logits
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| l.max(0.0) - l * t + (1.0 + (-l.abs()).exp()).ln())
                .sum();
            Ok((Tensor::scalar(sum), None))
        }
    }
}

/// Per-input gradients of a kernel application; `None` marks an input slot
/// the kernel does not differentiate (none currently).
fn backward_kernel(
    kernel: &Kernel,
    inputs: &[&Tensor],
    node: &Node,
    adj: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    match kernel {
        Kernel::Linear => {
            let (w, x) = (inputs[0], inputs[1]);
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let rows = if x.shape().len() == 1 { 1 } else { x.shape()[0] };
            let mut dw = vec![0.0; out_dim * in_dim];
            let mut dx = vec![0.0; rows * in_dim];
            for r in 0..rows {
                let xr = x.row(r);
                let ar = adj.row(r);
                for o in 0..out_dim {
                    let a = ar[o];
                    if a == 0.0 {
                        continue;
                    }
                    let wo = w.row(o);
                    for i in 0..in_dim {
                        dw[o * in_dim + i] += a * xr[i];
                        dx[r * in_dim + i] += a * wo[i];
                    }
                }
            }
            let dx_t = Tensor::from_vec(x.shape().to_vec(), dx)?;
            Ok(vec![
                Some(Tensor::matrix(out_dim, in_dim, dw)?),
                Some(dx_t),
            ])
        }
        Kernel::BatchNorm { training, eps } => {
            let (x, scale) = (inputs[0], inputs[1]);
            let (rows, n) = (x.shape()[0], x.shape()[1]);
            let (mean, var): (Vec<f64>, Vec<f64>) = if *training {
                node.bn_stats
                    .clone()
                    .expect("training batch-norm node records batch stats")
            } else {
                (inputs[3].data().to_vec(), inputs[4].data().to_vec())
            };
            let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            // xhat and per-feature reductions
            let mut dscale = vec![0.0; n];
            let mut dshift = vec![0.0; n];
            let mut sum_dxhat = vec![0.0; n];
            let mut sum_dxhat_xhat = vec![0.0; n];
            let mut xhat = vec![0.0; rows * n];
            let mut dxhat = vec![0.0; rows * n];
            for r in 0..rows {
                for j in 0..n {
                    let xh = (x.row(r)[j] - mean[j]) * istd[j];
                    let dy = adj.row(r)[j];
                    xhat[r * n + j] = xh;
                    dscale[j] += dy * xh;
                    dshift[j] += dy;
                    let dxh = dy * scale.data()[j];
                    dxhat[r * n + j] = dxh;
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xh;
                }
            }
            let mut dx = vec![0.0; rows * n];
            if *training {
                let rf = rows as f64;
                for r in 0..rows {
                    for j in 0..n {
                        dx[r * n + j] = (istd[j] / rf)
                            * (rf * dxhat[r * n + j]
                                - sum_dxhat[j]
                                - xhat[r * n + j] * sum_dxhat_xhat[j]);
                    }
                }
            } else {
                for r in 0..rows {
                    for j in 0..n {
                        dx[r * n + j] = dxhat[r * n + j] * istd[j];
                    }
                }
            }
            Ok(vec![
                Some(Tensor::matrix(rows, n, dx)?),
                Some(Tensor::vector(&dscale)),
                Some(Tensor::vector(&dshift)),
                None,
                None,
            ])
        }
        Kernel::Dropout { training, .. } => {
            let x = inputs[0];
            if !training {
                return Ok(vec![Some(adj.clone()), None]);
            }
            let mask = inputs[1];
            let dx: Vec<f64> = adj.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
            Ok(vec![Some(Tensor::from_vec(x.shape().to_vec(), dx)?), None])
        }
        Kernel::SoftmaxRow => {
            let y = &node.value;
            let (rows, n) = (y.rows(), y.cols());
            let mut dx = vec![0.0; rows * n];
            for r in 0..rows {
                let yr = y.row(r);
                let ar = adj.row(r);
                let dot: f64 = yr.iter().zip(ar).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx[r * n + j] = yr[j] * (ar[j] - dot);
                }
            }
            Ok(vec![Some(Tensor::from_vec(y.shape().to_vec(), dx)?)])
        }
        Kernel::Sigmoid => {
            let y = &node.value;
            let dx: Vec<f64> = y
                .data()
                .iter()
                .zip(adj.data())
                .map(|(&s, &a)| a * s * (1.0 - s))
                .collect();
            Ok(vec![Some(Tensor::from_vec(y.shape().to_vec(), dx)?)])
        }
        Kernel::MeanRows => {
            let x = inputs[0];
            let (rows, n) = (x.shape()[0], x.shape()[1]);
            let rf = rows as f64;
            let mut dx = vec![0.0; rows * n];
            for r in 0..rows {
                for j in 0..n {
                    dx[r * n + j] = adj.data()[j] / rf;
                }
            }
            Ok(vec![Some(Tensor::matrix(rows, n, dx)?)])
        }
        Kernel::WeightedSumRows => {
            let (w, x) = (inputs[0], inputs[1]);
            let (rows, n) = (x.shape()[0], x.shape()[1]);
            let mut dw = vec![0.0; rows];
            let mut dx = vec![0.0; rows * n];
            for r in 0..rows {
                let xr = x.row(r);
                let wr = w.data()[r];
                for j in 0..n {
                    dw[r] += adj.data()[j] * xr[j];
                    dx[r * n + j] = wr * adj.data()[j];
                }
            }
            Ok(vec![
                Some(Tensor::vector(&dw)),
                Some(Tensor::matrix(rows, n, dx)?),
            ])
        }
        Kernel::SquaredDistanceMasked => {
            let (x, y, m) = (inputs[0], inputs[1], inputs[2]);
            let a = adj.data()[0];
            let mut dx = vec![0.0; x.len()];
            let mut dy = vec![0.0; x.len()];
            let mut dm = vec![0.0; x.len()];
            for i in 0..x.len() {
                let diff = x.data()[i] - y.data()[i];
                let g = 2.0 * m.data()[i] * diff * a;
                dx[i] = g;
                dy[i] = -g;
                dm[i] = diff * diff * a;
            }
            Ok(vec![
                Some(Tensor::from_vec(x.shape().to_vec(), dx)?),
                Some(Tensor::from_vec(x.shape().to_vec(), dy)?),
                Some(Tensor::from_vec(x.shape().to_vec(), dm)?),
            ])
        }
        Kernel::Hinge { margin } => {
            let x = inputs[0];
            let dx: Vec<f64> = x
                .data()
                .iter()
                .zip(adj.data())
                .map(|(&v, &a)| if v + margin > 0.0 { a } else { 0.0 })
                .collect();
            Ok(vec![Some(Tensor::from_vec(x.shape().to_vec(), dx)?)])
        }
        Kernel::ScalarWeightedSum { coeffs } => {
            let mut out = Vec::with_capacity(inputs.len());
            for (t, &c) in inputs.iter().zip(coeffs) {
                let dx: Vec<f64> = adj.data().iter().map(|&a| c * a).collect();
                out.push(Some(Tensor::from_vec(t.shape().to_vec(), dx)?));
            }
            Ok(out)
        }
        Kernel::GatherRows { indices } => {
            let table = inputs[0];
            let (rows, n) = (table.shape()[0], table.shape()[1]);
            let mut dt = vec![0.0; rows * n];
            for (k, &idx) in indices.iter().enumerate() {
                for j in 0..n {
                    dt[idx * n + j] += adj.row(k)[j];
                }
            }
            Ok(vec![Some(Tensor::matrix(rows, n, dt)?)])
        }
        Kernel::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da: Vec<f64> = adj.data().iter().zip(b.data()).map(|(g, v)| g * v).collect();
            let db: Vec<f64> = adj.data().iter().zip(a.data()).map(|(g, v)| g * v).collect();
            Ok(vec![
                Some(Tensor::from_vec(a.shape().to_vec(), da)?),
                Some(Tensor::from_vec(b.shape().to_vec(), db)?),
            ])
        }
        Kernel::RowSums => {
            let x = inputs[0];
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    dx[r * cols + c] = adj.data()[r];
                }
            }
            Ok(vec![Some(Tensor::matrix(rows, cols, dx)?)])
        }
        Kernel::Reshape { .. } => {
            let x = inputs[0];
            Ok(vec![Some(Tensor::from_vec(
                x.shape().to_vec(),
                adj.data().to_vec(),
            )?)])
        }
        Kernel::SigmoidCrossEntropy => {
            let (logits, targets) = (inputs[0], inputs[1]);
            let a = adj.data()[0];
            let dl: Vec<f64> = logits
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| a * (stable_sigmoid(l) - t))
                .collect();
            let dt: Vec<f64> = logits.data().iter().map(|&l| -a * l).collect();
            Ok(vec![
                Some(Tensor::from_vec(logits.shape().to_vec(), dl)?),
                Some(Tensor::from_vec(targets.shape().to_vec(), dt)?),
            ])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0, 0.0])).unwrap();
        let y = g.apply(Kernel::SoftmaxRow, &[x]).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let scores = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = scores.iter().map(|v| v + 7.5).collect();
        let mut g = ComputeGraph::new();
        let a = g.constant(Tensor::vector(&scores)).unwrap();
        let b = g.constant(Tensor::vector(&shifted)).unwrap();
        let ya = g.apply(Kernel::SoftmaxRow, &[a]).unwrap();
        let yb = g.apply(Kernel::SoftmaxRow, &[b]).unwrap();
        let sum: f64 = g.value(ya).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((u - v).abs() < 1e-12);
            assert!(*u > 0.0 && *u < 1.0);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.apply(Kernel::Sigmoid, &[x]).unwrap();
        assert_eq!(g.value(y).scalar_value().unwrap(), 0.5);
    }

    #[test]
    fn mean_rows_example() {
        let mut g = ComputeGraph::new();
        let x = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap())
            .unwrap();
        let y = g.apply(Kernel::MeanRows, &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn squared_distance_of_identical_inputs_is_zero() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0])).unwrap();
        let y = g.constant(Tensor::vector(&[1.0, 2.0])).unwrap();
        let m = g.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
        let d = g.apply(Kernel::SquaredDistanceMasked, &[x, y, m]).unwrap();
        assert_eq!(g.value(d).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::vector(&[1.0, -2.0, 3.0])).unwrap();
        let mask = g.constant(Tensor::vector(&[0.0, 2.0, 0.0])).unwrap();
        let y = g
            .apply(
                Kernel::Dropout {
                    keep: 0.5,
                    training: false,
                },
                &[x, mask],
            )
            .unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn dropout_rejects_bad_keep() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::vector(&[1.0])).unwrap();
        let m = g.constant(Tensor::vector(&[1.0])).unwrap();
        let err = g.apply(
            Kernel::Dropout {
                keep: 0.0,
                training: true,
            },
            &[x, m],
        );
        assert!(matches!(err, Err(NumgradError::InvalidAttr { .. })));
    }

    #[test]
    fn shape_mismatch_reports_kernel() {
        let mut g = ComputeGraph::new();
        let w = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let x = g.constant(Tensor::vector(&[1.0, 2.0])).unwrap();
        match g.apply(Kernel::Linear, &[w, x]) {
            Err(NumgradError::ShapeMismatch { kernel, .. }) => assert_eq!(kernel, "linear"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gradient_zero_at_distance_minimum() {
        let store = store_with("x", Tensor::vector(&[0.5, -0.25, 2.0]));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let y = g.constant(Tensor::vector(&[0.5, -0.25, 2.0])).unwrap();
        let m = g.constant(Tensor::vector(&[1.0, 1.0, 1.0])).unwrap();
        let d = g.apply(Kernel::SquaredDistanceMasked, &[x, y, m]).unwrap();
        g.set_loss(d).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let store = store_with("x", Tensor::vector(&[0.2, -1.0, 0.7]));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let s = g.apply(Kernel::SoftmaxRow, &[x]).unwrap();
        // arbitrary upstream: masked squared distance to a fixed target
        let t = g.constant(Tensor::vector(&[0.1, 0.5, 0.4])).unwrap();
        let m = g.constant(Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
        let d = g.apply(Kernel::SquaredDistanceMasked, &[s, t, m]).unwrap();
        g.set_loss(d).unwrap();
        let grads = g.backward().unwrap();
        let sum: f64 = grads["x"].data().iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::vector(&[1.0, 2.0]));
        store.insert("unused", Tensor::vector(&[3.0]));
        let mut g = ComputeGraph::new();
        let u = g.param("used", &store).unwrap();
        let _ = g.param("unused", &store).unwrap();
        let y = g.constant(Tensor::vector(&[0.0, 0.0])).unwrap();
        let m = g.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
        let d = g.apply(Kernel::SquaredDistanceMasked, &[u, y, m]).unwrap();
        g.set_loss(d).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["unused"].data(), &[0.0]);
        assert_eq!(grads["used"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn duplicate_param_binding_rejected() {
        let store = store_with("w", Tensor::vector(&[1.0]));
        let mut g = ComputeGraph::new();
        g.param("w", &store).unwrap();
        assert!(matches!(
            g.param("w", &store),
            Err(NumgradError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn reeval_tracks_store_changes_but_not_constants() {
        let mut store = store_with("x", Tensor::scalar(2.0));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        let y = g
            .apply(
                Kernel::ScalarWeightedSum {
                    coeffs: vec![1.0, 1.0],
                },
                &[x, c],
            )
            .unwrap();
        g.set_loss(y).unwrap();
        assert_eq!(g.loss_value().unwrap(), 5.0);
        store.get_mut("x").unwrap().data_mut()[0] = 10.0;
        g.reeval(&store).unwrap();
        assert_eq!(g.loss_value().unwrap(), 13.0);
    }

    #[test]
    fn non_finite_output_rejected() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::scalar(1e308)).unwrap();
        let err = g.apply(
            Kernel::ScalarWeightedSum {
                coeffs: vec![1e10],
            },
            &[x],
        );
        assert!(matches!(err, Err(NumgradError::NonFinite { .. })));
    }
}
