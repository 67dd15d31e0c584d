//! Reverse-mode differentiation on an append-only tape, plus a central
//! finite-difference gradient checker.
//!
//! Every node records its operation and parents at creation time, so parent
//! ids are always smaller than child ids and the backward pass is a single
//! sweep in decreasing id order. Heavy operations (attention) plug in through
//! [`CustomOp`] and supply their own fused backward.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written backward pass.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order, given the output adjoint.
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Result<Vec<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols(..) => "concat_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Exp(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
pub struct Node {
    id: NodeId,
    op: Op,
    value: Tensor,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, or zeros shaped like `like` when nothing flowed there.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::Contract(format!(
                "node {} is not on this tape (len {})",
                id.0,
                self.nodes.len()
            ))),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, value });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Adds a length-`N` vector to every row of an `M×N` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(&[a, bias])?;
        let (x, b) = (self.value(a), self.value(bias));
        if !x.is_matrix() || b.len() != x.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let mut v = x.clone();
        let n = x.cols();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += b.data()[i % n];
        }
        Ok(self.push(Op::AddRow(a, bias), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(&[a])?;
        let v = self.value(a).scale(s);
        Ok(self.push(Op::Scale(a, s), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let v = self.value(a).map(f64::exp);
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(Op::Sum(a), v))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.check(&[x, gain, bias])?;
        let xv = self.value(x);
        let n = xv.cols();
        if !xv.is_matrix() || self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let c = idx % n;
            *v = *v * g[c] + b[c];
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// Gathers rows of `table` (shape `V×D`) into an `ids.len()×D` matrix.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check(&[table])?;
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::Dimension("embedding table must be a matrix".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Dimension(format!(
                "embedding index {bad} out of range {}",
                t.rows()
            )));
        }
        let rows: Vec<&[f64]> = ids.iter().map(|&i| t.row(i)).collect();
        let v = if rows.is_empty() {
            Tensor::zeros(&[0, t.cols()])
        } else {
            Tensor::from_rows(&rows)?
        };
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check(parts)?;
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Mean over rows of `−ln softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(&[logits])?;
        let lv = self.value(logits);
        if !lv.is_matrix() || lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} vs {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Dimension(format!(
                "target {bad} out of range {}",
                lv.cols()
            )));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Registers a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<NodeId> {
        self.check(inputs)?;
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(&[loss])?;
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, contrib) in self.local_backward(node, &g)? {
                match &mut adj[parent.0] {
                    Some(a) => a.accumulate(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients { adjoints: adj })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b))?;
                let db = matmul_tn(self.value(*a), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, bias) => {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for i in 0..g.rows() {
                    for (s, v) in db.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                vec![(*a, g.clone()), (*bias, Tensor::new(shape, db)?)]
            }
            Op::Mul(a, b) => {
                let da = g.mul(self.value(*b))?;
                let db = g.mul(self.value(*a))?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                vec![(*a, da)]
            }
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.data()[0]))],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = Tensor::zeros(xhat.shape());
                let mut dxhat = vec![0.0; n];
                for i in 0..xhat.rows() {
                    let (gr, xr) = (g.row(i), xhat.row(i));
                    for c in 0..n {
                        dgain[c] += gr[c] * xr[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * gv[c];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let scale = inv_std[i] / n as f64;
                    for (c, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = scale * (n as f64 * dxhat[c] - s1 - xr[c] * s2);
                    }
                }
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                vec![
                    (*x, dx),
                    (*gain, Tensor::new(gshape, dgain)?),
                    (*bias, Tensor::new(bshape, dbias)?),
                ]
            }
            Op::Embedding { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (d, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                vec![(*table, dt)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut d = Tensor::zeros(pv.shape());
                    for i in 0..g.rows() {
                        d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    res.push((p, d));
                }
                res
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = g.data()[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d.row_mut(i)[t] -= 1.0;
                }
                for v in d.data_mut() {
                    *v *= s;
                }
                vec![(*logits, d)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let grads = op.backward(g, &vals, &node.value)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_ERR_FLOOR.max(analytic.abs()).max(numeric.abs())
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be > 0, got {h}")));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        for (v, at) in [(fp, orig + h), (fm, orig - h)] {
            if !v.is_finite() {
                return Err(Error::Evaluation { at, value: v });
            }
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Checks `f`'s analytic gradient against central differences. `f` returns
/// the value and its analytic gradient.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(x)?;
    if !analytic.same_shape(x) {
        return Err(Error::Dimension(format!(
            "analytic gradient {:?} for input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let numeric = numeric_gradient(|p| f(p).map(|(v, _)| v), x, h)?;
    Ok(compare(&analytic, &numeric))
}

fn compare(analytic: &Tensor, numeric: &Tensor) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        analytic: analytic.data().first().copied().unwrap_or(0.0),
        numeric: numeric.data().first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: e,
                worst_coordinate: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    report
}

/// Gradient-checks a tape-built scalar function with respect to each of its
/// inputs. `build` receives leaves for `inputs` (in order) and returns the
/// loss node. One report per input.
pub fn check_tape_gradients<B>(build: B, inputs: &[Tensor], h: f64) -> Result<Vec<GradCheckReport>>
where
    B: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let run = |vals: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };
    let (tape, ids, loss) = run(inputs)?;
    let grads = tape.backward(loss)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (p, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[p], input);
        let numeric = numeric_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[p] = x.clone();
                let (t, _, l) = run(&vals)?;
                Ok(t.value(l).data()[0])
            },
            input,
            h,
        )?;
        reports.push(compare(&analytic, &numeric));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_adjoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn half_square_gives_identity_gradient() {
        let mut tape = Tape::new();
        let xv = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn two_class_cross_entropy_matches_finite_differences() {
        let logits = Tensor::from_rows(&[[0.3, -1.1]]).unwrap();
        let report = grad_check(
            |x| {
                let mut tape = Tape::new();
                let l = tape.leaf(x.clone());
                let loss = tape.cross_entropy(l, &[1])?;
                let g = tape.backward(loss)?;
                Ok((tape.value(loss).data()[0], g.get(l).unwrap().clone()))
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn parents_precede_children() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let d = tape.exp(c).unwrap();
        for id in [c, d] {
            assert!(tape.node(id).parents().iter().all(|p| *p < id));
        }
        assert_eq!(tape.node(c).op_tag(), "matmul");
    }

    #[test]
    fn foreign_node_is_a_contract_error() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        other.leaf(Tensor::scalar(1.0));
        let far = other.leaf(Tensor::scalar(2.0));
        assert!(matches!(tape.exp(far), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(
            |x| {
                let v = x.data()[0];
                Ok((v * v, Tensor::scalar(2.0 * v)))
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!((r.numeric - 6.0).abs() < 1e-7);
    }

    #[test]
    fn grad_check_constant() {
        let r = grad_check(
            |_| Ok((4.0, Tensor::zeros(&[3]))),
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            1e-4,
        )
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!((r.analytic, r.numeric), (0.0, 0.0));
    }

    #[test]
    fn grad_check_reports_non_finite_values() {
        let r = grad_check(
            |x| {
                let v = x.data()[0];
                Ok((v.ln(), Tensor::scalar(1.0 / v)))
            },
            &Tensor::scalar(0.0),
            1e-4,
        );
        assert!(matches!(r, Err(Error::Evaluation { .. })));
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[0.1, 0.7], [-0.4, 0.2]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[[1.3, -0.2], [0.5, 0.9]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let e = tape.exp(c).unwrap();
        let s = tape.sum(e).unwrap();
        assert_eq!(tape.backward(s).unwrap(), tape.backward(s).unwrap());
    }
}
