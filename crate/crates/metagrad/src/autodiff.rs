//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records primitive applications in topological order; finishing
//! it yields a [`Tape`] that supports exactly one reverse pass per recorded
//! forward pass. The primitive set is deliberately small: enough for MLPs,
//! quadratic losses, and softmax cross-entropy, all first-order only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node on the graph being recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Row-broadcast bias add: [m,n] + [n].
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    /// Mean squared error between two same-shape tensors; scalar output.
    Mse(Var, Var),
    /// Per-sample softmax cross-entropy; logits [b,k] + labels -> [b].
    SoftmaxXent { logits: Var, labels: Vec<usize> },
    /// Identity forward, blocks gradient flow.
    StopGrad(Var),
    Reshape(Var),
    SliceRows { input: Var, start: usize, len: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Forward-pass recorder. Leaves are the differentiable inputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// A finished recording: one reverse pass per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    root: Var,
    consumed: bool,
}

/// Gradients keyed by leaf id, as returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients(HashMap<usize, Tensor>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Record a forward pass and return the tape plus the root value.
///
/// The closure builds the computation from graph primitives and returns the
/// root variable. The output tensor equals eager evaluation of the same
/// composition.
pub fn record<F>(f: F) -> Result<(Tape, Tensor)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g)?;
    Ok(g.finish(root))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Register a non-differentiable input (data, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let out = matmul_raw(va.data(), va.shape(), vb.data(), vb.shape(), "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b)).map_err(|_| {
            Error::shape_mismatch("add", self.value(a).shape(), self.value(b).shape())
        })?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(bias);
        if va.shape().len() != 2 || vb.shape().len() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape_mismatch("add_bias", va.shape(), vb.shape()));
        }
        let n = vb.shape()[0];
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] + vb.data()[i % n]);
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias(a, bias), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b)).map_err(|_| {
            Error::shape_mismatch("sub", self.value(a).shape(), self.value(b).shape())
        })?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b)).map_err(|_| {
            Error::shape_mismatch("mul", self.value(a).shape(), self.value(b).shape())
        })?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), out, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), out, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), out, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let ng = self.needs(a);
        self.push(Op::Mean(a), out, ng)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape_mismatch("mse", va.shape(), vb.shape()));
        }
        let n = va.numel() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(s / n), ng))
    }

    /// Per-sample softmax cross-entropy over rows of `logits`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.shape().len() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::InvalidShape(format!(
                "softmax_xent: logits {:?} vs {} labels",
                v.shape(),
                labels.len()
            )));
        }
        let k = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidShape(format!(
                "softmax_xent: label {bad} out of range for {k} classes"
            )));
        }
        let b = labels.len();
        let mut losses = Vec::with_capacity(b);
        for (i, &y) in labels.iter().enumerate() {
            let row = &v.data()[i * k..(i + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let logsum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            losses.push(logsum - row[y]);
        }
        let out = Tensor::from_vec(vec![b], losses)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            out,
            ng,
        ))
    }

    /// Forward identity whose gradient is blocked.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGrad(a), out, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::InvalidShape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                v.shape()
            )));
        }
        let out = Tensor::from_vec(shape.to_vec(), v.data().to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), out, ng))
    }

    /// Rows [start, start+len) of a matrix, or that span of a vector.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let rows = v.shape()[0];
        if start + len > rows {
            return Err(Error::InvalidShape(format!(
                "slice_rows [{start}, {}) out of {rows} rows",
                start + len
            )));
        }
        let width: usize = v.shape()[1..].iter().product::<usize>().max(1);
        let data = v.data()[start * width..(start + len) * width].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_vec(shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::SliceRows { input: a, start, len }, out, ng))
    }

    pub fn finish(self, root: Var) -> (Tape, Tensor) {
        let output = self.nodes[root.0].value.clone();
        (
            Tape {
                nodes: self.nodes,
                root,
                consumed: false,
            },
            output,
        )
    }
}

impl Tape {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn root_value(&self) -> &Tensor {
        &self.nodes[self.root.0].value
    }

    /// One reverse pass: gradients of the scalar root with respect to `wrt`.
    ///
    /// Leaves not listed are skipped in the output. A second call without a
    /// new recording is an error, as is a non-scalar root or a `wrt` entry
    /// that is not a leaf of this tape.
    pub fn backward(&mut self, wrt: &[Var]) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = self.nodes[self.root.0].value.shape();
        if self.nodes[self.root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        for v in wrt {
            match self.nodes.get(v.0).map(|n| &n.op) {
                Some(Op::Leaf) => {}
                _ => return Err(Error::UnknownLeaf(v.0)),
            }
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adjoint[self.root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let adj = match adjoint[i].take() {
                Some(a) => a,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.accumulate(i, &adj, &mut adjoint);
        }

        let mut out = HashMap::new();
        for v in wrt {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let grad = match adjoint[v.0].take() {
                Some(g) => Tensor::from_vec(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(v.0, grad);
        }
        Ok(Gradients(out))
    }

    fn add_into(adjoint: &mut Vec<Option<Vec<f64>>>, target: Var, contrib: &[f64]) {
        match &mut adjoint[target.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn accumulate(&self, i: usize, adj: &[f64], adjoint: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {
                // Terminal: the surviving adjoint was re-inserted by the caller.
                adjoint[i] = Some(adj.to_vec());
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let nn = if vb.shape().len() == 2 { vb.shape()[1] } else { 1 };
                if self.nodes[a.0].needs_grad {
                    // dA = adj · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..nn {
                                s += adj[r * nn + j] * vb.data()[p * nn + j];
                            }
                            da[r * k + p] = s;
                        }
                    }
                    Self::add_into(adjoint, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · adj
                    let mut db = vec![0.0; k * nn];
                    for r in 0..m {
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..nn {
                                db[p * nn + j] += av * adj[r * nn + j];
                            }
                        }
                    }
                    Self::add_into(adjoint, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.nodes[a.0].needs_grad {
                    Self::add_into(adjoint, *a, adj);
                }
                if self.nodes[b.0].needs_grad {
                    Self::add_into(adjoint, *b, adj);
                }
            }
            Op::AddBias(a, bias) => {
                if self.nodes[a.0].needs_grad {
                    Self::add_into(adjoint, *a, adj);
                }
                if self.nodes[bias.0].needs_grad {
                    let n = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; n];
                    for (i, &g) in adj.iter().enumerate() {
                        db[i % n] += g;
                    }
                    Self::add_into(adjoint, *bias, &db);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].needs_grad {
                    Self::add_into(adjoint, *a, adj);
                }
                if self.nodes[b.0].needs_grad {
                    let neg: Vec<f64> = adj.iter().map(|g| -g).collect();
                    Self::add_into(adjoint, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let vb = self.nodes[b.0].value.data();
                    let da: Vec<f64> = adj.iter().zip(vb).map(|(g, y)| g * y).collect();
                    Self::add_into(adjoint, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let va = self.nodes[a.0].value.data();
                    let db: Vec<f64> = adj.iter().zip(va).map(|(g, x)| g * x).collect();
                    Self::add_into(adjoint, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> = adj.iter().map(|g| g * c).collect();
                    Self::add_into(adjoint, *a, &da);
                }
            }
            Op::Relu(a) => {
                if self.nodes[a.0].needs_grad {
                    let vx = self.nodes[a.0].value.data();
                    let da: Vec<f64> = adj
                        .iter()
                        .zip(vx)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    Self::add_into(adjoint, *a, &da);
                }
            }
            Op::Tanh(a) => {
                if self.nodes[a.0].needs_grad {
                    let vy = self.nodes[i].value.data();
                    let da: Vec<f64> = adj.iter().zip(vy).map(|(g, y)| g * (1.0 - y * y)).collect();
                    Self::add_into(adjoint, *a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[a.0].needs_grad {
                    let vy = self.nodes[i].value.data();
                    let da: Vec<f64> = adj
                        .iter()
                        .zip(vy)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    Self::add_into(adjoint, *a, &da);
                }
            }
            Op::Sum(a) => {
                if self.nodes[a.0].needs_grad {
                    let n = self.nodes[a.0].value.numel();
                    Self::add_into(adjoint, *a, &vec![adj[0]; n]);
                }
            }
            Op::Mean(a) => {
                if self.nodes[a.0].needs_grad {
                    let n = self.nodes[a.0].value.numel();
                    Self::add_into(adjoint, *a, &vec![adj[0] / n as f64; n]);
                }
            }
            Op::Mse(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                let n = va.len() as f64;
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| adj[0] * 2.0 * (x - y) / n)
                        .collect();
                    Self::add_into(adjoint, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| -adj[0] * 2.0 * (x - y) / n)
                        .collect();
                    Self::add_into(adjoint, *b, &db);
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                if self.nodes[logits.0].needs_grad {
                    let v = &self.nodes[logits.0].value;
                    let k = v.shape()[1];
                    let mut dl = vec![0.0; v.numel()];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &v.data()[r * k..(r + 1) * k];
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for j in 0..k {
                            let p = exps[j] / z;
                            dl[r * k + j] = adj[r] * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    Self::add_into(adjoint, *logits, &dl);
                }
            }
            Op::StopGrad(_) => {}
            Op::Reshape(a) => {
                if self.nodes[a.0].needs_grad {
                    Self::add_into(adjoint, *a, adj);
                }
            }
            Op::SliceRows { input, start, len } => {
                if self.nodes[input.0].needs_grad {
                    let v = &self.nodes[input.0].value;
                    let width: usize = v.shape()[1..].iter().product::<usize>().max(1);
                    let mut da = vec![0.0; v.numel()];
                    da[start * width..(start + len) * width].copy_from_slice(adj);
                    Self::add_into(adjoint, *input, &da);
                }
            }
        }
    }
}

/// Central-difference gradient of a scalar function, entry by entry:
/// `(f(x + d e_i) - f(x - d e_i)) / (2 d)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, delta: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if delta <= 0.0 {
        return Err(Error::InvalidHyperparameter(format!(
            "finite_diff_grad: delta {delta} must be positive"
        )));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let xi = probe[i];
        probe[i] = xi + delta;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = xi - delta;
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad evaluation".into()));
        }
        grad[i] = (fp - fm) / (2.0 * delta);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}
