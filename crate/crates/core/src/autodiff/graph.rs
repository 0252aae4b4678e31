//! Define-by-run computation graph with differentiable backward passes.
//!
//! Nodes live in an arena in creation order, which is always a valid
//! topological order. Values are computed eagerly when a node is added and can
//! be recomputed later with [`Graph::evaluate`] after rebinding named inputs.
//!
//! Every vector-Jacobian product is itself built out of graph nodes, so the
//! result of [`Graph::gradient`] can be fed back into further computation and
//! differentiated again.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::sparse::SparseMap;
use super::tensor::Tensor;
use super::AutodiffError;

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input {
        name: String,
    },
    Const,
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    MatMul,
    Transpose,
    /// `[n, d] + [d]`
    AddRow,
    /// `[n, d] -> [d]`
    SumRows,
    /// `[d] -> [rows, d]`
    BroadcastRows {
        rows: usize,
    },
    Sum,
    Expand {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Slice {
        start: usize,
        len: usize,
    },
    Pad {
        start: usize,
        total: usize,
    },
    Tanh,
    Exp,
    Relu,
    /// Heaviside mask of the input. Has no derivative rule.
    Step,
    LogSoftmax,
    /// Replaces every entry of a row with the row sum.
    RowSumBroadcast,
    Sparse {
        map: Arc<SparseMap>,
        transposed: bool,
    },
    SelectRows {
        rows: Arc<Vec<usize>>,
    },
    ScatterRows {
        rows: Arc<Vec<usize>>,
        total: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::AddRow => "add_row",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::Sum => "sum",
            Op::Expand { .. } => "expand",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::LogSoftmax => "log_softmax",
            Op::RowSumBroadcast => "row_sum_broadcast",
            Op::Sparse { .. } => "sparse",
            Op::SelectRows { .. } => "select_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, String> {
        let unary = || inputs[0];
        match self {
            Op::Input { .. } | Op::Const => unreachable!("leaves carry their own values"),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(format!("operands {:?} and {:?}", a.shape(), b.shape()));
                }
                Ok(match self {
                    Op::Add => a.zip_map(b, |x, y| x + y),
                    Op::Sub => a.zip_map(b, |x, y| x - y),
                    _ => a.zip_map(b, |x, y| x * y),
                })
            }
            Op::Affine { scale, shift } => Ok(unary().map(|x| scale * x + shift)),
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (n, k, m) = match (a.shape(), b.shape()) {
                    ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
                    (sa, sb) => return Err(format!("cannot multiply {sa:?} by {sb:?}")),
                };
                Ok(Tensor::matrix(n, m, matmul(a.data(), b.data(), n, k, m)))
            }
            Op::Transpose => {
                let a = unary();
                let [n, m] = a.shape() else {
                    return Err(format!("transpose of rank-{} tensor", a.rank()));
                };
                let (n, m) = (*n, *m);
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[j * n + i] = a.data()[i * m + j];
                    }
                }
                Ok(Tensor::matrix(m, n, out))
            }
            Op::AddRow => {
                let (a, b) = (inputs[0], inputs[1]);
                match (a.shape(), b.shape()) {
                    ([_, d], [d2]) if d == d2 => {
                        let d = *d;
                        let mut out = a.clone();
                        for (i, v) in out.data_mut().iter_mut().enumerate() {
                            *v += b.data()[i % d];
                        }
                        Ok(out)
                    }
                    (sa, sb) => Err(format!("cannot add row {sb:?} to {sa:?}")),
                }
            }
            Op::SumRows => {
                let a = unary();
                let [n, d] = a.shape() else {
                    return Err(format!("sum_rows of shape {:?}", a.shape()));
                };
                let mut out = vec![0.0; *d];
                for r in 0..*n {
                    for (o, v) in out.iter_mut().zip(&a.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                Ok(Tensor::vector(out))
            }
            Op::BroadcastRows { rows } => {
                let a = unary();
                if a.rank() != 1 {
                    return Err(format!("broadcast_rows of shape {:?}", a.shape()));
                }
                let mut out = Vec::with_capacity(rows * a.len());
                for _ in 0..*rows {
                    out.extend_from_slice(a.data());
                }
                Ok(Tensor::matrix(*rows, a.len(), out))
            }
            Op::Sum => Ok(Tensor::scalar(unary().sum())),
            Op::Expand { shape } => {
                let a = unary();
                if a.len() != 1 {
                    return Err(format!("expand of non-scalar {:?}", a.shape()));
                }
                Ok(Tensor::full(shape, a.data()[0]))
            }
            Op::Reshape { shape } => {
                let a = unary();
                if shape.iter().product::<usize>() != a.len() {
                    return Err(format!("reshape {:?} to {:?}", a.shape(), shape));
                }
                Ok(a.clone().reshaped(shape.clone()))
            }
            Op::Slice { start, len } => {
                let a = unary();
                if a.rank() != 1 || start + len > a.len() {
                    return Err(format!("slice [{start}, {}) of {:?}", start + len, a.shape()));
                }
                Ok(Tensor::vector(a.data()[*start..start + len].to_vec()))
            }
            Op::Pad { start, total } => {
                let a = unary();
                if a.rank() != 1 || start + a.len() > *total {
                    return Err(format!("pad {:?} at {start} into {total}", a.shape()));
                }
                let mut out = vec![0.0; *total];
                out[*start..start + a.len()].copy_from_slice(a.data());
                Ok(Tensor::vector(out))
            }
            Op::Tanh => Ok(unary().map(f64::tanh)),
            Op::Exp => Ok(unary().map(f64::exp)),
            Op::Relu => Ok(unary().map(|x| x.max(0.0))),
            Op::Step => Ok(unary().map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::LogSoftmax => {
                let a = unary();
                let [n, c] = a.shape() else {
                    return Err(format!("log_softmax of shape {:?}", a.shape()));
                };
                let (n, c) = (*n, *c);
                let mut out = a.clone();
                for r in 0..n {
                    let row = &mut out.data_mut()[r * c..(r + 1) * c];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                Ok(out)
            }
            Op::RowSumBroadcast => {
                let a = unary();
                let [n, c] = a.shape() else {
                    return Err(format!("row_sum_broadcast of shape {:?}", a.shape()));
                };
                let mut out = a.clone();
                for r in 0..*n {
                    let row = &mut out.data_mut()[r * c..(r + 1) * c];
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v = s);
                }
                Ok(out)
            }
            Op::Sparse { map, transposed } => {
                let a = unary();
                let (n_in, n_out) = map.dims(*transposed);
                let [b, d] = a.shape() else {
                    return Err(format!("sparse map '{}' on shape {:?}", map.name(), a.shape()));
                };
                if *d != n_in {
                    return Err(format!("sparse map '{}' expects rows of {n_in}, got {:?}", map.name(), a.shape()));
                }
                Ok(Tensor::matrix(*b, n_out, map.apply(a.data(), *b, *transposed)))
            }
            Op::SelectRows { rows } => {
                let a = unary();
                let [n, d] = a.shape() else {
                    return Err(format!("select_rows of shape {:?}", a.shape()));
                };
                let d = *d;
                let mut out = Vec::with_capacity(rows.len() * d);
                for &r in rows.iter() {
                    if r >= *n {
                        return Err(format!("row {r} out of range for {:?}", a.shape()));
                    }
                    out.extend_from_slice(&a.data()[r * d..(r + 1) * d]);
                }
                Ok(Tensor::matrix(rows.len(), d, out))
            }
            Op::ScatterRows { rows, total } => {
                let a = unary();
                match a.shape() {
                    [n, d] if *n == rows.len() => {
                        let d = *d;
                        let mut out = vec![0.0; total * d];
                        for (i, &r) in rows.iter().enumerate() {
                            if r >= *total {
                                return Err(format!("row {r} out of range for {total} rows"));
                            }
                            for j in 0..d {
                                out[r * d + j] += a.data()[i * d + j];
                            }
                        }
                        Ok(Tensor::matrix(*total, d, out))
                    }
                    s => Err(format!("scatter of {s:?} into {} rows", rows.len())),
                }
            }
        }
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
}

/// Arena of nodes. Not shared between threads while being built, but `Send`.
#[derive(Debug)]
pub struct Graph {
    id: usize,
    nodes: Vec<Node>,
    backward_visits: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Number of vector-Jacobian products evaluated by the most recent
    /// backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.backward_visits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.index].op
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::LeafNotInGraph { index: v.index });
        }
        Ok(())
    }

    fn var(&self, index: usize) -> Var {
        Var { graph: self.id, index }
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
        });
        self.var(self.nodes.len() - 1)
    }

    /// A named leaf that may be rebound in [`Graph::evaluate`] and
    /// differentiated against.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(Op::Input { name: name.into() }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Const, value)
    }

    pub fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let node = self.nodes.len();
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
            op.forward(&vals).map_err(|detail| AutodiffError::ShapeMismatch {
                node,
                op: op.kind(),
                detail,
            })?
        };
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { node, op: op.kind() });
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(self.var(node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine { scale, shift }, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose, &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow, &[a, row])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows, &[a])
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastRows { rows }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, &[a])
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Expand { shape: shape.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { start, len }, &[a])
    }

    pub fn pad(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        self.push(Op::Pad { start, total }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax, &[a])
    }

    pub fn row_sum_broadcast(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSumBroadcast, &[a])
    }

    pub fn sparse(&mut self, a: Var, map: &Arc<SparseMap>) -> Result<Var> {
        self.push(
            Op::Sparse {
                map: Arc::clone(map),
                transposed: false,
            },
            &[a],
        )
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.push(
            Op::SelectRows {
                rows: Arc::new(rows.to_vec()),
            },
            &[a],
        )
    }

    /// Sum of squares of all entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Inner product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Rebinds named inputs and recomputes every node up to `root`.
    ///
    /// Inputs without a binding keep their current value.
    pub fn evaluate(&mut self, root: Var, bindings: &HashMap<String, Tensor>) -> Result<Tensor> {
        self.check(root)?;
        for i in 0..=root.index {
            let (op, inputs) = {
                let n = &self.nodes[i];
                (n.op.clone(), n.inputs.clone())
            };
            let value = match &op {
                Op::Input { name } => match bindings.get(name) {
                    Some(t) => t.clone(),
                    None => continue,
                },
                Op::Const => continue,
                _ => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
                    op.forward(&vals).map_err(|detail| AutodiffError::ShapeMismatch {
                        node: i,
                        op: op.kind(),
                        detail,
                    })?
                }
            };
            if !value.all_finite() {
                return Err(AutodiffError::NonFinite { node: i, op: op.kind() });
            }
            self.nodes[i].value = value;
        }
        Ok(self.nodes[root.index].value.clone())
    }

    /// `d root / d wrt` for a scalar `root`. The returned handles are graph
    /// nodes and may be differentiated again.
    pub fn gradient(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check(root)?;
        let shape = self.nodes[root.index].value.shape().to_vec();
        if self.nodes[root.index].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot { shape });
        }
        let seed = self.constant(Tensor::full(&shape, 1.0));
        self.vjp(root, seed, wrt)
    }

    /// Gradient of a scalar that was itself built from [`Graph::gradient`]
    /// outputs: a second reverse pass over the backward graph.
    pub fn second_order_gradient(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.gradient(root, wrt)
    }

    /// Vector-Jacobian product `cotangent^T * d output / d wrt`.
    pub fn vjp(&mut self, output: Var, cotangent: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check(output)?;
        self.check(cotangent)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out_shape = self.nodes[output.index].value.shape().to_vec();
        if self.nodes[cotangent.index].value.shape() != out_shape.as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                node: cotangent.index,
                op: "vjp",
                detail: format!(
                    "cotangent {:?} for output {:?}",
                    self.nodes[cotangent.index].value.shape(),
                    out_shape
                ),
            });
        }
        let root = output.index;
        let lo = wrt.iter().map(|w| w.index).min().unwrap_or(root + 1);

        // Nodes on some path from a wrt node to the root.
        let mut needs = vec![false; root + 1];
        for w in wrt {
            if w.index <= root {
                needs[w.index] = true;
            }
        }
        for i in lo..=root {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|v| v.index >= lo && needs[v.index]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; root + 1];
        adjoint[root] = Some(cotangent);
        self.backward_visits = 0;
        for i in (lo..=root).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            if inputs.iter().all(|v| !needs[v.index]) {
                continue;
            }
            self.backward_visits += 1;
            let contribs = self.node_vjp(i, g, &inputs, &needs)?;
            for (input, c) in inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                adjoint[input.index] = Some(match adjoint[input.index] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let grad = match adjoint.get(w.index).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.nodes[w.index].value.shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            out.push(grad);
        }
        Ok(out)
    }

    fn node_vjp(&mut self, i: usize, g: Var, inputs: &[Var], needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let y = self.var(i);
        let want = |k: usize| needs[inputs[k].index];
        let op = self.nodes[i].op.clone();
        let one = |v: Result<Var>| v.map(|v| vec![Some(v)]);
        match op {
            Op::Input { .. } | Op::Const => Ok(vec![]),
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => {
                let nb = if want(1) { Some(self.neg(g)?) } else { None };
                Ok(vec![Some(g), nb])
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = if want(0) { Some(self.mul(g, b)?) } else { None };
                let db = if want(1) { Some(self.mul(g, a)?) } else { None };
                Ok(vec![da, db])
            }
            Op::Affine { scale, .. } => one(self.scale(g, scale)),
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = if want(0) {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let db = if want(1) {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            Op::Transpose => one(self.transpose(g)),
            Op::AddRow => {
                let db = if want(1) { Some(self.sum_rows(g)?) } else { None };
                Ok(vec![Some(g), db])
            }
            Op::SumRows => {
                let rows = self.nodes[inputs[0].index].value.shape()[0];
                one(self.broadcast_rows(g, rows))
            }
            Op::BroadcastRows { .. } => one(self.sum_rows(g)),
            Op::Sum => {
                let shape = self.nodes[inputs[0].index].value.shape().to_vec();
                one(self.expand(g, &shape))
            }
            Op::Expand { .. } => {
                let shape = self.nodes[inputs[0].index].value.shape().to_vec();
                let s = self.sum(g)?;
                one(self.reshape(s, &shape))
            }
            Op::Reshape { .. } => {
                let shape = self.nodes[inputs[0].index].value.shape().to_vec();
                one(self.reshape(g, &shape))
            }
            Op::Slice { start, .. } => {
                let total = self.nodes[inputs[0].index].value.len();
                one(self.pad(g, start, total))
            }
            Op::Pad { start, .. } => {
                let len = self.nodes[inputs[0].index].value.len();
                one(self.slice(g, start, len))
            }
            Op::Tanh => {
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -1.0, 1.0)?;
                one(self.mul(g, d))
            }
            Op::Exp => one(self.mul(g, y)),
            Op::Relu => {
                let mask = self.push(Op::Step, &[inputs[0]])?;
                one(self.mul(g, mask))
            }
            Op::Step => Err(AutodiffError::UnsupportedOp { op: "step" }),
            Op::LogSoftmax => {
                let p = self.exp(y)?;
                let s = self.row_sum_broadcast(g)?;
                let ps = self.mul(p, s)?;
                one(self.sub(g, ps))
            }
            Op::RowSumBroadcast => one(self.row_sum_broadcast(g)),
            Op::Sparse { map, transposed } => one(self.push(
                Op::Sparse {
                    map,
                    transposed: !transposed,
                },
                &[g],
            )),
            Op::SelectRows { rows } => {
                let total = self.nodes[inputs[0].index].value.shape()[0];
                one(self.push(Op::ScatterRows { rows, total }, &[g]))
            }
            Op::ScatterRows { rows, .. } => one(self.push(Op::SelectRows { rows }, &[g])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_graph_evaluates_to_itself() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        assert_eq!(g.evaluate(c, &HashMap::new()).unwrap().item(), 3.0);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
        let z = g.constant(Tensor::zeros(&[2]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::matrix(2, 1, vec![3.0, 7.0]));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(1.0));
        let y = g.exp(x).unwrap();
        let mut b = HashMap::new();
        b.insert("x".to_string(), Tensor::scalar(1000.0));
        assert_eq!(g.evaluate(y, &b), Err(AutodiffError::NonFinite { node: 1, op: "exp" }));
    }

    #[test]
    fn evaluate_rebinds_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
        let y = g.sum_squares(x).unwrap();
        let mut b = HashMap::new();
        b.insert("x".to_string(), Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(g.evaluate(y, &b).unwrap().item(), 25.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let dx = g.gradient(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).item(), 6.0);
    }

    #[test]
    fn linear_map_gradient() {
        let mut g = Graph::new();
        let w = g.input("w", Tensor::vector(vec![0.3, -0.7]));
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = g.dot(w, x).unwrap();
        let dw = g.gradient(y, &[w]).unwrap()[0];
        assert_eq!(g.value(dw).data(), &[1.0, 1.0]);
    }

    #[test]
    fn squared_derivative_of_derivative() {
        // f = x^2, L = (f')^2 = 4x^2, dL/dx = 8x
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(1.0));
        let f = g.mul(x, x).unwrap();
        let df = g.gradient(f, &[x]).unwrap()[0];
        let l = g.mul(df, df).unwrap();
        let dl = g.second_order_gradient(l, &[x]).unwrap()[0];
        assert_eq!(g.value(dl).item(), 8.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.gradient(x, &[x]), Err(AutodiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.input("x", Tensor::scalar(1.0));
        let y = g2.input("y", Tensor::scalar(1.0));
        let s = g2.mul(y, y).unwrap();
        assert!(matches!(g2.gradient(s, &[x]), Err(AutodiffError::LeafNotInGraph { .. })));
    }

    #[test]
    fn relu_has_no_second_order_rule() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.5, -0.2]));
        let r = g.relu(x).unwrap();
        let r2 = g.mul(r, r).unwrap();
        let s = g.sum(r2).unwrap();
        let dx = g.gradient(s, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).data(), &[1.0, 0.0]);
        let l = g.sum_squares(dx).unwrap();
        assert_eq!(g.second_order_gradient(l, &[x]), Err(AutodiffError::UnsupportedOp { op: "step" }));
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
        let y = g.input("y", Tensor::scalar(2.0));
        let s = g.mul(y, y).unwrap();
        let dx = g.gradient(s, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).data(), &[0.0, 0.0]);
    }

    #[test]
    fn truncate_discards_backward_nodes() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(2.0));
        let y = g.tanh(x).unwrap();
        let n = g.len();
        let _ = g.gradient(y, &[x]).unwrap();
        assert!(g.len() > n);
        g.truncate(n);
        assert_eq!(g.len(), n);
    }
}
