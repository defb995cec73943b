//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! A `Graph` is a list of nodes in construction order, which is already a
//! topological order, so forward evaluation is a single left-to-right sweep
//! and backpropagation is a single right-to-left sweep. The primitive set is
//! closed: anything fancier gets composed from what is here.
//!
//! Storage is f32 everywhere; reductions and gradient accumulation run in
//! f64 so that finite-difference checks stay stable.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::tensor::Tensor;

/// Node handle. Indexes into `Graph::nodes`.
pub type NodeId = usize;

/// Named tensors bound to `Input` and `Param` leaves at eval time.
pub type Bindings = HashMap<String, Tensor>;

/// Error type for graph construction, evaluation and backprop.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// Operand shapes do not fit the named primitive.
    Dim { primitive: &'static str, detail: String },
    /// A node produced a NaN or Inf while numeric checking was enabled.
    Numeric { node: NodeId, primitive: &'static str },
    /// A usage-contract violation: unbound name, missing eval, non-scalar loss.
    Contract { detail: String },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::Dim { primitive, detail } => write!(f, "{}: {}", primitive, detail),
            GraphError::Numeric { node, primitive } => {
                write!(f, "non-finite value at node {} ({})", node, primitive)
            }
            GraphError::Contract { detail } => write!(f, "{}", detail),
        }
    }
}

impl std::error::Error for GraphError {}

/// The closed primitive set.
#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    Add,
    Sub,
    Mul,
    Matmul,
    /// Swap two axes.
    Transpose(usize, usize),
    /// Target shape is the node's own shape.
    Reshape,
    /// Select rows of a 2-D matrix by index.
    GatherRows(Vec<usize>),
    /// Softmax over the last axis.
    Softmax,
    /// Normalize over the last axis (no affine part).
    LayerNorm { eps: f32 },
    Gelu,
    Relu,
    /// Full reduction to a scalar.
    Sum,
    Mean,
    /// Scalar sum of squared differences.
    SquaredError,
    /// Per-row negative log softmax probability of the target index.
    LogSoftmaxNll(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape => "reshape",
            Op::GatherRows(_) => "gather_rows",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SquaredError => "squared_error",
            Op::LogSoftmaxNll(_) => "log_softmax_nll",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    /// Forward value, filled by `eval`.
    value: Option<Tensor>,
    /// Extra-precision copy for one-element values, used by grad_check.
    scalar_f64: Option<f64>,
}

/// How a two-operand elementwise op lines its shapes up.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    /// Shapes identical.
    Same,
    /// Right operand is a scalar or a suffix of the left shape.
    RightSmall,
    /// Left operand is a scalar or a suffix of the right shape.
    LeftSmall,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let suffix = |big: &[usize], small: &[usize]| big.len() >= small.len() && big[big.len() - small.len()..] == *small;
    if numel(b) == 1 || suffix(a, b) {
        return Some(Broadcast::RightSmall);
    }
    if numel(a) == 1 || suffix(b, a) {
        return Some(Broadcast::LeftSmall);
    }
    None
}

/// Append-only compute graph with named leaves.
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    param_names: Vec<(String, NodeId)>,
    /// When set, every evaluated node is scanned for NaN/Inf.
    pub debug_numerics: bool,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            outputs: Vec::new(),
            param_names: Vec::new(),
            debug_numerics: false,
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape a node was built with.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Forward value of a node after `eval`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].value.as_ref()
    }

    /// Names of all declared parameters.
    pub fn param_names(&self) -> Vec<String> {
        self.param_names.iter().map(|(n, _)| n.clone()).collect()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, parents, shape, value: None, scalar_f64: None });
        self.evaluated = false;
        self.nodes.len() - 1
    }

    fn check_parent(&self, id: NodeId, primitive: &'static str) -> Result<(), GraphError> {
        if id >= self.nodes.len() {
            return Err(GraphError::Dim { primitive, detail: format!("parent node {} does not exist", id) });
        }
        Ok(())
    }

    /// Declares a named input leaf.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input(name.to_string()), vec![], shape.to_vec())
    }

    /// Declares a named parameter leaf. Backward reports gradients for these.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Param(name.to_string()), vec![], shape.to_vec());
        self.param_names.push((name.to_string(), id));
        id
    }

    /// Embeds a fixed tensor into the graph.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), vec![], shape)
    }

    fn elementwise2(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let prim = op.name();
        self.check_parent(a, prim)?;
        self.check_parent(b, prim)?;
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let kind = broadcast_kind(sa, sb).ok_or_else(|| GraphError::Dim {
            primitive: prim,
            detail: format!("shapes {:?} and {:?} do not line up", sa, sb),
        })?;
        let out = match kind {
            Broadcast::Same | Broadcast::RightSmall => sa.clone(),
            Broadcast::LeftSmall => sb.clone(),
        };
        Ok(self.push(op, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2(Op::Mul, a, b)
    }

    /// Matrix product. Either `b` is 2-D and applies to the last axis of `a`,
    /// or both operands carry identical batch dims ahead of their matrix dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_parent(a, "matmul")?;
        self.check_parent(b, "matmul")?;
        let sa = self.nodes[a].shape.clone();
        let sb = self.nodes[b].shape.clone();
        let bad = |detail: String| GraphError::Dim { primitive: "matmul", detail };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad(format!("operands must be at least 2-D, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(bad(format!("inner dims differ: {:?} x {:?}", sa, sb)));
            }
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            return Ok(self.push(Op::Matmul, vec![a, b], out));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad(format!("batch dims differ: {:?} x {:?}", sa, sb)));
        }
        if sb[sb.len() - 2] != k {
            return Err(bad(format!("inner dims differ: {:?} x {:?}", sa, sb)));
        }
        let mut out = sa[..sa.len() - 2].to_vec();
        out.push(m);
        out.push(sb[sb.len() - 1]);
        Ok(self.push(Op::Matmul, vec![a, b], out))
    }

    /// Swaps axes `ax0` and `ax1`.
    pub fn transpose(&mut self, a: NodeId, ax0: usize, ax1: usize) -> Result<NodeId, GraphError> {
        self.check_parent(a, "transpose")?;
        let sa = &self.nodes[a].shape;
        if ax0 >= sa.len() || ax1 >= sa.len() {
            return Err(GraphError::Dim {
                primitive: "transpose",
                detail: format!("axes ({}, {}) out of range for shape {:?}", ax0, ax1, sa),
            });
        }
        let mut out = sa.clone();
        out.swap(ax0, ax1);
        Ok(self.push(Op::Transpose(ax0, ax1), vec![a], out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.check_parent(a, "reshape")?;
        let have: usize = self.nodes[a].shape.iter().product();
        let want: usize = shape.iter().product();
        if have != want {
            return Err(GraphError::Dim {
                primitive: "reshape",
                detail: format!("cannot reshape {:?} ({} elements) to {:?} ({})", self.nodes[a].shape, have, shape, want),
            });
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    /// Gathers rows of a 2-D matrix. Duplicate indices are allowed; their
    /// gradients accumulate on the shared row.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, GraphError> {
        self.check_parent(a, "gather_rows")?;
        let sa = &self.nodes[a].shape;
        if sa.len() != 2 {
            return Err(GraphError::Dim {
                primitive: "gather_rows",
                detail: format!("expected a 2-D matrix, got {:?}", sa),
            });
        }
        let rows = sa[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(GraphError::Dim {
                primitive: "gather_rows",
                detail: format!("row index {} out of range for {} rows", bad, rows),
            });
        }
        let out = vec![indices.len(), sa[1]];
        Ok(self.push(Op::GatherRows(indices.to_vec()), vec![a], out))
    }

    fn unary_lastaxis(&mut self, op: Op, a: NodeId) -> Result<NodeId, GraphError> {
        let prim = op.name();
        self.check_parent(a, prim)?;
        let sa = &self.nodes[a].shape;
        if sa.is_empty() || *sa.last().unwrap() == 0 {
            return Err(GraphError::Dim { primitive: prim, detail: format!("needs a non-empty last axis, got {:?}", sa) });
        }
        let out = sa.clone();
        Ok(self.push(op, vec![a], out))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary_lastaxis(Op::Softmax, a)
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f32) -> Result<NodeId, GraphError> {
        self.unary_lastaxis(Op::LayerNorm { eps }, a)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_parent(a, "gelu")?;
        let out = self.nodes[a].shape.clone();
        Ok(self.push(Op::Gelu, vec![a], out))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_parent(a, "relu")?;
        let out = self.nodes[a].shape.clone();
        Ok(self.push(Op::Relu, vec![a], out))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_parent(a, "sum")?;
        Ok(self.push(Op::Sum, vec![a], vec![1]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_parent(a, "mean")?;
        if self.nodes[a].shape.iter().product::<usize>() == 0 {
            return Err(GraphError::Dim { primitive: "mean", detail: "mean over zero elements".to_string() });
        }
        Ok(self.push(Op::Mean, vec![a], vec![1]))
    }

    /// Scalar sum of squared differences between two same-shape tensors.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_parent(a, "squared_error")?;
        self.check_parent(b, "squared_error")?;
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(GraphError::Dim {
                primitive: "squared_error",
                detail: format!("shapes {:?} and {:?} differ", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        Ok(self.push(Op::SquaredError, vec![a, b], vec![1]))
    }

    /// Fused log-softmax and NLL. Input is `[rows, classes]`, `targets` holds
    /// one class index per row, output is the per-row negative log probability.
    pub fn log_softmax_nll(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, GraphError> {
        self.check_parent(logits, "log_softmax_nll")?;
        let sa = &self.nodes[logits].shape;
        if sa.len() != 2 {
            return Err(GraphError::Dim {
                primitive: "log_softmax_nll",
                detail: format!("expected [rows, classes], got {:?}", sa),
            });
        }
        let (rows, classes) = (sa[0], sa[1]);
        if targets.len() != rows {
            return Err(GraphError::Dim {
                primitive: "log_softmax_nll",
                detail: format!("{} rows but {} targets", rows, targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(GraphError::Dim {
                primitive: "log_softmax_nll",
                detail: format!("target class {} out of range for {} classes", bad, classes),
            });
        }
        Ok(self.push(Op::LogSoftmaxNll(targets.to_vec()), vec![logits], vec![rows]))
    }

    /// Marks a node as a named output of `eval`.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    /// Evaluates every node in construction order and returns the marked
    /// outputs. Values are retained on the nodes for `backward`.
    pub fn eval(&mut self, bindings: &Bindings) -> Result<HashMap<String, Tensor>, GraphError> {
        for i in 0..self.nodes.len() {
            let (value, scalar) = self.eval_node(i, bindings)?;
            if self.debug_numerics && !value.all_finite() {
                return Err(GraphError::Numeric { node: i, primitive: self.nodes[i].op.name() });
            }
            self.nodes[i].value = Some(value);
            self.nodes[i].scalar_f64 = scalar;
        }
        self.evaluated = true;
        let mut out = HashMap::new();
        for (name, id) in &self.outputs {
            out.insert(name.clone(), self.nodes[*id].value.clone().unwrap());
        }
        Ok(out)
    }

    fn parent_value(&self, node: NodeId, slot: usize) -> &Tensor {
        let p = self.nodes[node].parents[slot];
        self.nodes[p].value.as_ref().expect("parent evaluated before child")
    }

    fn eval_node(&self, i: NodeId, bindings: &Bindings) -> Result<(Tensor, Option<f64>), GraphError> {
        let node = &self.nodes[i];
        let bound = |name: &str| -> Result<Tensor, GraphError> {
            let t = bindings.get(name).ok_or_else(|| GraphError::Contract {
                detail: format!("no binding for leaf '{}'", name),
            })?;
            if t.shape() != node.shape.as_slice() {
                return Err(GraphError::Contract {
                    detail: format!("leaf '{}' declared {:?} but bound {:?}", name, node.shape, t.shape()),
                });
            }
            Ok(t.clone())
        };
        let value = match &node.op {
            Op::Input(name) | Op::Param(name) => bound(name)?,
            Op::Const(t) => t.clone(),
            Op::Add => ew2(self.parent_value(i, 0), self.parent_value(i, 1), |x, y| x + y),
            Op::Sub => ew2(self.parent_value(i, 0), self.parent_value(i, 1), |x, y| x - y),
            Op::Mul => ew2(self.parent_value(i, 0), self.parent_value(i, 1), |x, y| x * y),
            Op::Matmul => matmul_fwd(self.parent_value(i, 0), self.parent_value(i, 1)),
            Op::Transpose(ax0, ax1) => transpose(self.parent_value(i, 0), *ax0, *ax1),
            Op::Reshape => {
                let v = self.parent_value(i, 0);
                Tensor::new(node.shape.clone(), v.data().to_vec()).unwrap()
            }
            Op::GatherRows(idx) => gather_rows_fwd(self.parent_value(i, 0), idx),
            Op::Softmax => softmax_fwd(self.parent_value(i, 0)),
            Op::LayerNorm { eps } => layer_norm_fwd(self.parent_value(i, 0), *eps),
            Op::Gelu => map1(self.parent_value(i, 0), |x| gelu_f64(x) as f32),
            Op::Relu => map1(self.parent_value(i, 0), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Sum => {
                let s: f64 = self.parent_value(i, 0).data().iter().map(|&v| v as f64).sum();
                Tensor::scalar(s as f32)
            }
            Op::Mean => {
                let v = self.parent_value(i, 0);
                let s: f64 = v.data().iter().map(|&x| x as f64).sum();
                Tensor::scalar((s / v.numel() as f64) as f32)
            }
            Op::SquaredError => {
                let (a, b) = (self.parent_value(i, 0), self.parent_value(i, 1));
                let s: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| {
                        let d = x as f64 - y as f64;
                        d * d
                    })
                    .sum();
                Tensor::scalar(s as f32)
            }
            Op::LogSoftmaxNll(targets) => nll_fwd(self.parent_value(i, 0), targets),
        };
        // Keep an f64 copy of scalar chains so finite differences are not
        // limited by f32 rounding of the final loss value.
        let scalar = if value.numel() == 1 {
            let pf = |slot: usize| -> f64 {
                let p = self.nodes[i].parents[slot];
                self.nodes[p].scalar_f64.unwrap_or_else(|| self.nodes[p].value.as_ref().unwrap().item() as f64)
            };
            match &node.op {
                Op::Const(t) => Some(t.item() as f64),
                Op::Add => Some(pf(0) + pf(1)),
                Op::Sub => Some(pf(0) - pf(1)),
                Op::Mul => Some(pf(0) * pf(1)),
                Op::Sum => {
                    Some(self.parent_value(i, 0).data().iter().map(|&v| v as f64).sum())
                }
                Op::Mean => {
                    let v = self.parent_value(i, 0);
                    Some(v.data().iter().map(|&x| x as f64).sum::<f64>() / v.numel() as f64)
                }
                Op::SquaredError => {
                    let (a, b) = (self.parent_value(i, 0), self.parent_value(i, 1));
                    Some(
                        a.data()
                            .iter()
                            .zip(b.data())
                            .map(|(&x, &y)| {
                                let d = x as f64 - y as f64;
                                d * d
                            })
                            .sum(),
                    )
                }
                _ => Some(value.item() as f64),
            }
        } else {
            None
        };
        Ok((value, scalar))
    }

    /// Reads a one-element node's value at the best available precision.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, GraphError> {
        let node = &self.nodes[id];
        let v = node.value.as_ref().ok_or_else(|| GraphError::Contract {
            detail: "scalar_value before eval".to_string(),
        })?;
        if v.numel() != 1 {
            return Err(GraphError::Contract { detail: format!("node {} is not a scalar: {:?}", id, v.shape()) });
        }
        Ok(node.scalar_f64.unwrap_or(v.item() as f64))
    }

    /// Backpropagates from a scalar loss node. Returns one gradient tensor
    /// per declared parameter; parameters the loss never touches get zeros.
    /// Running it twice on an unchanged graph gives identical results, and
    /// the map is ordered so that anything folding over it is too.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>, GraphError> {
        if !self.evaluated {
            return Err(GraphError::Contract { detail: "backward before eval".to_string() });
        }
        if loss >= self.nodes.len() {
            return Err(GraphError::Contract { detail: format!("loss node {} does not exist", loss) });
        }
        if self.nodes[loss].shape.iter().product::<usize>() != 1 {
            return Err(GraphError::Contract {
                detail: format!("loss must be a scalar, got shape {:?}", self.nodes[loss].shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.param_names {
            let shape = self.nodes[*id].shape.clone();
            let t = match &grads[*id] {
                Some(g) => {
                    Tensor::new(shape, g.iter().map(|&v| v as f32).collect()).unwrap()
                }
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn accumulate(grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, numel: usize, add: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
        add(slot);
    }

    fn backprop_node(&self, i: NodeId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        let parents = node.parents.clone();
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::Add | Op::Sub => {
                let (a, b) = (parents[0], parents[1]);
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let na: usize = sa.iter().product();
                let nb: usize = sb.iter().product();
                let negate = matches!(node.op, Op::Sub);
                Self::accumulate(grads, a, na, |ga| reduce_into(g, ga, false));
                Self::accumulate(grads, b, nb, |gb| reduce_into(g, gb, negate));
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let va = self.parent_value(i, 0).data().to_vec();
                let vb = self.parent_value(i, 1).data().to_vec();
                let na = va.len();
                let nb = vb.len();
                // d(a*b)/da = b and vice versa, expanded over the broadcast.
                let scaled_by_b: Vec<f64> = g.iter().enumerate().map(|(k, &gv)| gv * vb[k % nb] as f64).collect();
                let scaled_by_a: Vec<f64> = g.iter().enumerate().map(|(k, &gv)| gv * va[k % na] as f64).collect();
                Self::accumulate(grads, a, na, |ga| reduce_into(&scaled_by_b, ga, false));
                Self::accumulate(grads, b, nb, |gb| reduce_into(&scaled_by_a, gb, false));
            }
            Op::Matmul => {
                let (a, b) = (parents[0], parents[1]);
                let va = self.parent_value(i, 0);
                let vb = self.parent_value(i, 1);
                let (da, db) = matmul_bwd(va, vb, g);
                Self::accumulate(grads, a, va.numel(), |ga| {
                    for (x, y) in ga.iter_mut().zip(&da) {
                        *x += y;
                    }
                });
                Self::accumulate(grads, b, vb.numel(), |gb| {
                    for (x, y) in gb.iter_mut().zip(&db) {
                        *x += y;
                    }
                });
            }
            Op::Transpose(ax0, ax1) => {
                let p = parents[0];
                let out_shape = node.shape.clone();
                let gt = transpose_raw(g, &out_shape, *ax0, *ax1);
                Self::accumulate(grads, p, gt.len(), |gp| {
                    for (x, y) in gp.iter_mut().zip(&gt) {
                        *x += y;
                    }
                });
            }
            Op::Reshape => {
                let p = parents[0];
                Self::accumulate(grads, p, g.len(), |gp| {
                    for (x, y) in gp.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::GatherRows(idx) => {
                let p = parents[0];
                let sa = self.nodes[p].shape.clone();
                let cols = sa[1];
                Self::accumulate(grads, p, sa[0] * cols, |gp| {
                    for (row_out, &row_in) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gp[row_in * cols + c] += g[row_out * cols + c];
                        }
                    }
                });
            }
            Op::Softmax => {
                let p = parents[0];
                let y = node.value.as_ref().unwrap();
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0f64; y.numel()];
                for r in 0..y.numel() / n {
                    let ys = &y.data()[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv as f64 * gv).sum();
                    for j in 0..n {
                        dx[r * n + j] = ys[j] as f64 * (gs[j] - dot);
                    }
                }
                Self::accumulate(grads, p, dx.len(), |gp| {
                    for (x, y) in gp.iter_mut().zip(&dx) {
                        *x += y;
                    }
                });
            }
            Op::LayerNorm { eps } => {
                let p = parents[0];
                let x = self.parent_value(i, 0);
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0f64; x.numel()];
                for r in 0..x.numel() / n {
                    let xs = &x.data()[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mean: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let var: f64 = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v as f64 - mean) * inv).collect();
                    let m1: f64 = gs.iter().sum::<f64>() / n as f64;
                    let m2: f64 = gs.iter().zip(&xhat).map(|(&gv, &xh)| gv * xh).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv * (gs[j] - m1 - xhat[j] * m2);
                    }
                }
                Self::accumulate(grads, p, dx.len(), |gp| {
                    for (x, y) in gp.iter_mut().zip(&dx) {
                        *x += y;
                    }
                });
            }
            Op::Gelu => {
                let p = parents[0];
                let x = self.parent_value(i, 0);
                let dx: Vec<f64> = x.data().iter().zip(g).map(|(&xv, &gv)| gv * gelu_grad_f64(xv)).collect();
                Self::accumulate(grads, p, dx.len(), |gp| {
                    for (a, b) in gp.iter_mut().zip(&dx) {
                        *a += b;
                    }
                });
            }
            Op::Relu => {
                let p = parents[0];
                let x = self.parent_value(i, 0);
                let dx: Vec<f64> = x.data().iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                Self::accumulate(grads, p, dx.len(), |gp| {
                    for (a, b) in gp.iter_mut().zip(&dx) {
                        *a += b;
                    }
                });
            }
            Op::Sum => {
                let p = parents[0];
                let n = self.parent_value(i, 0).numel();
                Self::accumulate(grads, p, n, |gp| {
                    for x in gp.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Mean => {
                let p = parents[0];
                let n = self.parent_value(i, 0).numel();
                let gv = g[0] / n as f64;
                Self::accumulate(grads, p, n, |gp| {
                    for x in gp.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SquaredError => {
                let (a, b) = (parents[0], parents[1]);
                let va = self.parent_value(i, 0);
                let vb = self.parent_value(i, 1);
                let n = va.numel();
                Self::accumulate(grads, a, n, |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += 2.0 * (va.data()[k] as f64 - vb.data()[k] as f64) * g[0];
                    }
                });
                Self::accumulate(grads, b, n, |gb| {
                    for (k, x) in gb.iter_mut().enumerate() {
                        *x -= 2.0 * (va.data()[k] as f64 - vb.data()[k] as f64) * g[0];
                    }
                });
            }
            Op::LogSoftmaxNll(targets) => {
                let p = parents[0];
                let x = self.parent_value(i, 0);
                let classes = x.shape()[1];
                let mut dx = vec![0.0f64; x.numel()];
                for r in 0..x.shape()[0] {
                    let xs = &x.data()[r * classes..(r + 1) * classes];
                    let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let mut denom = 0.0f64;
                    for &v in xs {
                        denom += (v as f64 - max).exp();
                    }
                    for j in 0..classes {
                        let p_j = (xs[j] as f64 - max).exp() / denom;
                        let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                        dx[r * classes + j] = g[r] * (p_j - indicator);
                    }
                }
                Self::accumulate(grads, p, dx.len(), |gp| {
                    for (a, b) in gp.iter_mut().zip(&dx) {
                        *a += b;
                    }
                });
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Checks analytic gradients of `loss` with respect to the parameter `wrt`
/// against central finite differences at step `eps`. Returns the worst
/// relative error max |analytic - numeric| / max(1, |analytic|) over all
/// coordinates of the parameter.
pub fn grad_check(
    graph: &mut Graph,
    loss: NodeId,
    bindings: &Bindings,
    wrt: &str,
    eps: f64,
) -> Result<f64, GraphError> {
    graph.eval(bindings)?;
    let analytic = graph.backward(loss)?;
    let ga = analytic.get(wrt).ok_or_else(|| GraphError::Contract {
        detail: format!("'{}' is not a declared parameter", wrt),
    })?.clone();
    let base = bindings.get(wrt).unwrap().clone();
    let mut worst = 0.0f64;
    let mut probe = bindings.clone();
    for k in 0..base.numel() {
        let x = base.data()[k];
        let xp = (x as f64 + eps) as f32;
        let xm = (x as f64 - eps) as f32;
        probe.get_mut(wrt).unwrap().data_mut()[k] = xp;
        graph.eval(&probe)?;
        let fp = graph.scalar_value(loss)?;
        probe.get_mut(wrt).unwrap().data_mut()[k] = xm;
        graph.eval(&probe)?;
        let fm = graph.scalar_value(loss)?;
        probe.get_mut(wrt).unwrap().data_mut()[k] = x;
        // Use the realized f32 step, not the requested one.
        let h = xp as f64 - xm as f64;
        let numeric = (fp - fm) / h;
        let a = ga.data()[k] as f64;
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    // Leave the graph evaluated at the base point.
    graph.eval(bindings)?;
    Ok(worst)
}

fn ew2(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let (na, nb) = (a.numel(), b.numel());
    if na >= nb {
        let mut out = Vec::with_capacity(na);
        for k in 0..na {
            out.push(f(a.data()[k], b.data()[k % nb]));
        }
        Tensor::new(a.shape().to_vec(), out).unwrap()
    } else {
        let mut out = Vec::with_capacity(nb);
        for k in 0..nb {
            out.push(f(a.data()[k % na], b.data()[k]));
        }
        Tensor::new(b.shape().to_vec(), out).unwrap()
    }
}

/// Folds a gradient over the larger operand down onto an operand buffer,
/// cycling the small buffer the same way the forward broadcast expanded it.
fn reduce_into(g: &[f64], target: &mut [f64], negate: bool) {
    let n = target.len();
    if negate {
        for (k, &gv) in g.iter().enumerate() {
            target[k % n] -= gv;
        }
    } else {
        for (k, &gv) in g.iter().enumerate() {
            target[k % n] += gv;
        }
    }
}

fn map1(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).unwrap()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f64(x: f32) -> f64 {
    let x = x as f64;
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f32) -> f64 {
    let x = x as f64;
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    let sa = a.shape();
    let sb = b.shape();
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let batches: usize = sa[..sa.len() - 2].iter().product();
    let shared_b = sb.len() == 2;
    let mut out_shape = sa[..sa.len() - 1].to_vec();
    out_shape.push(n);
    let mut out = vec![0.0f32; batches * m * n];
    let mut acc = vec![0.0f64; n];
    for p in 0..batches {
        let a_off = p * m * k;
        let b_off = if shared_b { 0 } else { p * k * n };
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for kk in 0..k {
                let av = a.data()[a_off + i * k + kk] as f64;
                let brow = &b.data()[b_off + kk * n..b_off + (kk + 1) * n];
                for j in 0..n {
                    acc[j] += av * brow[j] as f64;
                }
            }
            let orow = &mut out[p * m * n + i * n..p * m * n + (i + 1) * n];
            for j in 0..n {
                orow[j] = acc[j] as f32;
            }
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

fn matmul_bwd(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sa = a.shape();
    let sb = b.shape();
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let batches: usize = sa[..sa.len() - 2].iter().product();
    let shared_b = sb.len() == 2;
    let mut da = vec![0.0f64; a.numel()];
    let mut db = vec![0.0f64; b.numel()];
    for p in 0..batches {
        let a_off = p * m * k;
        let b_off = if shared_b { 0 } else { p * k * n };
        let g_off = p * m * n;
        for i in 0..m {
            let grow = &g[g_off + i * n..g_off + (i + 1) * n];
            for kk in 0..k {
                // dA = dC * B^T
                let brow = &b.data()[b_off + kk * n..b_off + (kk + 1) * n];
                let mut acc = 0.0f64;
                for j in 0..n {
                    acc += grow[j] * brow[j] as f64;
                }
                da[a_off + i * k + kk] += acc;
                // dB = A^T * dC, summed over batches when B is shared
                let av = a.data()[a_off + i * k + kk] as f64;
                let dbrow = &mut db[b_off + kk * n..b_off + (kk + 1) * n];
                for j in 0..n {
                    dbrow[j] += av * grow[j];
                }
            }
        }
    }
    (da, db)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn transpose(a: &Tensor, ax0: usize, ax1: usize) -> Tensor {
    let mut out_shape = a.shape().to_vec();
    out_shape.swap(ax0, ax1);
    let data = transpose_raw_f32(a.data(), a.shape(), ax0, ax1);
    Tensor::new(out_shape, data).unwrap()
}

fn transpose_index_map(shape: &[usize], ax0: usize, ax1: usize) -> impl Iterator<Item = usize> + '_ {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = strides_of(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax0, ax1);
    let total: usize = shape.iter().product();
    let out_strides = strides_of(&out_shape);
    (0..total).map(move |flat| {
        let mut rem = flat;
        let mut src = 0usize;
        for (os, ps) in out_strides.iter().zip(&perm_strides) {
            let c = rem / os;
            rem %= os;
            src += c * ps;
        }
        src
    })
}

fn transpose_raw_f32(data: &[f32], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f32> {
    transpose_index_map(shape, ax0, ax1).map(|src| data[src]).collect()
}

fn transpose_raw(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    transpose_index_map(shape, ax0, ax1).map(|src| data[src]).collect()
}

fn gather_rows_fwd(a: &Tensor, idx: &[usize]) -> Tensor {
    let cols = a.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &r in idx {
        out.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![idx.len(), cols], out).unwrap()
}

fn softmax_fwd(a: &Tensor) -> Tensor {
    let n = *a.shape().last().unwrap();
    let mut out = vec![0.0f32; a.numel()];
    for r in 0..a.numel() / n {
        let xs = &a.data()[r * n..(r + 1) * n];
        let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        let mut exps = vec![0.0f64; n];
        for j in 0..n {
            let e = (xs[j] as f64 - max).exp();
            exps[j] = e;
            denom += e;
        }
        for j in 0..n {
            out[r * n + j] = (exps[j] / denom) as f32;
        }
    }
    Tensor::new(a.shape().to_vec(), out).unwrap()
}

fn layer_norm_fwd(a: &Tensor, eps: f32) -> Tensor {
    let n = *a.shape().last().unwrap();
    let mut out = vec![0.0f32; a.numel()];
    for r in 0..a.numel() / n {
        let xs = &a.data()[r * n..(r + 1) * n];
        let mean: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for j in 0..n {
            out[r * n + j] = ((xs[j] as f64 - mean) * inv) as f32;
        }
    }
    Tensor::new(a.shape().to_vec(), out).unwrap()
}

fn nll_fwd(a: &Tensor, targets: &[usize]) -> Tensor {
    let classes = a.shape()[1];
    let rows = a.shape()[0];
    let mut out = vec![0.0f32; rows];
    for r in 0..rows {
        let xs = &a.data()[r * classes..(r + 1) * classes];
        let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &v in xs {
            denom += (v as f64 - max).exp();
        }
        let log_p = xs[targets[r]] as f64 - max - denom.ln();
        out[r] = (-log_p) as f32;
    }
    Tensor::new(vec![rows], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    // Finite differences on an f32 forward pass need well-scaled points:
    // noise in the difference quotient grows with the loss magnitude.
    fn randn_scaled(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = randn(shape, rng);
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
        t
    }

    #[test]
    fn eval_runs_left_to_right_and_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]);
        let y = g.input("y", &[2, 2]);
        let s = g.add(x, y).unwrap();
        let p = g.mul(s, s).unwrap();
        let out = g.sum(p).unwrap();
        g.mark_output("loss", out);
        let mut b = Bindings::new();
        b.insert("x".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        b.insert("y".into(), Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let r1 = g.eval(&b).unwrap();
        let r2 = g.eval(&b).unwrap();
        assert_eq!(r1["loss"], r2["loss"]);
        // (1.5^2 + 2.5^2 + 3.5^2 + 4.5^2) = 2.25 + 6.25 + 12.25 + 20.25
        assert!((r1["loss"].item() - 41.0).abs() < 1e-5);
    }

    #[test]
    fn unbound_input_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let s = g.sum(x).unwrap();
        let _ = s;
        let err = g.eval(&Bindings::new()).unwrap_err();
        assert!(matches!(err, GraphError::Contract { .. }));
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3]);
        let y = g.input("y", &[4, 4]);
        let err = g.add(x, y).unwrap_err();
        match err {
            GraphError::Dim { primitive, .. } => assert_eq!(primitive, "add"),
            other => panic!("expected Dim error, got {:?}", other),
        }
        let err = g.matmul(x, y).unwrap_err();
        match err {
            GraphError::Dim { primitive, .. } => assert_eq!(primitive, "matmul"),
            other => panic!("expected Dim error, got {:?}", other),
        }
    }

    #[test]
    fn numeric_check_flags_the_node() {
        let mut g = Graph::new();
        g.debug_numerics = true;
        let x = g.input("x", &[2]);
        let y = g.mul(x, x).unwrap();
        let _ = g.sum(y).unwrap();
        let mut b = Bindings::new();
        // 3e38 squared overflows f32, so the mul node is the first bad one.
        b.insert("x".into(), Tensor::new(vec![2], vec![3e38, 1.0]).unwrap());
        let err = g.eval(&b).unwrap_err();
        match err {
            GraphError::Numeric { node, primitive } => {
                assert_eq!(node, 1);
                assert_eq!(primitive, "mul");
            }
            other => panic!("expected Numeric error, got {:?}", other),
        }
    }

    #[test]
    fn backward_requires_scalar_loss_and_prior_eval() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]);
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::Contract { .. })));
        let mut b = Bindings::new();
        b.insert("x".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        g.eval(&b).unwrap();
        // Non-scalar loss is rejected.
        assert!(matches!(g.backward(y), Err(GraphError::Contract { .. })));
    }

    #[test]
    fn unused_param_gets_a_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]);
        let _dead = g.param("dead", &[3]);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        b.insert("dead".into(), Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
        g.eval(&b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["dead"], Tensor::zeros(&[3]));
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn two_backward_passes_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.param("x", &[3, 4]);
        let w = g.param("w", &[4, 2]);
        let h = g.matmul(x, w).unwrap();
        let a = g.gelu(h).unwrap();
        let loss = g.mean(a).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), randn(&[3, 4], &mut rng));
        b.insert("w".into(), randn(&[4, 2], &mut rng));
        g.eval(&b).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1["x"], g2["x"]);
        assert_eq!(g1["w"], g2["w"]);
    }

    #[test]
    fn matmul_against_hand_computed_product() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[3, 2]);
        let c = g.matmul(a, b).unwrap();
        g.mark_output("c", c);
        let mut bind = Bindings::new();
        bind.insert("a".into(), Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        bind.insert("b".into(), Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
        let out = g.eval(&bind).unwrap();
        assert_eq!(out["c"].data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn batched_matmul_matches_per_slice_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[2, 4, 5], &mut rng);
        let mut g = Graph::new();
        let na = g.input("a", &[2, 3, 4]);
        let nb = g.input("b", &[2, 4, 5]);
        let c = g.matmul(na, nb).unwrap();
        g.mark_output("c", c);
        let mut bind = Bindings::new();
        bind.insert("a".into(), a.clone());
        bind.insert("b".into(), b.clone());
        let full = g.eval(&bind).unwrap()["c"].clone();
        for p in 0..2 {
            let ap = Tensor::new(vec![3, 4], a.data()[p * 12..(p + 1) * 12].to_vec()).unwrap();
            let bp = Tensor::new(vec![4, 5], b.data()[p * 20..(p + 1) * 20].to_vec()).unwrap();
            let mut g2 = Graph::new();
            let x = g2.input("x", &[3, 4]);
            let y = g2.input("y", &[4, 5]);
            let c2 = g2.matmul(x, y).unwrap();
            g2.mark_output("c", c2);
            let mut b2 = Bindings::new();
            b2.insert("x".into(), ap);
            b2.insert("y".into(), bp);
            let slice = g2.eval(&b2).unwrap()["c"].clone();
            assert_eq!(&full.data()[p * 15..(p + 1) * 15], slice.data());
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]);
        let t = g.transpose(a, 0, 1).unwrap();
        g.mark_output("t", t);
        let mut b = Bindings::new();
        b.insert("a".into(), Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = g.eval(&b).unwrap();
        assert_eq!(out["t"].shape(), &[3, 2]);
        assert_eq!(out["t"].data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gather_rows_picks_and_repeats() {
        let mut g = Graph::new();
        let a = g.input("a", &[3, 2]);
        let sel = g.gather_rows(a, &[2, 0, 2]).unwrap();
        g.mark_output("sel", sel);
        let mut b = Bindings::new();
        b.insert("a".into(), Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = g.eval(&b).unwrap();
        assert_eq!(out["sel"].data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.input("a", &[4, 7]);
        let s = g.softmax(a).unwrap();
        g.mark_output("s", s);
        let mut b = Bindings::new();
        b.insert("a".into(), randn(&[4, 7], &mut rng));
        let out = g.eval(&b).unwrap();
        for r in 0..4 {
            let sum: f32 = out["s"].data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let a = g.input("a", &[3, 8]);
        let y = g.layer_norm(a, 1e-5).unwrap();
        g.mark_output("y", y);
        let mut b = Bindings::new();
        b.insert("a".into(), randn(&[3, 8], &mut rng));
        let out = g.eval(&b).unwrap();
        for r in 0..3 {
            let row = &out["y"].data()[r * 8..(r + 1) * 8];
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn log_softmax_nll_matches_composed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = randn(&[5, 9], &mut rng);
        let targets = [3usize, 0, 8, 1, 4];
        let mut g = Graph::new();
        let a = g.input("a", &[5, 9]);
        let nll = g.log_softmax_nll(a, &targets).unwrap();
        g.mark_output("nll", nll);
        let mut b = Bindings::new();
        b.insert("a".into(), logits.clone());
        let out = g.eval(&b).unwrap();
        for r in 0..5 {
            let xs = &logits.data()[r * 9..(r + 1) * 9];
            let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = xs.iter().map(|&v| (v as f64 - max).exp()).sum();
            let want = -(xs[targets[r]] as f64 - max - denom.ln());
            assert!((out["nll"].data()[r] as f64 - want).abs() < 1e-6);
        }
    }

    // Finite-difference sweep over every primitive. Each case builds a small
    // scalar loss around the primitive and checks the analytic gradient at
    // eps = 1e-3 to a relative error under 1e-4.
    #[test]
    fn grad_check_every_primitive() {
        let eps = 1e-3;
        let tol = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(23);

        let mut check = |name: &str, build: &dyn Fn(&mut Graph) -> (NodeId, Vec<(&'static str, Vec<usize>)>)| {
            let mut g = Graph::new();
            let (loss, leaves) = build(&mut g);
            let mut b = Bindings::new();
            for (leaf, shape) in &leaves {
                b.insert(leaf.to_string(), randn_scaled(shape, 0.5, &mut rng));
            }
            for (leaf, _) in &leaves {
                let err = grad_check(&mut g, loss, &b, leaf, eps).unwrap();
                assert!(err < tol, "{} wrt {}: relative error {} >= {}", name, leaf, err, tol);
            }
        };

        check("add", &|g| {
            let x = g.param("x", &[3, 4]);
            let y = g.param("y", &[3, 4]);
            let s = g.add(x, y).unwrap();
            let s2 = g.mul(s, s).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![3, 4]), ("y", vec![3, 4])])
        });
        check("add_broadcast", &|g| {
            let x = g.param("x", &[3, 4]);
            let y = g.param("y", &[4]);
            let s = g.add(x, y).unwrap();
            let s2 = g.mul(s, s).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![3, 4]), ("y", vec![4])])
        });
        check("sub", &|g| {
            let x = g.param("x", &[2, 5]);
            let y = g.param("y", &[2, 5]);
            let s = g.sub(x, y).unwrap();
            let s2 = g.mul(s, s).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![2, 5]), ("y", vec![2, 5])])
        });
        check("mul_broadcast_scalar", &|g| {
            let x = g.param("x", &[6]);
            let c = g.param("c", &[1]);
            let s = g.mul(x, c).unwrap();
            let s2 = g.mul(s, s).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![6]), ("c", vec![1])])
        });
        check("matmul", &|g| {
            let x = g.param("x", &[3, 4]);
            let w = g.param("w", &[4, 2]);
            let h = g.matmul(x, w).unwrap();
            let h2 = g.mul(h, h).unwrap();
            (g.mean(h2).unwrap(), vec![("x", vec![3, 4]), ("w", vec![4, 2])])
        });
        check("matmul_batched", &|g| {
            let x = g.param("x", &[2, 3, 4]);
            let y = g.param("y", &[2, 4, 3]);
            let h = g.matmul(x, y).unwrap();
            let h2 = g.mul(h, h).unwrap();
            (g.mean(h2).unwrap(), vec![("x", vec![2, 3, 4]), ("y", vec![2, 4, 3])])
        });
        check("matmul_shared_rhs", &|g| {
            let x = g.param("x", &[2, 3, 4]);
            let w = g.param("w", &[4, 2]);
            let h = g.matmul(x, w).unwrap();
            let h2 = g.mul(h, h).unwrap();
            (g.mean(h2).unwrap(), vec![("x", vec![2, 3, 4]), ("w", vec![4, 2])])
        });
        check("transpose", &|g| {
            let x = g.param("x", &[2, 3, 4]);
            let t = g.transpose(x, 1, 2).unwrap();
            let t2 = g.mul(t, t).unwrap();
            (g.mean(t2).unwrap(), vec![("x", vec![2, 3, 4])])
        });
        check("reshape", &|g| {
            let x = g.param("x", &[2, 6]);
            let r = g.reshape(x, &[3, 4]).unwrap();
            let r2 = g.mul(r, r).unwrap();
            (g.mean(r2).unwrap(), vec![("x", vec![2, 6])])
        });
        check("gather_rows", &|g| {
            let x = g.param("x", &[5, 3]);
            let sel = g.gather_rows(x, &[4, 1, 1, 0]).unwrap();
            let s2 = g.mul(sel, sel).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![5, 3])])
        });
        check("softmax", &|g| {
            let x = g.param("x", &[3, 5]);
            let s = g.softmax(x).unwrap();
            let s2 = g.mul(s, s).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![3, 5])])
        });
        check("layer_norm", &|g| {
            let x = g.param("x", &[3, 6]);
            let yn = g.layer_norm(x, 1e-5).unwrap();
            let w = g.param("w", &[6]);
            let scaled = g.mul(yn, w).unwrap();
            let s2 = g.mul(scaled, scaled).unwrap();
            (g.mean(s2).unwrap(), vec![("x", vec![3, 6]), ("w", vec![6])])
        });
        check("gelu", &|g| {
            let x = g.param("x", &[4, 4]);
            let a = g.gelu(x).unwrap();
            let a2 = g.mul(a, a).unwrap();
            (g.mean(a2).unwrap(), vec![("x", vec![4, 4])])
        });
        check("relu", &|g| {
            let x = g.param("x", &[4, 4]);
            let a = g.relu(x).unwrap();
            let a2 = g.mul(a, a).unwrap();
            (g.mean(a2).unwrap(), vec![("x", vec![4, 4])])
        });
        check("sum", &|g| {
            let x = g.param("x", &[3, 3]);
            let x2 = g.mul(x, x).unwrap();
            (g.sum(x2).unwrap(), vec![("x", vec![3, 3])])
        });
        check("mean", &|g| {
            let x = g.param("x", &[3, 3]);
            let x2 = g.mul(x, x).unwrap();
            (g.mean(x2).unwrap(), vec![("x", vec![3, 3])])
        });
        check("squared_error", &|g| {
            let x = g.param("x", &[3, 4]);
            let y = g.param("y", &[3, 4]);
            (g.squared_error(x, y).unwrap(), vec![("x", vec![3, 4]), ("y", vec![3, 4])])
        });
        check("log_softmax_nll", &|g| {
            let x = g.param("x", &[4, 6]);
            let nll = g.log_softmax_nll(x, &[0, 5, 2, 2]).unwrap();
            (g.mean(nll).unwrap(), vec![("x", vec![4, 6])])
        });
    }

    // Softmax-cross-entropy at a random point against central differences,
    // the classic end-to-end sanity case for a tape.
    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut g = Graph::new();
        let x = g.param("x", &[2, 4]);
        let w = g.param("w", &[4, 5]);
        let logits = g.matmul(x, w).unwrap();
        let nll = g.log_softmax_nll(logits, &[1, 3]).unwrap();
        let loss = g.mean(nll).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), randn(&[2, 4], &mut rng));
        b.insert("w".into(), randn(&[4, 5], &mut rng));
        for leaf in ["x", "w"] {
            let err = grad_check(&mut g, loss, &b, leaf, 1e-3).unwrap();
            assert!(err < 1e-4, "wrt {}: {}", leaf, err);
        }
    }

    // A 2-layer perceptron with GELU, the worked example for grad_check.
    #[test]
    fn grad_check_two_layer_perceptron() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut g = Graph::new();
        let x = g.input("x", &[4, 3]);
        let w1 = g.param("w1", &[3, 8]);
        let b1 = g.param("b1", &[8]);
        let w2 = g.param("w2", &[8, 2]);
        let b2 = g.param("b2", &[2]);
        let h = g.matmul(x, w1).unwrap();
        let h = g.add(h, b1).unwrap();
        let h = g.gelu(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        let o = g.add(o, b2).unwrap();
        let target = g.input("t", &[4, 2]);
        let sq = g.squared_error(o, target).unwrap();
        let inv_n = g.constant(Tensor::scalar(1.0 / 8.0));
        let loss = g.mul(sq, inv_n).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), randn_scaled(&[4, 3], 0.25, &mut rng));
        b.insert("t".into(), randn_scaled(&[4, 2], 0.25, &mut rng));
        b.insert("w1".into(), randn_scaled(&[3, 8], 0.25, &mut rng));
        b.insert("b1".into(), randn_scaled(&[8], 0.25, &mut rng));
        b.insert("w2".into(), randn_scaled(&[8, 2], 0.25, &mut rng));
        b.insert("b2".into(), randn_scaled(&[2], 0.25, &mut rng));
        for leaf in ["w1", "b1", "w2", "b2"] {
            let err = grad_check(&mut g, loss, &b, leaf, 1e-3).unwrap();
            assert!(err < 1e-4, "wrt {}: {}", leaf, err);
        }
    }
}
