//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`ComputationRecord`] is built node by node (every operand precedes its
//! consumer), evaluated with [`ComputationRecord::forward`], and differentiated
//! with [`ComputationRecord::backward`]. Only the gradient with respect to the
//! single input node is returned; gradients of parameter nodes are kept inside
//! the record and can be elided entirely.
//!
//! ```
//! use gradadapt::autodiff::{ComputationRecord, NdArray};
//!
//! let mut rec = ComputationRecord::new();
//! let x = rec.input(&[3]);
//! let s = rec.sum(x).unwrap();
//! rec.set_output(s).unwrap();
//! let value = rec.forward(&NdArray::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
//! assert_eq!(value, 6.0);
//! let grad = rec.backward(true).unwrap();
//! assert_eq!(grad.data(), &[1.0, 1.0, 1.0]);
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape product {expected} does not match data length {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("node {node} ({op}): shape mismatch, {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("record has no input node")]
    NoInput,
    #[error("record already has an input node")]
    DuplicateInput,
    #[error("record has no output node")]
    NoOutput,
    #[error("output node {node} is not scalar (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("epsilon must lie in (0, 1e-2], got {0}")]
    Epsilon(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for NdArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NdArray{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl NdArray {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    /// One-dimensional array.
    pub fn from_vec(data: Vec<f64>) -> Self {
        NdArray {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Zero-dimensional array holding one value.
    pub fn scalar(value: f64) -> Self {
        NdArray {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Height and width of the trailing two dimensions.
    pub fn spatial_dims(&self) -> Option<(usize, usize)> {
        let n = self.shape.len();
        if n < 2 {
            return None;
        }
        Some((self.shape[n - 2], self.shape[n - 1]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn abs(&self) -> NdArray {
        self.map(f64::abs)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<NdArray> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(AutodiffError::DataLength {
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(items: &[NdArray]) -> Result<NdArray> {
        let Some(first) = items.first() else {
            return Ok(NdArray::zeros(&[0]));
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(AutodiffError::DataLength {
                    expected: first.len(),
                    actual: item.len(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(NdArray { shape, data })
    }
}

/// Identifier of a node inside one [`ComputationRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Depends (possibly transitively) on the record's input.
    Data,
    /// Constant with respect to the input: weights, biases, masks.
    Parameter,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Conv2d { input: NodeId, kernel: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    AvgPool(NodeId, usize),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::AvgPool(..) => "avg_pool",
            Op::Sum(_) => "sum",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param => Vec::new(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Conv2d { input, kernel } => vec![input, kernel],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::AvgPool(a, _)
            | Op::Sum(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    kind: NodeKind,
    value: Option<NdArray>,
}

/// Counters filled in by the most recent backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose adjoint was allocated and propagated.
    pub nodes_visited: usize,
    /// Vector-Jacobian products evaluated, one per (consumer, operand) edge.
    pub vjp_evaluations: usize,
}

impl BackwardStats {
    pub fn total(&self) -> usize {
        self.nodes_visited + self.vjp_evaluations
    }
}

/// Topologically ordered list of primitive operations with cached values.
#[derive(Debug, Clone, Default)]
pub struct ComputationRecord {
    nodes: Vec<Node>,
    input: Option<NodeId>,
    output: Option<NodeId>,
    param_grads: Vec<Option<NdArray>>,
    stats: BackwardStats,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || b.iter().product::<usize>() == 1
}

fn batch_and_plane(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    (shape[..n - 2].iter().product(), h, w)
}

impl ComputationRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_node(&self) -> Option<NodeId> {
        self.input
    }

    pub fn output_node(&self) -> Option<NodeId> {
        self.output
    }

    pub fn node_kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.0].kind
    }

    /// Name of the operation that produced a node.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Option<&NdArray> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn stats(&self) -> BackwardStats {
        self.stats
    }

    /// Gradient of a parameter node from the last unskipped backward pass.
    pub fn parameter_gradient(&self, id: NodeId) -> Option<&NdArray> {
        self.param_grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let kind = match op {
            Op::Input => NodeKind::Data,
            Op::Param => NodeKind::Parameter,
            _ => {
                if op
                    .operands()
                    .iter()
                    .any(|o| self.nodes[o.0].kind == NodeKind::Data)
                {
                    NodeKind::Data
                } else {
                    NodeKind::Parameter
                }
            }
        };
        self.nodes.push(Node {
            op,
            shape,
            kind,
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_error(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Declares the single input node.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        assert!(self.input.is_none(), "record already has an input node");
        let id = self.push(Op::Input, shape.to_vec());
        self.input = Some(id);
        id
    }

    pub fn try_input(&mut self, shape: &[usize]) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(AutodiffError::DuplicateInput);
        }
        Ok(self.input(shape))
    }

    pub fn param(&mut self, value: NdArray) -> NodeId {
        let shape = value.shape.clone();
        let id = self.push(Op::Param, shape);
        self.nodes[id.0].value = Some(value);
        id
    }

    /// Elementwise sum; `b` may also be a single value broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.shape.clone(), self.check(b)?.shape.clone());
        if !broadcast_ok(&sa, &sb) {
            return Err(self.shape_error("add", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    /// Elementwise product; `b` may also be a single value broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.shape.clone(), self.check(b)?.shape.clone());
        if !broadcast_ok(&sa, &sb) {
            return Err(self.shape_error("mul", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(Op::Scale(a, factor), s))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, constant: f64) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(Op::Offset(a, constant), s))
    }

    /// Zero-padded "same" 2-D cross-correlation over the trailing two axes.
    /// Leading axes are treated as a batch. The kernel must be 2-D with odd
    /// side lengths.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let si = self.check(input)?.shape.clone();
        let sk = self.check(kernel)?.shape.clone();
        if si.len() < 2 {
            return Err(self.shape_error("conv2d", format!("input must be at least 2-D, got {si:?}")));
        }
        if sk.len() != 2 || sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(self.shape_error("conv2d", format!("kernel must be 2-D with odd sides, got {sk:?}")));
        }
        Ok(self.push(Op::Conv2d { input, kernel }, si))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(Op::Relu(a), s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(Op::Sigmoid(a), s))
    }

    /// Non-overlapping block mean over the trailing two axes.
    pub fn avg_pool(&mut self, a: NodeId, block: usize) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        let n = s.len();
        if n < 2 || block == 0 || s[n - 2] % block != 0 || s[n - 1] % block != 0 {
            return Err(self.shape_error("avg_pool", format!("block {block} does not tile {s:?}")));
        }
        let mut out = s.clone();
        out[n - 2] /= block;
        out[n - 1] /= block;
        Ok(self.push(Op::AvgPool(a, block), out))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), Vec::new()))
    }

    /// Marks the scalar sink that `forward` returns and `backward` differentiates.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        let node = self.check(id)?;
        if node.shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarOutput {
                node: id.0,
                shape: node.shape.clone(),
            });
        }
        self.output = Some(id);
        Ok(())
    }

    /// Evaluates every data node for `input` and returns the output value.
    pub fn forward(&mut self, input: &NdArray) -> Result<f64> {
        let input_id = self.input.ok_or(AutodiffError::NoInput)?;
        let declared = &self.nodes[input_id.0].shape;
        if declared.as_slice() != input.shape() {
            return Err(AutodiffError::Shape {
                node: input_id.0,
                op: "input",
                detail: format!("declared {declared:?}, got {:?}", input.shape()),
            });
        }
        for node in &mut self.nodes {
            if node.kind == NodeKind::Data {
                node.value = None;
            }
        }
        self.nodes[input_id.0].value = Some(input.clone());
        self.evaluate_pending()?;
        self.output_value()
    }

    /// Evaluates nodes appended since the last forward pass, reusing every
    /// cached value.
    pub fn evaluate_pending(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].value.is_none() {
                let v = self.eval_node(i)?;
                self.nodes[i].value = Some(v);
            }
        }
        Ok(())
    }

    pub fn output_value(&self) -> Result<f64> {
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        self.nodes[out.0]
            .value
            .as_ref()
            .map(|v| v.data[0])
            .ok_or(AutodiffError::BackwardBeforeForward)
    }

    fn val(&self, id: NodeId) -> Result<&NdArray> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(AutodiffError::BackwardBeforeForward)
    }

    fn eval_node(&self, i: usize) -> Result<NdArray> {
        let node = &self.nodes[i];
        let out = match node.op {
            Op::Input => return Err(AutodiffError::BackwardBeforeForward),
            Op::Param => unreachable!("parameters are set at construction"),
            Op::Add(a, b) => {
                let (va, vb) = (self.val(a)?, self.val(b)?);
                zip_broadcast(va, vb, |x, y| x + y)
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(a)?, self.val(b)?);
                zip_broadcast(va, vb, |x, y| x * y)
            }
            Op::Scale(a, c) => self.val(a)?.map(|x| x * c),
            Op::Offset(a, c) => self.val(a)?.map(|x| x + c),
            Op::Conv2d { input, kernel } => conv2d_forward(self.val(input)?, self.val(kernel)?),
            Op::Relu(a) => self.val(a)?.map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => self.val(a)?.map(sigmoid),
            Op::AvgPool(a, block) => avg_pool_forward(self.val(a)?, block),
            Op::Sum(a) => NdArray::scalar(self.val(a)?.sum()),
        };
        Ok(out)
    }

    /// Returns d(output)/d(input).
    ///
    /// With `skip_parameter_gradients`, nodes that do not depend on the input
    /// get no adjoint storage and no vector-Jacobian product is evaluated for
    /// edges that lead into them. The input gradient is unaffected: its
    /// accumulation order is the same either way.
    pub fn backward(&mut self, skip_parameter_gradients: bool) -> Result<NdArray> {
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        let input = self.input.ok_or(AutodiffError::NoInput)?;
        if self.nodes.iter().any(|n| n.value.is_none()) {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let wanted = |kind: NodeKind| !skip_parameter_gradients || kind == NodeKind::Data;

        let mut adj: Vec<Option<NdArray>> = vec![None; self.nodes.len()];
        let mut stats = BackwardStats::default();
        if wanted(self.nodes[out.0].kind) {
            adj[out.0] = Some(NdArray::filled(&self.nodes[out.0].shape, 1.0));
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            stats.nodes_visited += 1;
            let op = self.nodes[i].op.clone();
            for (operand, contribution) in self.vjp(&op, i, &g, &wanted, &mut stats)? {
                accumulate(&mut adj[operand.0], contribution, &self.nodes[operand.0].shape);
            }
            adj[i] = Some(g);
        }

        self.stats = stats;
        let grad = adj[input.0]
            .take()
            .unwrap_or_else(|| NdArray::zeros(&self.nodes[input.0].shape));
        self.param_grads = if skip_parameter_gradients {
            Vec::new()
        } else {
            adj.into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| if n.kind == NodeKind::Parameter { g } else { None })
                .collect()
        };
        Ok(grad)
    }

    fn vjp(
        &self,
        op: &Op,
        i: usize,
        g: &NdArray,
        wanted: &dyn Fn(NodeKind) -> bool,
        stats: &mut BackwardStats,
    ) -> Result<Vec<(NodeId, NdArray)>> {
        let mut out = Vec::new();
        let mut emit = |id: NodeId, f: &mut dyn FnMut() -> Result<NdArray>| -> Result<()> {
            if wanted(self.nodes[id.0].kind) {
                stats.vjp_evaluations += 1;
                out.push((id, f()?));
            }
            Ok(())
        };
        match *op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                emit(a, &mut || Ok(g.clone()))?;
                emit(b, &mut || Ok(reduce_to(g.clone(), &self.nodes[b.0].shape)))?;
            }
            Op::Mul(a, b) => {
                emit(a, &mut || Ok(zip_broadcast(g, self.val(b)?, |x, y| x * y)))?;
                emit(b, &mut || {
                    let prod = zip_same(g, self.val(a)?, |x, y| x * y);
                    Ok(reduce_to(prod, &self.nodes[b.0].shape))
                })?;
            }
            Op::Scale(a, c) => emit(a, &mut || Ok(g.map(|x| x * c)))?,
            Op::Offset(a, _) => emit(a, &mut || Ok(g.clone()))?,
            Op::Conv2d { input, kernel } => {
                emit(input, &mut || Ok(conv2d_grad_input(g, self.val(kernel)?)))?;
                emit(kernel, &mut || Ok(conv2d_grad_kernel(g, self.val(input)?, self.val(kernel)?.shape())))?;
            }
            Op::Relu(a) => emit(a, &mut || {
                Ok(zip_same(g, self.val(a)?, |gv, x| if x > 0.0 { gv } else { 0.0 }))
            })?,
            Op::Sigmoid(a) => emit(a, &mut || {
                let y = self.nodes[i].value.as_ref().expect("forward ran");
                Ok(zip_same(g, y, |gv, s| gv * s * (1.0 - s)))
            })?,
            Op::AvgPool(a, block) => emit(a, &mut || Ok(avg_pool_backward(g, &self.nodes[a.0].shape, block)))?,
            Op::Sum(a) => emit(a, &mut || Ok(NdArray::filled(&self.nodes[a.0].shape, g.data[0])))?,
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<NdArray>, contribution: NdArray, shape: &[usize]) {
    debug_assert_eq!(contribution.len(), shape.iter().product::<usize>());
    match slot {
        Some(acc) => {
            for (a, c) in acc.data.iter_mut().zip(&contribution.data) {
                *a += c;
            }
        }
        None => {
            let mut c = contribution;
            c.shape = shape.to_vec();
            *slot = Some(c);
        }
    }
}

fn zip_same(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    NdArray {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn zip_broadcast(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    if b.data.len() == 1 && a.data.len() != 1 {
        let y = b.data[0];
        a.map(|x| f(x, y))
    } else {
        zip_same(a, b, f)
    }
}

fn reduce_to(g: NdArray, shape: &[usize]) -> NdArray {
    if g.data.len() == shape.iter().product::<usize>() {
        g
    } else {
        NdArray {
            shape: shape.to_vec(),
            data: vec![g.sum()],
        }
    }
}

fn conv2d_forward(x: &NdArray, k: &NdArray) -> NdArray {
    let (batch, h, w) = batch_and_plane(&x.shape);
    let (kh, kw) = (k.shape[0], k.shape[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; x.data.len()];
    for b in 0..batch {
        let plane = &x.data[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * h * w..(b + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..kh {
                    let r = i + a;
                    if r < ph || r - ph >= h {
                        continue;
                    }
                    let row = &plane[(r - ph) * w..(r - ph + 1) * w];
                    for c in 0..kw {
                        let col = j + c;
                        if col < pw || col - pw >= w {
                            continue;
                        }
                        acc += k.data[a * kw + c] * row[col - pw];
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    }
    NdArray {
        shape: x.shape.clone(),
        data: out,
    }
}

fn conv2d_grad_input(g: &NdArray, k: &NdArray) -> NdArray {
    let (batch, h, w) = batch_and_plane(&g.shape);
    let (kh, kw) = (k.shape[0], k.shape[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; g.data.len()];
    for b in 0..batch {
        let gp = &g.data[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * h * w..(b + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let gv = gp[i * w + j];
                if gv == 0.0 {
                    continue;
                }
                for a in 0..kh {
                    let r = i + a;
                    if r < ph || r - ph >= h {
                        continue;
                    }
                    for c in 0..kw {
                        let col = j + c;
                        if col < pw || col - pw >= w {
                            continue;
                        }
                        dst[(r - ph) * w + col - pw] += k.data[a * kw + c] * gv;
                    }
                }
            }
        }
    }
    NdArray {
        shape: g.shape.clone(),
        data: out,
    }
}

fn conv2d_grad_kernel(g: &NdArray, x: &NdArray, kshape: &[usize]) -> NdArray {
    let (batch, h, w) = batch_and_plane(&g.shape);
    let (kh, kw) = (kshape[0], kshape[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; kh * kw];
    for b in 0..batch {
        let gp = &g.data[b * h * w..(b + 1) * h * w];
        let xp = &x.data[b * h * w..(b + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let gv = gp[i * w + j];
                for a in 0..kh {
                    let r = i + a;
                    if r < ph || r - ph >= h {
                        continue;
                    }
                    for c in 0..kw {
                        let col = j + c;
                        if col < pw || col - pw >= w {
                            continue;
                        }
                        out[a * kw + c] += xp[(r - ph) * w + col - pw] * gv;
                    }
                }
            }
        }
    }
    NdArray {
        shape: kshape.to_vec(),
        data: out,
    }
}

fn avg_pool_forward(x: &NdArray, block: usize) -> NdArray {
    let (batch, h, w) = batch_and_plane(&x.shape);
    let (oh, ow) = (h / block, w / block);
    let area = (block * block) as f64;
    let mut out = Vec::with_capacity(batch * oh * ow);
    for b in 0..batch {
        let plane = &x.data[b * h * w..(b + 1) * h * w];
        for bi in 0..oh {
            for bj in 0..ow {
                let mut acc = 0.0;
                for r in bi * block..(bi + 1) * block {
                    for c in bj * block..(bj + 1) * block {
                        acc += plane[r * w + c];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    let mut shape = x.shape.clone();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    NdArray { shape, data: out }
}

fn avg_pool_backward(g: &NdArray, in_shape: &[usize], block: usize) -> NdArray {
    let (batch, h, w) = batch_and_plane(in_shape);
    let (oh, ow) = (h / block, w / block);
    let area = (block * block) as f64;
    let mut out = vec![0.0; batch * h * w];
    for b in 0..batch {
        for r in 0..h {
            for c in 0..w {
                out[b * h * w + r * w + c] = g.data[b * oh * ow + (r / block) * ow + c / block] / area;
            }
        }
    }
    NdArray {
        shape: in_shape.to_vec(),
        data: out,
    }
}

/// Central-difference check of `backward` against `forward`.
///
/// Returns the worst relative error over all input coordinates, with the
/// denominator `max(|analytic|, |numeric|, 1e-12)`. The record is left
/// evaluated at `input`.
pub fn grad_check(record: &mut ComputationRecord, input: &NdArray, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(AutodiffError::Epsilon(epsilon));
    }
    record.forward(input)?;
    let analytic = record.backward(true)?;
    let mut probe = input.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..input.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + epsilon;
        let plus = record.forward(&probe)?;
        probe.data[idx] = orig - epsilon;
        let minus = record.forward(&probe)?;
        probe.data[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    record.forward(input)?;
    Ok(worst)
}
