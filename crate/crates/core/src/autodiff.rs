//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. Nodes are appended in execution order, so the tape is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Parameters enter the graph through [`Graph::param`], which shares the
//! stored buffer and remembers the path so gradients can be accumulated back
//! into [`ModelParams`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MdamError, Result};
use crate::params::ModelParams;
use crate::tensor::{gemm, gemm_into, Tensor};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which input streams a value was derived from. Used by the fusion audit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Modality(u8);

impl Modality {
    pub const NONE: Modality = Modality(0);
    pub const FRAME: Modality = Modality(1);
    pub const CAPTION: Modality = Modality(2);
    pub const QUESTION: Modality = Modality(4);
    pub const ANSWER: Modality = Modality(8);

    pub fn union(self, other: Modality) -> Modality {
        Modality(self.0 | other.0)
    }

    pub fn contains(self, other: Modality) -> bool {
        self.0 & other.0 == other.0
    }

    fn mixes_frames_and_captions(self) -> bool {
        self.contains(Modality::FRAME.union(Modality::CAPTION))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Tanh,
    Relu,
    Softmax,
    LayerNorm,
    Concat,
    StackRows,
    Gather,
    Dropout,
    TileRows,
    MaxRows,
    Sum,
    Mean,
    Transpose,
    MulRows,
    ScaleRows,
    Unfold,
    SliceRow,
    Reshape,
    NegLogPick,
    Hinge,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::StackRows,
        OpKind::Gather,
        OpKind::Dropout,
        OpKind::TileRows,
        OpKind::MaxRows,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Transpose,
        OpKind::MulRows,
        OpKind::ScaleRows,
        OpKind::Unfold,
        OpKind::SliceRow,
        OpKind::Reshape,
        OpKind::NegLogPick,
        OpKind::Hinge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::StackRows => "stack_rows",
            OpKind::Gather => "gather",
            OpKind::Dropout => "dropout",
            OpKind::TileRows => "tile_rows",
            OpKind::MaxRows => "max_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Transpose => "transpose",
            OpKind::MulRows => "mul_rows",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Unfold => "unfold",
            OpKind::SliceRow => "slice_row",
            OpKind::Reshape => "reshape",
            OpKind::NegLogPick => "neg_log_pick",
            OpKind::Hinge => "hinge",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale { a: Var, factor: f64 },
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    StackRows(Vec<Var>),
    Gather { table: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    TileRows { x: Var },
    MaxRows { x: Var, winners: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Transpose { a: Var, rows: usize, cols: usize },
    MulRows { m: Var, w: Var },
    ScaleRows { x: Var, factors: Vec<f64> },
    Unfold { x: Var, width: usize, starts: Vec<usize> },
    SliceRow { x: Var, row: usize },
    Reshape(Var),
    NegLogPick { p: Var, target: usize, clamp: f64 },
    Hinge { logits: Var, target: usize, rival: usize, active: bool },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::TileRows { .. } => OpKind::TileRows,
            Op::MaxRows { .. } => OpKind::MaxRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::MulRows { .. } => OpKind::MulRows,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::SliceRow { .. } => OpKind::SliceRow,
            Op::Reshape(_) => OpKind::Reshape,
            Op::NegLogPick { .. } => OpKind::NegLogPick,
            Op::Hinge { .. } => OpKind::Hinge,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { a, bias } => vec![*a, *bias],
            Op::MulRows { m, w } => vec![*m, *w],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } | Op::StackRows(parts) => parts.clone(),
            Op::Gather { table: a, .. }
            | Op::Scale { a, .. }
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Dropout { x: a, .. }
            | Op::TileRows { x: a }
            | Op::MaxRows { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose { a, .. }
            | Op::ScaleRows { x: a, .. }
            | Op::Unfold { x: a, .. }
            | Op::SliceRow { x: a, .. }
            | Op::Reshape(a)
            | Op::NegLogPick { p: a, .. }
            | Op::Hinge { logits: a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    modality: Modality,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    training: bool,
    rng: ChaCha8Rng,
    fault: Option<(OpKind, f64)>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// An evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            fault: None,
        }
    }

    /// A training graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Scales the backward contribution of every `kind` node by `factor`.
    /// Only meant for mutation tests of the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn modality(&self, v: Var) -> Modality {
        self.nodes[v.0].modality
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`, available after
    /// [`Graph::backward`] for nodes that require gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let modality = inputs
            .iter()
            .fold(Modality::NONE, |m, i| m.union(self.nodes[i.0].modality));
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            modality,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool, modality: Modality) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            modality,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false, Modality::NONE)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(t), requires_grad, Modality::NONE)
    }

    /// A constant input tagged with the stream it comes from.
    pub fn input(&mut self, t: Tensor, modality: Modality) -> Var {
        self.push_leaf(Arc::new(t), false, modality)
    }

    /// Brings a stored parameter into the graph. Repeated requests for the
    /// same path return the same node.
    pub fn param(&mut self, params: &ModelParams, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let entry = params.entry(path)?;
        let v = self.push_leaf(entry.shared_value(), !entry.frozen, Modality::NONE);
        self.params.insert(path.to_string(), v);
        self.param_order.push((path.to_string(), v));
        Ok(v)
    }

    /// Parameter nodes in the order they were first requested.
    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.param_order
    }

    /// Counts the nodes where frame-derived and caption-derived information
    /// meet for the first time: the node's combined provenance holds both
    /// streams but none of its inputs does on its own.
    pub fn count_cross_modal_fusions(&self) -> usize {
        self.nodes
            .iter()
            .filter(|node| {
                node.modality.mixes_frames_and_captions()
                    && node
                        .op
                        .inputs()
                        .iter()
                        .all(|i| !self.nodes[i.0].modality.mixes_frames_and_captions())
            })
            .count()
    }

    /// Every discrete choice made by the non-smooth operations: which side of
    /// zero each ReLU input fell on, which row won each max, the hinge rival
    /// and whether a clamp was hit. Two graphs with equal patterns evaluated a
    /// function that is smooth on the segment between their inputs.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for chunk in self.nodes[a.0].value.data().chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
                        out.push(bits);
                    }
                }
                Op::MaxRows { winners, .. } => out.extend(winners.iter().map(|&w| w as u64)),
                Op::Hinge { rival, active, .. } => out.extend([*rival as u64, u64::from(*active)]),
                Op::NegLogPick { p, target, clamp } => {
                    out.push(u64::from(self.nodes[p.0].value.data()[*target] < *clamp))
                }
                _ => {}
            }
        }
        out
    }

    // ── forward operations ──────────────────────────────────────────────

    /// Matrix product. A rank-1 left operand is treated as a single row and
    /// the result is rank-1 as well.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = match sa.as_slice() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            _ => return Err(MdamError::dim("matmul", &sa, &sb)),
        };
        let n = match sb.as_slice() {
            [kb, n] if *kb == k => *n,
            _ => return Err(MdamError::dim("matmul", &sa, &sb)),
        };
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MdamError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let w = self.value(a).last_dim();
        if self.shape(bias) != [w] {
            return Err(MdamError::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(w)
            .flat_map(|row| row.iter().zip(&b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.map(a, |x| x * factor);
        Ok(self.push(t, Op::Scale { a, factor }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        Ok(self.push(t, Op::Tanh(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0));
        Ok(self.push(t, Op::Relu(a)))
    }

    /// Softmax over the last axis. `mask` (true = keep) has either one entry
    /// per column, shared by every row, or one entry per element. Masked
    /// entries come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if let Some(m) = mask {
            if m.len() != n && m.len() != t.len() {
                return Err(MdamError::dim("softmax", t.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; t.len()];
        for (r, (row, dst)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == n => m[j],
                Some(m) => m[r * n + j],
            };
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(MdamError::DegenerateMask);
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d < 2 {
            return Err(MdamError::Shape {
                shape: t.shape().to_vec(),
                reason: "layer norm needs at least two features".into(),
            });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(MdamError::dim("layer_norm", t.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Concatenation along the last axis; all parts share their leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MdamError::Argument("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(MdamError::dim("concat", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), widths }))
    }

    /// Stacks equally long vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MdamError::Argument("stack of nothing".into()))?;
        let s = self.shape(first).to_vec();
        if s.len() != 1 {
            return Err(MdamError::dim("stack_rows", &s, &[]));
        }
        let mut out = Vec::with_capacity(parts.len() * s[0]);
        for &p in parts {
            if self.shape(p) != s.as_slice() {
                return Err(MdamError::dim("stack_rows", &s, self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![parts.len(), s[0]], out)?;
        Ok(self.push(t, Op::StackRows(parts.to_vec())))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(MdamError::dim("gather", t.shape(), &[]));
        }
        if indices.is_empty() {
            return Err(MdamError::EmptySequence("gather without indices".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(MdamError::Index { what: "embedding table", index: i, size: v });
            }
            out.extend_from_slice(t.row(i));
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, indices: indices.to_vec() }))
    }

    /// Inverted dropout: at train time each entry is zeroed with probability
    /// `rate` and survivors are divided by the keep probability. Evaluation
    /// graphs return `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(MdamError::Argument(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Repeats a vector `times` times as the rows of a matrix.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || times == 0 {
            return Err(MdamError::dim("tile_rows", t.shape(), &[times]));
        }
        let data = t.data().repeat(times);
        let t = Tensor::new(vec![times, t.len()], data)?;
        Ok(self.push(t, Op::TileRows { x }))
    }

    /// Column-wise maximum over the rows of a matrix.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(MdamError::dim("max_rows", t.shape(), &[]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut winners = vec![0; cols];
        let mut out = t.row(0).to_vec();
        for r in 1..rows {
            for (j, &v) in t.row(r).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    winners[j] = r;
                }
            }
        }
        let t = Tensor::new(vec![cols], out)?;
        Ok(self.push(t, Op::MaxRows { x, winners }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(MdamError::dim("transpose", t.shape(), &[]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = t.data()[r * cols + c];
            }
        }
        let t = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(t, Op::Transpose { a, rows, cols }))
    }

    /// Scales row `i` of `m` by `w[i]`.
    pub fn mul_rows(&mut self, m: Var, w: Var) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 || self.shape(w) != [t.shape()[0]] {
            return Err(MdamError::dim("mul_rows", t.shape(), self.shape(w)));
        }
        let d = t.shape()[1];
        let wv = self.value(w).data();
        let data = t
            .data()
            .chunks(d)
            .zip(wv)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRows { m, w }))
    }

    /// Scales row `i` of `x` by the constant `factors[i]`; used for masks.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != factors.len() {
            return Err(MdamError::dim("scale_rows", t.shape(), &[factors.len()]));
        }
        let d = t.last_dim();
        let data = t
            .data()
            .chunks(d)
            .zip(factors)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows { x, factors: factors.to_vec() }))
    }

    /// Extracts sliding windows of `width` consecutive rows starting at each
    /// of `starts`, flattening every window into one output row.
    pub fn unfold(&mut self, x: Var, width: usize, starts: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || width == 0 {
            return Err(MdamError::dim("unfold", t.shape(), &[width]));
        }
        if starts.is_empty() {
            return Err(MdamError::EmptySequence("unfold without windows".into()));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(starts.len() * width * d);
        for &s in starts {
            if s + width > rows {
                return Err(MdamError::Index { what: "window start", index: s, size: rows });
            }
            out.extend_from_slice(&t.data()[s * d..(s + width) * d]);
        }
        let t = Tensor::new(vec![starts.len(), width * d], out)?;
        Ok(self.push(t, Op::Unfold { x, width, starts: starts.to_vec() }))
    }

    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(MdamError::dim("slice_row", t.shape(), &[row]));
        }
        if row >= t.shape()[0] {
            return Err(MdamError::Index { what: "row", index: row, size: t.shape()[0] });
        }
        let t = Tensor::vector(t.row(row).to_vec())?;
        Ok(self.push(t, Op::SliceRow { x, row }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `-ln(max(p[target], clamp))` for a probability vector.
    pub fn neg_log_pick(&mut self, p: Var, target: usize, clamp: f64) -> Result<Var> {
        let t = self.value(p);
        if t.rank() != 1 {
            return Err(MdamError::dim("neg_log_pick", t.shape(), &[]));
        }
        if target >= t.len() {
            return Err(MdamError::Index { what: "class", index: target, size: t.len() });
        }
        let v = -t.data()[target].max(clamp).ln();
        Ok(self.push(Tensor::scalar(v), Op::NegLogPick { p, target, clamp }))
    }

    /// Categorical hinge `max(0, 1 + max_{i≠y} s_i − s_y)`.
    pub fn categorical_hinge(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 || t.len() < 2 {
            return Err(MdamError::dim("categorical_hinge", t.shape(), &[]));
        }
        if target >= t.len() {
            return Err(MdamError::Index { what: "class", index: target, size: t.len() });
        }
        let s = t.data();
        let rival = (0..s.len())
            .filter(|&i| i != target)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if s[b] >= s[i] => Some(b),
                _ => Some(i),
            })
            .unwrap();
        let margin = 1.0 + s[rival] - s[target];
        let active = margin > 0.0;
        let v = margin.max(0.0);
        Ok(self.push(Tensor::scalar(v), Op::Hinge { logits, target, rival, active }))
    }

    // ── reverse sweep ──────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) into every node that requires gradients.
    /// A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(MdamError::State("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(MdamError::Rank(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match self.fault {
                Some((kind, factor)) if self.nodes[i].op.kind() == kind => {
                    let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    self.propagate(i, &scaled, &mut grads);
                }
                _ => self.propagate(i, &g, &mut grads),
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Returns the accumulation buffer of `v`, allocating zeros on first use.
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let da = buf(grads, nodes, *a);
                    gemm_into(g, false, val(*b), true, da, m, n, k, 1.0);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let a_val = val(*a).to_vec();
                    let db = buf(grads, nodes, *b);
                    gemm_into(&a_val, true, g, false, db, k, m, n, 1.0);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let d = buf(grads, nodes, v);
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let d = buf(grads, nodes, v);
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).to_vec();
                    let d = buf(grads, nodes, *a);
                    for j in 0..d.len() {
                        d[j] += g[j] * other[j];
                    }
                }
                if wants(*b) {
                    let other = val(*a).to_vec();
                    let d = buf(grads, nodes, *b);
                    for j in 0..d.len() {
                        d[j] += g[j] * other[j];
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if wants(*a) {
                    let d = buf(grads, nodes, *a);
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(*bias) {
                    let d = buf(grads, nodes, *bias);
                    let w = d.len();
                    for row in g.chunks(w) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale { a, factor } => {
                let d = buf(grads, nodes, *a);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
            }
            Op::Tanh(a) => {
                let d = buf(grads, nodes, *a);
                for j in 0..d.len() {
                    d[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }
            Op::Relu(a) => {
                let x = val(*a).to_vec();
                let d = buf(grads, nodes, *a);
                for j in 0..d.len() {
                    if x[j] > 0.0 {
                        d[j] += g[j];
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let d = buf(grads, nodes, *x);
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gamma = val(*gain).to_vec();
                if wants(*gain) {
                    let dg = buf(grads, nodes, *gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = buf(grads, nodes, *bias);
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
                if wants(*x) {
                    let dx = buf(grads, nodes, *x);
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gamma[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let inv = inv_std[r];
                        for j in 0..d {
                            dx[r * d + j] += inv * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if wants(p) {
                        let d = buf(grads, nodes, p);
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let w = node.value.last_dim();
                for (r, &p) in parts.iter().enumerate() {
                    if wants(p) {
                        let d = buf(grads, nodes, p);
                        d.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let w = node.value.last_dim();
                let d = buf(grads, nodes, *table);
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..w {
                        d[idx * w + j] += g[r * w + j];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let d = buf(grads, nodes, *x);
                for j in 0..d.len() {
                    d[j] += g[j] * mask[j];
                }
            }
            Op::TileRows { x } => {
                let d = buf(grads, nodes, *x);
                let w = d.len();
                for row in g.chunks(w) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            Op::MaxRows { x, winners } => {
                let cols = winners.len();
                let d = buf(grads, nodes, *x);
                for (j, &r) in winners.iter().enumerate() {
                    d[r * cols + j] += g[j];
                }
            }
            Op::Sum(a) => {
                let d = buf(grads, nodes, *a);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let d = buf(grads, nodes, *a);
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
            Op::Transpose { a, rows, cols } => {
                let d = buf(grads, nodes, *a);
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::MulRows { m, w } => {
                let cols = node.value.last_dim();
                if wants(*m) {
                    let wv = val(*w).to_vec();
                    let d = buf(grads, nodes, *m);
                    for (r, s) in wv.iter().enumerate() {
                        for j in 0..cols {
                            d[r * cols + j] += g[r * cols + j] * s;
                        }
                    }
                }
                if wants(*w) {
                    let mv = val(*m).to_vec();
                    let d = buf(grads, nodes, *w);
                    for (r, dr) in d.iter_mut().enumerate() {
                        *dr += (0..cols).map(|j| g[r * cols + j] * mv[r * cols + j]).sum::<f64>();
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                let cols = node.value.last_dim();
                let d = buf(grads, nodes, *x);
                for (r, s) in factors.iter().enumerate() {
                    for j in 0..cols {
                        d[r * cols + j] += g[r * cols + j] * s;
                    }
                }
            }
            Op::Unfold { x, width, starts } => {
                let span = node.value.last_dim();
                let d = buf(grads, nodes, *x);
                let row_w = span / width;
                for (r, &s) in starts.iter().enumerate() {
                    let dst = &mut d[s * row_w..s * row_w + span];
                    dst.iter_mut()
                        .zip(&g[r * span..(r + 1) * span])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceRow { x, row } => {
                let w = g.len();
                let d = buf(grads, nodes, *x);
                d[row * w..(row + 1) * w].iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Reshape(x) => {
                let d = buf(grads, nodes, *x);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::NegLogPick { p, target, clamp } => {
                let pv = val(*p)[*target];
                if pv > *clamp {
                    let d = buf(grads, nodes, *p);
                    d[*target] -= g[0] / pv;
                }
            }
            Op::Hinge { logits, target, rival, active } => {
                if *active {
                    let d = buf(grads, nodes, *logits);
                    d[*rival] += g[0];
                    d[*target] -= g[0];
                }
            }
        }
    }
}

/// Convenience: builds `x · W + b` for a row vector or a matrix of rows.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}
