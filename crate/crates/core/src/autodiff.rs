//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! Every operation appends a node to a [`Tape`]; node inputs always precede
//! the node itself, so the tape order is a topological order and the
//! backward sweep simply walks it in reverse. Only the operations needed by
//! the graph attention classifier are provided.
//!
//! ```
//! use multiatlas::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::parameter(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let loss = tape.sum(w);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} cannot hold shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} needs a 2-D operand, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape was already consumed by a backward pass; re-run the forward pass")]
    StaleTape,
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("concat of zero tensors")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array. Vectors are 1-D, matrices 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A tensor whose gradient is collected on backward.
    pub fn parameter(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Compressed row lists of allowed `(row, column)` pairs.
///
/// Used as the softmax mask and as the sparsity pattern of attention
/// aggregation: edge `e` in row `i` connects `i` to `indices[e]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighborhood {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        offsets.push(0);
        for list in lists {
            indices.extend_from_slice(list);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    /// Every row may attend to every column.
    pub fn complete(n: usize) -> Self {
        let lists: Vec<Vec<usize>> = (0..n).map(|_| (0..n).collect()).collect();
        Self::from_lists(&lists)
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Edge index range of row `i`.
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn max_column(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    SoftmaxRows(Var),
    MaskedSoftmax(Var, Arc<Neighborhood>),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, Vec<f64>),
    AttentionLogits(Var, Var, Arc<Neighborhood>),
    Aggregate(Var, Var, Arc<Neighborhood>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            needs,
        )
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> Var {
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            needs,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul")?;
        let (k2, n) = self.value(b).matrix_dims("matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.output(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.output(shape, out, Op::Add(a, b), needs))
    }

    /// Adds a `1 × c` (or length-`c`) row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("add_row")?;
        if self.value(row).len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: self.shape(row).to_vec(),
            });
        }
        let bias = self.data(row);
        let out = self
            .data(a)
            .chunks_exact(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.output(vec![r, c], out, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.unary(a, out, Op::Scale(a, s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.output(shape, out, Op::Mul(a, b), needs))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        self.unary(a, out, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.exp()).collect();
        self.unary(a, out, Op::Exp(a))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.max(LOG_FLOOR).ln()).collect();
        self.unary(a, out, Op::Log(a))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let (rows, _) = self.value(first).matrix_dims("concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims("concat")?;
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.output(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Column means of an `r × c` matrix, as a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.data(a).chunks_exact(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let needs = self.needs(a);
        Ok(self.output(vec![1, c], out, Op::MeanRows(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.output(vec![1], vec![total], Op::Sum(a), needs)
    }

    /// Row-wise softmax of a matrix, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.value(a).matrix_dims("softmax")?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.unary(a, out, Op::SoftmaxRows(a)))
    }

    /// Softmax of edge scores within each row of `mask`.
    ///
    /// `scores` holds one value per edge of `mask` in row order; entries
    /// outside the mask do not exist and so receive neither probability
    /// mass nor gradient.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Arc<Neighborhood>) -> Result<Var> {
        if self.value(scores).len() != mask.edge_count() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(scores).to_vec(),
                rhs: vec![mask.edge_count()],
            });
        }
        let mut out = self.data(scores).to_vec();
        for i in 0..mask.node_count() {
            softmax_in_place(&mut out[mask.row_range(i)]);
        }
        Ok(self.unary(scores, out, Op::MaskedSoftmax(scores, Arc::clone(mask))))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    ///
    /// Returns `a` unchanged when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::BadDropoutRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        // a unit is dropped when its 32-bit draw falls below rate · 2^32
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mut draws = vec![0u32; self.value(a).len()];
        rng.fill(&mut draws[..]);
        let mask: Vec<f64> = draws
            .iter()
            .map(|&u| f64::from(u8::from(u64::from(u) >= threshold)) * keep)
            .collect();
        let out = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        // the mask is only needed to route gradients
        let mask = if self.needs(a) { mask } else { Vec::new() };
        Ok(self.unary(a, out, Op::Dropout(a, mask)))
    }

    /// Mean over rows of `-Σ_c target · ln(max(p, LOG_FLOOR))`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let (r, _) = self.value(probs).matrix_dims("cross_entropy")?;
        if self.shape(probs) != targets.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let total: f64 = self
            .data(probs)
            .iter()
            .zip(targets.data())
            .map(|(p, t)| if *t == 0.0 { 0.0 } else { -t * p.max(LOG_FLOOR).ln() })
            .sum();
        let needs = self.needs(probs);
        Ok(self.output(
            vec![1],
            vec![total / r as f64],
            Op::CrossEntropy(probs, targets.data().to_vec()),
            needs,
        ))
    }

    /// Raw attention scores `a_src·wh_i + a_dst·wh_j` for every edge `(i, j)`.
    ///
    /// `wh` is `n × h`; `a` holds `2h` values, the first half applied to the
    /// receiving node and the second half to the neighbour.
    pub fn attention_logits(&mut self, wh: Var, a: Var, mask: &Arc<Neighborhood>) -> Result<Var> {
        let (n, h) = self.value(wh).matrix_dims("attention_logits")?;
        if self.value(a).len() != 2 * h || mask.node_count() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention_logits",
                lhs: vec![n, h],
                rhs: self.shape(a).to_vec(),
            });
        }
        if mask.max_column().is_some_and(|c| c >= n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention_logits",
                lhs: vec![n, h],
                rhs: vec![mask.max_column().unwrap_or(0) + 1],
            });
        }
        let (src, dst) = split_scores(self.data(wh), self.data(a), h);
        let mut out = Vec::with_capacity(mask.edge_count());
        for (i, s) in src.iter().enumerate() {
            out.extend(mask.row(i).iter().map(|&j| s + dst[j]));
        }
        let needs = self.needs(wh) || self.needs(a);
        let e = mask.edge_count();
        Ok(self.output(
            vec![e],
            out,
            Op::AttentionLogits(wh, a, Arc::clone(mask)),
            needs,
        ))
    }

    /// `out_i = Σ_{(i, j) ∈ mask} alpha_ij · h_j`.
    pub fn aggregate(&mut self, alpha: Var, mask: &Arc<Neighborhood>, h: Var) -> Result<Var> {
        let (n, d) = self.value(h).matrix_dims("aggregate")?;
        if self.value(alpha).len() != mask.edge_count()
            || mask.max_column().is_some_and(|c| c >= n)
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "aggregate",
                lhs: self.shape(alpha).to_vec(),
                rhs: vec![n, d],
            });
        }
        let rows = mask.node_count();
        let mut out = vec![0.0; rows * d];
        let (a, hv) = (self.data(alpha), self.data(h));
        for i in 0..rows {
            let dst = &mut out[i * d..(i + 1) * d];
            for e in mask.row_range(i) {
                let j = mask.indices[e];
                axpy(a[e], &hv[j * d..(j + 1) * d], dst);
            }
        }
        let needs = self.needs(alpha) || self.needs(h);
        Ok(self.output(
            vec![rows, d],
            out,
            Op::Aggregate(alpha, h, Arc::clone(mask)),
            needs,
        ))
    }

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient. A tape supports exactly one backward sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::StaleTape);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else {
                continue;
            };
            if let Op::Leaf = self.nodes[idx].op {
                if self.nodes[idx].value.requires_grad {
                    self.nodes[idx].value.grad = Some(g);
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let ga = self.slot(adj, *a);
                    gemm(m, n, k, g, false, self.data(*b), true, ga, 1.0);
                }
                if self.needs(*b) {
                    let gb = self.slot(adj, *b);
                    gemm(k, m, n, self.data(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        axpy(1.0, g, self.slot(adj, *v));
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    axpy(1.0, g, self.slot(adj, *a));
                }
                if self.needs(*row) {
                    let c = self.value(*row).len();
                    let gr = self.slot(adj, *row);
                    for chunk in g.chunks_exact(c) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Scale(a, s) => axpy(*s, g, self.slot(adj, *a)),
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.data(*b);
                    let ga = self.slot(adj, *a);
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(other) {
                        *o += gi * x;
                    }
                }
                if self.needs(*b) {
                    let other = self.data(*a);
                    let gb = self.slot(adj, *b);
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(other) {
                        *o += gi * x;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                let ga = self.slot(adj, *a);
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    // subgradient 1 at exactly zero
                    *o += if *xi >= 0.0 { *gi } else { slope * gi };
                }
            }
            Op::Exp(a) => {
                let ga = self.slot(adj, *a);
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let ga = self.slot(adj, *a);
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    if *xi > LOG_FLOOR {
                        *o += gi / xi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.needs(*p) {
                        let gp = self.slot(adj, *p);
                        for (dst, src) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            axpy(1.0, &src[offset..offset + w], dst);
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let r = self.shape(*a)[0];
                let c = g.len();
                let ga = self.slot(adj, *a);
                let inv = 1.0 / r as f64;
                for chunk in ga.chunks_exact_mut(c) {
                    axpy(inv, g, chunk);
                }
            }
            Op::Sum(a) => {
                let ga = self.slot(adj, *a);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.shape[1];
                let ga = self.slot(adj, *a);
                for ((o, gi), yi) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(y.chunks_exact(c))
                {
                    softmax_backward(o, gi, yi);
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                let ga = self.slot(adj, *a);
                for i in 0..mask.node_count() {
                    let r = mask.row_range(i);
                    softmax_backward(&mut ga[r.clone()], &g[r.clone()], &y[r]);
                }
            }
            Op::Dropout(a, mask) => {
                let ga = self.slot(adj, *a);
                for ((o, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }
            Op::CrossEntropy(p, targets) => {
                let r = self.shape(*p)[0] as f64;
                let probs = self.data(*p);
                let gp = self.slot(adj, *p);
                for ((o, t), pi) in gp.iter_mut().zip(targets).zip(probs) {
                    if *t != 0.0 && *pi > LOG_FLOOR {
                        *o -= g[0] * t / (pi * r);
                    }
                }
            }
            Op::AttentionLogits(wh, a, mask) => {
                let (n, h) = (self.shape(*wh)[0], self.shape(*wh)[1]);
                let mut g_src = vec![0.0; n];
                let mut g_dst = vec![0.0; n];
                for (i, gs) in g_src.iter_mut().enumerate() {
                    for e in mask.row_range(i) {
                        *gs += g[e];
                        g_dst[mask.indices[e]] += g[e];
                    }
                }
                let av = self.data(*a);
                let (a_src, a_dst) = av.split_at(h);
                if self.needs(*wh) {
                    let gw = self.slot(adj, *wh);
                    for i in 0..n {
                        let row = &mut gw[i * h..(i + 1) * h];
                        axpy(g_src[i], a_src, row);
                        axpy(g_dst[i], a_dst, row);
                    }
                }
                if self.needs(*a) {
                    let whv = self.data(*wh);
                    let ga = self.slot(adj, *a);
                    let (ga_src, ga_dst) = ga.split_at_mut(h);
                    for i in 0..n {
                        let row = &whv[i * h..(i + 1) * h];
                        axpy(g_src[i], row, ga_src);
                        axpy(g_dst[i], row, ga_dst);
                    }
                }
            }
            Op::Aggregate(alpha, h, mask) => {
                let d = self.shape(*h)[1];
                if self.needs(*alpha) {
                    let hv = self.data(*h);
                    let ga = self.slot(adj, *alpha);
                    for i in 0..mask.node_count() {
                        let gi = &g[i * d..(i + 1) * d];
                        for e in mask.row_range(i) {
                            let j = mask.indices[e];
                            ga[e] += dot(gi, &hv[j * d..(j + 1) * d]);
                        }
                    }
                }
                if self.needs(*h) {
                    let av = self.data(*alpha);
                    let gh = self.slot(adj, *h);
                    for i in 0..mask.node_count() {
                        let gi = &g[i * d..(i + 1) * d];
                        for e in mask.row_range(i) {
                            let j = mask.indices[e];
                            axpy(av[e], gi, &mut gh[j * d..(j + 1) * d]);
                        }
                    }
                }
            }
        }
    }

    /// The adjoint buffer of `v`, zero-initialised on first use.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let len = self.nodes[v.0].value.data.len();
        adj[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn split_scores(wh: &[f64], a: &[f64], h: usize) -> (Vec<f64>, Vec<f64>) {
    let (a_src, a_dst) = a.split_at(h);
    wh.chunks_exact(h)
        .map(|row| (dot(row, a_src), dot(row, a_dst)))
        .unzip()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn softmax_backward(out: &mut [f64], g: &[f64], y: &[f64]) {
    let inner = dot(g, y);
    for ((o, gi), yi) in out.iter_mut().zip(g).zip(y) {
        *o += yi * (gi - inner);
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is
/// `k × n`; `*_t` selects the transpose of a row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays
    // inside the three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
