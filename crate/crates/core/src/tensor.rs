//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape is rebuilt for every forward pass. Each recorded node stores the
//! operation kind, the ids of its inputs, and whatever values the backward
//! rule needs. `Tape::backward` walks the records in reverse, visiting each
//! node exactly once and accumulating gradients only along paths that reach
//! a gradient-requiring leaf.

use crate::{CoreError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major f64 tensor. Rank 0 is represented as shape `[1]` by the
/// scalar constructor; vectors are `[n]`, matrices `[m, n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x], requires_grad: false }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data, requires_grad: false }
    }

    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(CoreError::Shape("ragged rows in matrix".into()));
        }
        Ok(Self {
            shape: vec![m, n],
            data: rows.iter().flatten().copied().collect(),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false }
    }

    /// Normal(mean, std^2) entries from a seeded rng.
    pub fn randn(shape: Vec<usize>, mean: f64, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(mean, std.max(0.0)).expect("valid normal");
        let data = (0..numel).map(|_| rng.sample(dist)).collect();
        Self { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatVec { m: usize, v: usize },
    Add { a: usize, b: usize },
    AddRowBroadcast { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalarVar { a: usize, s: usize },
    DivElem { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MeanRows { a: usize },
    Dot { a: usize, b: usize },
    Sqrt { a: usize },
    Ln { a: usize },
    Elu { a: usize },
    Sigmoid { a: usize },
    Softplus { a: usize },
    SoftmaxVec { a: usize },
    LogSoftmaxRows { a: usize },
    NllPick { log_probs: usize, labels: Vec<usize> },
    DropoutMask { a: usize, mask: Vec<f64> },
    GatherRows { a: usize, ids: Vec<usize> },
    StackRows { parts: Vec<usize> },
    ConcatVec { parts: Vec<usize> },
    Slice { a: usize, start: usize, len: usize },
    WeightedSumRows { a: usize, w: usize },
    RowsTripleDot { a: usize, b: usize, q: usize },
    CosinePair { u: usize, v: usize },
    LayerNormVec { a: usize, eps: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of primitive ops for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf value. Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(CoreError::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * tb.data[p * n + j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, Tensor { shape: vec![m, n], data: out, requires_grad: false }, needs))
    }

    /// `[r,c] x [c] -> [r]`
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape.len() != 2 || tv.shape.len() != 1 || tm.shape[1] != tv.shape[0] {
            return Err(CoreError::Shape(format!(
                "matvec {:?} x {:?}",
                tm.shape, tv.shape
            )));
        }
        let (r, c) = (tm.shape[0], tm.shape[1]);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let row = &tm.data[i * c..(i + 1) * c];
                row.iter().zip(&tv.data).map(|(w, x)| w * x).sum()
            })
            .collect();
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Op::MatVec { m: m.0, v: v.0 }, Tensor::vector(out), needs))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(CoreError::Shape(format!(
                "{name} shape mismatch {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, Tensor { shape, data, requires_grad: false }, needs))
    }

    /// `[m,n] + [n]`, bias added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 1 || ta.shape[1] != tb.shape[0] {
            return Err(CoreError::Shape(format!(
                "row broadcast {:?} + {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = ta.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data[j];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::AddRowBroadcast { a: a.0, b: b.0 }, Tensor { shape: vec![m, n], data, requires_grad: false }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, Tensor { shape, data, requires_grad: false }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, Tensor { shape, data, requires_grad: false }, needs))
    }

    /// Tensor times a scalar tape value.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(CoreError::Shape("mul_scalar_var: s must be scalar".into()));
        }
        let sv = self.value(s).item();
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * sv).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Op::MulScalarVar { a: a.0, s: s.0 }, Tensor { shape, data, requires_grad: false }, needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div")?;
        let data: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x / y).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::DivElem { a: a.0, b: b.0 }, Tensor { shape, data, requires_grad: false }, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::Scale { a: a.0, c }, Tensor { shape, data, requires_grad: false }, needs)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x + c).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::AddConst { a: a.0 }, Tensor { shape, data, requires_grad: false }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Mean { a: a.0 }, Tensor::scalar(s / n), needs)
    }

    /// `[m,n] -> [n]`, column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 || ta.shape[0] == 0 {
            return Err(CoreError::Shape(format!("mean_rows on {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += ta.data[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(Op::MeanRows { a: a.0 }, Tensor::vector(out), needs))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "dot")?;
        let s: f64 = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Dot { a: a.0, b: b.0 }, Tensor::scalar(s), needs))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.sqrt()).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::Sqrt { a: a.0 }, Tensor { shape, data, requires_grad: false }, needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::Ln { a: a.0 }, Tensor { shape, data, requires_grad: false }, needs)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::Elu { a: a.0 }, Tensor { shape, data, requires_grad: false }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::Sigmoid { a: a.0 }, Tensor { shape, data, requires_grad: false }, needs)
    }

    /// `ln(1 + e^x)` computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|&x| softplus_scalar(x)).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::Softplus { a: a.0 }, Tensor { shape, data, requires_grad: false }, needs)
    }

    /// Softmax over a vector.
    pub fn softmax_vec(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 1 {
            return Err(CoreError::Shape(format!("softmax_vec on {:?}", ta.shape)));
        }
        let out = softmax_slice(&ta.data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxVec { a: a.0 }, Tensor::vector(out), needs))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(CoreError::Shape(format!("log_softmax_rows on {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if n == 0 {
            return Err(CoreError::EmptySoftmax);
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let needs = self.needs(a);
        Ok(self.push(Op::LogSoftmaxRows { a: a.0 }, Tensor { shape: vec![m, n], data, requires_grad: false }, needs))
    }

    /// Mean negative picked log-probability: `-(1/B) sum_b lp[b, labels[b]]`.
    /// Rows must already be log-distributions.
    pub fn nll_pick(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(log_probs);
        if t.shape.len() != 2 {
            return Err(CoreError::Shape(format!("nll on {:?}", t.shape)));
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        if labels.len() != m {
            return Err(CoreError::Shape(format!(
                "nll: {} labels for {} rows",
                labels.len(),
                m
            )));
        }
        for &l in labels {
            if l >= n {
                return Err(CoreError::LabelOutOfRange { label: l, classes: n });
            }
        }
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            if lse.abs() > 1e-3 {
                return Err(CoreError::InvalidValue(format!(
                    "nll row {i} is not a log-distribution (logsumexp = {lse:.3e})"
                )));
            }
        }
        let s: f64 = labels.iter().enumerate().map(|(i, &l)| t.data[i * n + l]).sum();
        let needs = self.needs(log_probs);
        Ok(self.push(
            Op::NllPick { log_probs: log_probs.0, labels: labels.to_vec() },
            Tensor::scalar(-s / m as f64),
            needs,
        ))
    }

    /// Apply a precomputed dropout mask (entries are 0 or the keep scale).
    fn dropout_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(Op::DropoutMask { a: a.0, mask }, Tensor { shape, data, requires_grad: false }, needs)
    }

    /// Select rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(CoreError::Shape(format!("gather_rows on {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(CoreError::Shape(format!("gather_rows: row {bad} out of {m}")));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&ta.data[i * n..(i + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows { a: a.0, ids: ids.to_vec() },
            Tensor { shape: vec![ids.len(), n], data, requires_grad: false },
            needs,
        ))
    }

    /// Stack k same-length vectors into a `[k,n]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Shape("stack_rows of nothing".into()));
        }
        let n = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * n);
        let mut needs = false;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape.len() != 1 || tp.numel() != n {
                return Err(CoreError::Shape("stack_rows: ragged parts".into()));
            }
            data.extend_from_slice(&tp.data);
            needs |= self.needs(p);
        }
        Ok(self.push(
            Op::StackRows { parts: parts.iter().map(|v| v.0).collect() },
            Tensor { shape: vec![parts.len(), n], data, requires_grad: false },
            needs,
        ))
    }

    /// Concatenate vectors end to end.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Shape("concat of nothing".into()));
        }
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
            needs |= self.needs(p);
        }
        Ok(self.push(
            Op::ConcatVec { parts: parts.iter().map(|v| v.0).collect() },
            Tensor::vector(data),
            needs,
        ))
    }

    /// Contiguous slice of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 1 || start + len > ta.numel() {
            return Err(CoreError::Shape(format!(
                "slice [{start}, {start}+{len}) of {:?}",
                ta.shape
            )));
        }
        let data = ta.data[start..start + len].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Slice { a: a.0, start, len }, Tensor::vector(data), needs))
    }

    /// `sum_i w[i] * a[i,:]` for `a: [m,n]`, `w: [m]`.
    pub fn weighted_sum_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if ta.shape.len() != 2 || tw.shape.len() != 1 || ta.shape[0] != tw.shape[0] {
            return Err(CoreError::Shape(format!(
                "weighted_sum_rows {:?} with {:?}",
                ta.shape, tw.shape
            )));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            let wi = tw.data[i];
            for j in 0..n {
                out[j] += wi * ta.data[i * n + j];
            }
        }
        let needs = self.needs(a) || self.needs(w);
        Ok(self.push(Op::WeightedSumRows { a: a.0, w: w.0 }, Tensor::vector(out), needs))
    }

    /// `out[i] = sum_k a[i,k] * b[i,k] * q[k]` for `a, b: [m,k]`, `q: [k]`.
    pub fn rows_triple_dot(&mut self, a: Var, b: Var, q: Var) -> Result<Var> {
        let (ta, tb, tq) = (self.value(a), self.value(b), self.value(q));
        if ta.shape != tb.shape || ta.shape.len() != 2 || tq.shape.len() != 1 || ta.shape[1] != tq.shape[0] {
            return Err(CoreError::Shape(format!(
                "rows_triple_dot {:?}, {:?}, {:?}",
                ta.shape, tb.shape, tq.shape
            )));
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let out: Vec<f64> = (0..m)
            .map(|i| {
                (0..k)
                    .map(|j| ta.data[i * k + j] * tb.data[i * k + j] * tq.data[j])
                    .sum()
            })
            .collect();
        let needs = self.needs(a) || self.needs(b) || self.needs(q);
        Ok(self.push(Op::RowsTripleDot { a: a.0, b: b.0, q: q.0 }, Tensor::vector(out), needs))
    }

    /// Cosine similarity of two vectors as a differentiable scalar.
    /// Returns 0 with zero gradient when either norm is 0.
    pub fn cosine_pair(&mut self, u: Var, v: Var) -> Result<Var> {
        self.binary_same_shape(u, v, "cosine_pair")?;
        let (tu, tv) = (self.value(u), self.value(v));
        let c = cosine_slices(&tu.data, &tv.data);
        let needs = self.needs(u) || self.needs(v);
        Ok(self.push(Op::CosinePair { u: u.0, v: v.0 }, Tensor::scalar(c), needs))
    }

    /// Normalize a vector to zero mean, unit variance (no affine part).
    pub fn layer_norm_vec(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 1 || ta.numel() == 0 {
            return Err(CoreError::Shape(format!("layer_norm on {:?}", ta.shape)));
        }
        let n = ta.numel() as f64;
        let mu = ta.data.iter().sum::<f64>() / n;
        let var = ta.data.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        let data: Vec<f64> = ta.data.iter().map(|x| (x - mu) / denom).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::LayerNormVec { a: a.0, eps }, Tensor::vector(data), needs))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.0 >= self.nodes.len() {
            return Err(CoreError::InvalidValue(format!(
                "loss var {} not on tape of {} nodes",
                loss.0,
                self.nodes.len()
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::Shape("backward from non-scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn acc_into(&self, grads: &mut [Option<Vec<f64>>], target: usize, add: impl Fn(&mut [f64])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target].value.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                self.acc_into(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.data[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                });
            }
            Op::MatVec { m, v } => {
                let tm = &self.nodes[*m].value;
                let tv = &self.nodes[*v].value;
                let (r, c) = (tm.shape[0], tm.shape[1]);
                self.acc_into(grads, *m, |gm| {
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += g[i] * tv.data[j];
                        }
                    }
                });
                self.acc_into(grads, *v, |gv| {
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += tm.data[i * c + j] * g[i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc_into(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_into(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRowBroadcast { a, b } => {
                let n = self.nodes[*b].value.numel();
                let m = self.nodes[*a].value.shape[0];
                self.acc_into(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_into(grads, *b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Sub { a, b } => {
                self.acc_into(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_into(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * tb.data[i];
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for (i, x) in gb.iter_mut().enumerate() {
                        *x += g[i] * ta.data[i];
                    }
                });
            }
            Op::MulScalarVar { a, s } => {
                let ta = &self.nodes[*a].value;
                let sv = self.nodes[*s].value.item();
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * sv;
                    }
                });
                self.acc_into(grads, *s, |gs| {
                    gs[0] += g.iter().zip(&ta.data).map(|(gi, ai)| gi * ai).sum::<f64>();
                });
            }
            Op::DivElem { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / tb.data[i];
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for (i, x) in gb.iter_mut().enumerate() {
                        *x -= g[i] * ta.data[i] / (tb.data[i] * tb.data[i]);
                    }
                });
            }
            Op::Scale { a, c } => {
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * c;
                    }
                });
            }
            Op::AddConst { a } => {
                self.acc_into(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sum { a } => {
                self.acc_into(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.numel() as f64;
                self.acc_into(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MeanRows { a } => {
                let ta = &self.nodes[*a].value;
                let (m, n) = (ta.shape[0], ta.shape[1]);
                self.acc_into(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::Dot { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[0] * tb.data[i];
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for (i, x) in gb.iter_mut().enumerate() {
                        *x += g[0] * ta.data[i];
                    }
                });
            }
            Op::Sqrt { a } => {
                let out = &self.nodes[idx].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / (2.0 * out.data[i]);
                    }
                });
            }
            Op::Ln { a } => {
                let ta = &self.nodes[*a].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / ta.data[i];
                    }
                });
            }
            Op::Elu { a } => {
                let ta = &self.nodes[*a].value;
                let out = &self.nodes[idx].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        let d = if ta.data[i] > 0.0 { 1.0 } else { out.data[i] + 1.0 };
                        *x += g[i] * d;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = &self.nodes[idx].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * out.data[i] * (1.0 - out.data[i]);
                    }
                });
            }
            Op::Softplus { a } => {
                let ta = &self.nodes[*a].value;
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * sigmoid_scalar(ta.data[i]);
                    }
                });
            }
            Op::SoftmaxVec { a } => {
                let y = &self.nodes[idx].value;
                let gy: f64 = g.iter().zip(&y.data).map(|(gi, yi)| gi * yi).sum();
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += y.data[i] * (g[i] - gy);
                    }
                });
            }
            Op::LogSoftmaxRows { a } => {
                let out = &self.nodes[idx].value;
                let (m, n) = (out.shape[0], out.shape[1]);
                self.acc_into(grads, *a, |ga| {
                    for i in 0..m {
                        let gsum: f64 = g[i * n..(i + 1) * n].iter().sum();
                        for j in 0..n {
                            let sm = out.data[i * n + j].exp();
                            ga[i * n + j] += g[i * n + j] - sm * gsum;
                        }
                    }
                });
            }
            Op::NllPick { log_probs, labels } => {
                let m = labels.len() as f64;
                let n = self.nodes[*log_probs].value.shape[1];
                self.acc_into(grads, *log_probs, |glp| {
                    for (i, &l) in labels.iter().enumerate() {
                        glp[i * n + l] -= g[0] / m;
                    }
                });
            }
            Op::DropoutMask { a, mask } => {
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * mask[i];
                    }
                });
            }
            Op::GatherRows { a, ids } => {
                let n = self.nodes[*a].value.shape[1];
                self.acc_into(grads, *a, |ga| {
                    for (row, &src) in ids.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += g[row * n + j];
                        }
                    }
                });
            }
            Op::StackRows { parts } => {
                let n = if parts.is_empty() { 0 } else { self.nodes[parts[0]].value.numel() };
                for (row, &p) in parts.iter().enumerate() {
                    self.acc_into(grads, p, |gp| {
                        for j in 0..n {
                            gp[j] += g[row * n + j];
                        }
                    });
                }
            }
            Op::ConcatVec { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    self.acc_into(grads, p, |gp| {
                        for j in 0..len {
                            gp[j] += g[offset + j];
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, start, len } => {
                self.acc_into(grads, *a, |ga| {
                    for j in 0..*len {
                        ga[start + j] += g[j];
                    }
                });
            }
            Op::WeightedSumRows { a, w } => {
                let ta = &self.nodes[*a].value;
                let tw = &self.nodes[*w].value;
                let (m, n) = (ta.shape[0], ta.shape[1]);
                self.acc_into(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += tw.data[i] * g[j];
                        }
                    }
                });
                self.acc_into(grads, *w, |gw| {
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += ta.data[i * n + j] * g[j];
                        }
                        gw[i] += s;
                    }
                });
            }
            Op::RowsTripleDot { a, b, q } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let tq = &self.nodes[*q].value;
                let (m, k) = (ta.shape[0], ta.shape[1]);
                self.acc_into(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] += g[i] * tb.data[i * k + j] * tq.data[j];
                        }
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for i in 0..m {
                        for j in 0..k {
                            gb[i * k + j] += g[i] * ta.data[i * k + j] * tq.data[j];
                        }
                    }
                });
                self.acc_into(grads, *q, |gq| {
                    for i in 0..m {
                        for j in 0..k {
                            gq[j] += g[i] * ta.data[i * k + j] * tb.data[i * k + j];
                        }
                    }
                });
            }
            Op::CosinePair { u, v } => {
                let tu = &self.nodes[*u].value;
                let tv = &self.nodes[*v].value;
                let nu = norm(&tu.data);
                let nv = norm(&tv.data);
                if nu == 0.0 || nv == 0.0 {
                    return; // value pinned to 0, gradient defined as 0
                }
                let c = self.nodes[idx].value.item();
                self.acc_into(grads, *u, |gu| {
                    for (i, x) in gu.iter_mut().enumerate() {
                        *x += g[0] * (tv.data[i] / (nu * nv) - c * tu.data[i] / (nu * nu));
                    }
                });
                self.acc_into(grads, *v, |gv| {
                    for (i, x) in gv.iter_mut().enumerate() {
                        *x += g[0] * (tu.data[i] / (nu * nv) - c * tv.data[i] / (nv * nv));
                    }
                });
            }
            Op::LayerNormVec { a, eps } => {
                let ta = &self.nodes[*a].value;
                let n = ta.numel() as f64;
                let mu = ta.data.iter().sum::<f64>() / n;
                let var = ta.data.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
                let denom = (var + eps).sqrt();
                let gsum: f64 = g.iter().sum();
                let gxhat: f64 = g
                    .iter()
                    .zip(&ta.data)
                    .map(|(gi, xi)| gi * (xi - mu) / denom)
                    .sum();
                self.acc_into(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        let xhat = (ta.data[i] - mu) / denom;
                        *x += (g[i] - gsum / n - xhat * gxhat / n) / denom;
                    }
                });
            }
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(CoreError::EmptySoftmax);
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Mean NLL over rows of already-log-normalized probabilities.
pub fn nll_loss(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    let loss = tape.nll_pick(lp, labels)?;
    Ok(tape.value(loss).item())
}

/// Dropout as an op on the tape. In eval mode or at `p = 0` the input var is
/// returned unchanged. Training mode zeroes each element with probability
/// `p` and scales survivors by `1/(1-p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(CoreError::InvalidValue(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..tape.value(x).numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(tape.dropout_mask(x, mask))
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine of two slices, 0 when either norm is 0.
pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry() {
        let y = softmax_slice(&[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let y = softmax_slice(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
            assert!(v.is_finite());
        }
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        // Straight-line evaluation of exp(x_i - max) / sum.
        let x = [1.0, 2.0, 3.0];
        let denom: f64 = x.iter().map(|v| (v - 3.0f64).exp()).sum();
        let expected: Vec<f64> = x.iter().map(|v| (v - 3.0f64).exp() / denom).collect();
        let y = softmax_slice(&x).unwrap();
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_empty_errors() {
        let err = softmax_slice(&[]).unwrap_err();
        assert!(err.to_string().contains("empty softmax"));
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = [0.3, -1.2, 2.2, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 17.5).collect();
        let a = softmax_slice(&x).unwrap();
        let b = softmax_slice(&shifted).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_one_hot_ish_row() {
        let lp = Tensor::matrix(&[vec![0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()]]).unwrap();
        let loss = nll_loss(&lp, &[0]).unwrap();
        assert!((loss - (-(0.9f64.ln()))).abs() < 1e-12);
        assert!((loss - 0.105_360_515_657_826).abs() < 1e-10);
    }

    #[test]
    fn nll_uniform_three_class() {
        let row = vec![(1.0f64 / 3.0).ln(); 3];
        let lp = Tensor::matrix(&[row.clone()]).unwrap();
        for label in 0..3 {
            let loss = nll_loss(&lp, &[label]).unwrap();
            assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_mean_over_identical_rows() {
        let row = vec![0.7f64.ln(), 0.3f64.ln()];
        let one = nll_loss(&Tensor::matrix(&[row.clone()]).unwrap(), &[1]).unwrap();
        let two = nll_loss(&Tensor::matrix(&[row.clone(), row]).unwrap(), &[1, 1]).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn nll_label_out_of_range() {
        let lp = Tensor::matrix(&[vec![(0.5f64).ln(), (0.5f64).ln()]]).unwrap();
        assert!(matches!(
            nll_loss(&lp, &[2]),
            Err(CoreError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn nll_rejects_raw_probabilities() {
        let lp = Tensor::matrix(&[vec![0.9, 0.05, 0.05]]).unwrap();
        assert!(nll_loss(&lp, &[0]).is_err());
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_off_tape_loss() {
        let tape = Tape::new();
        assert!(tape.backward(Var(3)).is_err());
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let w = tape.leaf(Tensor::randn(vec![4, 4], 0.0, 1.0, &mut rng).with_grad());
            let x = tape.constant(Tensor::randn(vec![4, 4], 0.0, 1.0, &mut rng));
            let h = tape.matmul(w, x).unwrap();
            let h = tape.elu(h);
            let loss = tape.mean(h);
            let grads = tape.backward(loss).unwrap();
            grads.get(w).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "gradients must be bit-identical across reruns");
    }

    /// Central finite differences on every leaf entry; used throughout the
    /// crate's gradient tests. Stays independent of the backward pass.
    pub(crate) fn finite_diff_check<F>(build: F, n_params: usize, tol: f64)
    where
        F: Fn(&mut Tape, &[f64]) -> (Var, Var), // returns (leaf, loss)
    {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let base: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let (leaf, loss) = build(&mut tape, &base);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaf).unwrap().to_vec();

        for i in 0..n_params {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let mut tp = Tape::new();
            let (_, lp) = build(&mut tp, &plus);
            let mut tm = Tape::new();
            let (_, lm) = build(&mut tm, &minus);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(
                rel < tol,
                "param {i}: analytic {} vs fd {} (rel {rel:.3e})",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn backward_softmax_linear_matches_finite_differences() {
        // 4x4 weight into softmax over the flattened output row.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(vec![4, 4], 0.0, 1.0, &mut rng);
            let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            finite_diff_check(
                |tape, params| {
                    let w = tape.leaf(Tensor::new(vec![4, 4], params.to_vec()).unwrap().with_grad());
                    let xc = tape.constant(x.clone());
                    let h = tape.matmul(w, xc).unwrap();
                    let h0 = tape.gather_rows(h, &[0]).unwrap();
                    let h0 = tape.mean_rows(h0).unwrap(); // row 0 as a vector
                    let sm = tape.softmax_vec(h0).unwrap();
                    let t = tape.constant(Tensor::vector(target.clone()));
                    let diff = tape.sub(sm, t).unwrap();
                    let sq = tape.mul(diff, diff).unwrap();
                    (w, tape.sum(sq))
                },
                16,
                1e-4,
            );
        }
    }

    #[test]
    fn backward_covers_shape_ops() {
        // slice/concat/stack/gather/weighted-sum/triple-dot composite.
        finite_diff_check(
            |tape, params| {
                let leaf = tape.leaf(Tensor::new(vec![12], params.to_vec()).unwrap().with_grad());
                let a = tape.slice(leaf, 0, 4).unwrap();
                let b = tape.slice(leaf, 4, 4).unwrap();
                let q = tape.slice(leaf, 8, 4).unwrap();
                let m1 = tape.stack_rows(&[a, b]).unwrap();
                let m2 = tape.stack_rows(&[b, q]).unwrap();
                let scores = tape.rows_triple_dot(m1, m2, q).unwrap();
                let w = tape.softmax_vec(scores).unwrap();
                let pooled = tape.weighted_sum_rows(m1, w).unwrap();
                let c = tape.concat_vec(&[pooled, w]).unwrap();
                let ln = tape.layer_norm_vec(c, 1e-5).unwrap();
                let sp = tape.softplus(ln);
                (leaf, tape.mean(sp))
            },
            12,
            1e-4,
        );
    }

    #[test]
    fn backward_cosine_matches_finite_differences() {
        finite_diff_check(
            |tape, params| {
                let leaf = tape.leaf(Tensor::new(vec![6], params.to_vec()).unwrap().with_grad());
                let u = tape.slice(leaf, 0, 3).unwrap();
                let v = tape.slice(leaf, 3, 3).unwrap();
                let c = tape.cosine_pair(u, v).unwrap();
                let c2 = tape.mul(c, c).unwrap();
                (leaf, tape.sum(c2))
            },
            6,
            1e-4,
        );
    }

    #[test]
    fn backward_unary_chain_matches_finite_differences() {
        finite_diff_check(
            |tape, params| {
                let leaf = tape.leaf(Tensor::new(vec![5], params.to_vec()).unwrap().with_grad());
                let s = tape.sigmoid(leaf);
                let s = tape.add_const(s, 1.0);
                let l = tape.ln(s);
                let sq = tape.mul(l, l).unwrap();
                let r = tape.sqrt(sq);
                let e = tape.elu(r);
                (leaf, tape.mean(e))
            },
            5,
            1e-4,
        );
    }

    #[test]
    fn backward_log_softmax_nll_matches_finite_differences() {
        finite_diff_check(
            |tape, params| {
                let leaf = tape.leaf(Tensor::new(vec![2, 3], params.to_vec()).unwrap().with_grad());
                let lp = tape.log_softmax_rows(leaf).unwrap();
                let loss = tape.nll_pick(lp, &[2, 0]).unwrap();
                (leaf, loss)
            },
            6,
            1e-4,
        );
    }

    #[test]
    fn cosine_zero_norm_convention() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![0.0, 0.0]).with_grad());
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.cosine_pair(u, v).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        let grads = tape.backward(c).unwrap();
        // zero-norm convention: no gradient flows into either input
        let gu = grads.get(u);
        assert!(gu.is_none() || gu.unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let same = dropout(&mut tape, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(same, x);
        let same = dropout(&mut tape, x, 0.2, false, &mut rng).unwrap();
        assert_eq!(same, x);
        assert!(dropout(&mut tape, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_empirical_rate_and_scaling() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], vec![1.0; n]).unwrap());
        let y = dropout(&mut tape, x, 0.5, true, &mut rng).unwrap();
        let out = tape.value(y).data();
        let dropped = out.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.5).abs() < 0.01, "empirical drop rate {dropped}");
        for v in out.iter().filter(|v| **v != 0.0) {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_seeded_reproducible() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![64], vec![1.0; 64]).unwrap());
            let y = dropout(&mut tape, x, 0.3, true, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
