//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tape::backward`] replays the record in reverse and accumulates exact
//! adjoints into a [`GradStore`] keyed by the parameters of a [`ParamSet`].
//!
//! Conventions, fixed here for the whole crate:
//! - tensors are 2-D row-major (vectors are 1×n or n×1),
//! - broadcasting is limited to bias-add (a 1×c row over the rows of an n×c
//!   matrix) plus the dedicated scalar-variable primitives,
//! - every primitive output is checked for NaN/Inf and reported as an error,
//! - `max_pool` ties break to the lowest row index,
//! - dropout masks carry inverted scaling (`1/(1-p)`), so inference needs no
//!   rescale.
//!
//! A tape may be walked backward once; a second `backward` call is a contract
//! error. One tape is built per training batch and discarded afterwards.

use std::collections::HashMap;

use crate::error::{KeatError, Result};
use crate::tensor::Tensor;

// ── Named parameters ─────────────────────────────────────────────────────────

pub type ParamId = usize;

/// Which entries of a parameter enter the L2 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularization {
    /// Biases and other unpenalized tensors.
    None,
    /// Whole tensor.
    Full,
    /// Embedding tables: reserved rows (UNK/PAD) stay unpenalized.
    SkipFirstRows(usize),
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
    reg: Regularization,
}

/// Ordered collection of named parameter tensors. Registration order is the
/// canonical order for gradients, optimizer state, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, reg: Regularization) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry { name: name.to_string(), tensor, reg });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn regularization(&self, id: ParamId) -> Regularization {
        self.entries[id].reg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (i, e.name.as_str(), &e.tensor))
    }

    /// Rounds every parameter to the nearest 32-bit float value. Checkpoints
    /// store 32-bit data, so snapping here makes a later save/load cycle
    /// reproduce the in-memory parameters bit for bit.
    pub fn snap_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Σθ² over the penalized entries of every parameter.
    pub fn squared_norm_regularized(&self) -> f64 {
        let mut total = 0.0;
        for e in &self.entries {
            match e.reg {
                Regularization::None => {}
                Regularization::Full => {
                    total += e.tensor.data().iter().map(|v| v * v).sum::<f64>();
                }
                Regularization::SkipFirstRows(k) => {
                    let cols = e.tensor.cols();
                    total += e.tensor.data()[k * cols..].iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        total
    }
}

/// One gradient tensor per parameter, in `ParamSet` order. Parameters never
/// touched during the forward pass hold zeros.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(set: &ParamSet) -> Self {
        let grads = set.entries.iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

// ── Tape nodes ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    AddScalarVar { a: usize, s: usize },
    MulScalarVar { a: usize, s: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Affine { a: usize, k: f64 },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Abs { a: usize },
    Softmax { a: usize, axis: usize },
    Concat { a: usize, b: usize, axis: usize },
    SliceRows { a: usize, start: usize },
    StackRows { parts: Vec<usize> },
    RepeatRows { a: usize },
    Transpose { a: usize },
    MaxPool { a: usize, argmax: Vec<usize> },
    MeanRows { a: usize },
    Normalize { a: usize },
    Sum { a: usize },
    Gather { table: usize, rows: Vec<usize> },
    ScaleRows { a: usize, w: usize },
    Dropout { a: usize, mask: Vec<f64> },
    ClampMin { a: usize, min: f64 },
    CrossEntropy { logits: usize, label: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of primitive applications; see module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vids: HashMap<ParamId, VarId>,
    consumed: bool,
}

// Raw matmul kernels shared by forward and backward.
fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// a · bᵀ
fn mm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += ad[i * k + p] * bd[j * k + p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// aᵀ · b
fn mm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        for i in 0..m {
            let apin = ad[p * m + i];
            if apin == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += apin * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a constant; no gradient is collected for it.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        VarId(self.nodes.len() - 1)
    }

    /// Record a parameter. Repeated calls for the same parameter on one tape
    /// return the same variable, so adjoints from every use accumulate.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vids.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: set.get(id).clone(), op: Op::Param(id) });
        let v = VarId(self.nodes.len() - 1);
        self.param_vids.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<VarId> {
        if !value.is_finite() {
            return Err(KeatError::NonFinite(format!("{what} produced NaN/Inf")));
        }
        self.nodes.push(Node { value, op });
        Ok(VarId(self.nodes.len() - 1))
    }

    // ── Primitives ───────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(KeatError::shape(format!(
                "matmul: {:?} × {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = mm(ta, tb);
        self.push(out, Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(KeatError::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add { a: a.0, b: b.0 }, "add")
    }

    /// `a + bias`, with the 1×c bias row broadcast over every row of `a`.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(KeatError::shape(format!(
                "add_bias: {:?} with bias {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddBias { a: a.0, bias: bias.0 }, "add_bias")
    }

    /// `a + s` with a 1×1 scalar variable broadcast over every entry.
    pub fn add_scalar_var(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).numel() != 1 {
            return Err(KeatError::shape("add_scalar_var: s must be 1×1"));
        }
        let sv = self.value(s).item();
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + sv).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddScalarVar { a: a.0, s: s.0 }, "add_scalar_var")
    }

    /// `s · a` with a 1×1 scalar variable.
    pub fn mul_scalar_var(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).numel() != 1 {
            return Err(KeatError::shape("mul_scalar_var: s must be 1×1"));
        }
        let sv = self.value(s).item();
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * sv).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::MulScalarVar { a: a.0, s: s.0 }, "mul_scalar_var")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(KeatError::shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(KeatError::shape(format!(
                "div: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Div { a: a.0, b: b.0 }, "div")
    }

    /// Elementwise `k·a + c` with constant coefficients.
    pub fn affine(&mut self, a: VarId, k: f64, c: f64) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| k * x + c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Affine { a: a.0, k }, "affine")
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Tanh { a: a.0 }, "tanh")
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Sigmoid { a: a.0 }, "sigmoid")
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.abs()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Abs { a: a.0 }, "abs")
    }

    /// Max-subtracted softmax along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || axis > 1 {
            return Err(KeatError::shape(format!(
                "softmax: shape {:?}, axis {axis}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        let (lanes, lane_len, stride, lane_step) = if axis == 1 {
            (r, c, 1usize, c)
        } else {
            (c, r, c, 1usize)
        };
        for lane in 0..lanes {
            let base = lane * lane_step;
            let mut max = f64::NEG_INFINITY;
            for j in 0..lane_len {
                max = max.max(data[base + j * stride]);
            }
            let mut sum = 0.0;
            for j in 0..lane_len {
                let e = (data[base + j * stride] - max).exp();
                data[base + j * stride] = e;
                sum += e;
            }
            for j in 0..lane_len {
                data[base + j * stride] /= sum;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Softmax { a: a.0, axis }, "softmax")
    }

    pub fn concat(&mut self, a: VarId, b: VarId, axis: usize) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || axis > 1 {
            return Err(KeatError::shape(format!(
                "concat: {:?} + {:?}, axis {axis}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = if axis == 0 {
            if ta.cols() != tb.cols() {
                return Err(KeatError::shape(format!(
                    "concat axis 0: {:?} + {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?
        } else {
            if ta.rows() != tb.rows() {
                return Err(KeatError::shape(format!(
                    "concat axis 1: {:?} + {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (ca, cb) = (ta.cols(), tb.cols());
            let mut data = Vec::with_capacity(ta.numel() + tb.numel());
            for r in 0..ta.rows() {
                data.extend_from_slice(ta.row_slice(r));
                data.extend_from_slice(tb.row_slice(r));
            }
            Tensor::new(vec![ta.rows(), ca + cb], data)?
        };
        self.push(out, Op::Concat { a: a.0, b: b.0, axis }, "concat")
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.rows() {
            return Err(KeatError::shape(format!(
                "slice_rows: rows {}..{} of {:?}",
                start,
                start + len,
                ta.shape()
            )));
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        self.push(out, Op::SliceRows { a: a.0, start }, "slice_rows")
    }

    /// Stack 1×d rows into a k×d matrix.
    pub fn stack_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(KeatError::shape("stack_rows: no rows"));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let t = self.value(p);
            if t.rows() != 1 || t.cols() != d {
                return Err(KeatError::shape(format!(
                    "stack_rows: expected 1×{d}, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![parts.len(), d], data)?;
        self.push(out, Op::StackRows { parts: parts.iter().map(|p| p.0).collect() }, "stack_rows")
    }

    /// Repeat a 1×d row `times` times into a times×d matrix.
    pub fn repeat_rows(&mut self, a: VarId, times: usize) -> Result<VarId> {
        let ta = self.value(a);
        if ta.rows() != 1 || times == 0 {
            return Err(KeatError::shape(format!(
                "repeat_rows: {:?} × {times}",
                ta.shape()
            )));
        }
        let mut data = Vec::with_capacity(times * ta.cols());
        for _ in 0..times {
            data.extend_from_slice(ta.data());
        }
        let out = Tensor::new(vec![times, ta.cols()], data)?;
        self.push(out, Op::RepeatRows { a: a.0 }, "repeat_rows")
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push(out, Op::Transpose { a: a.0 }, "transpose")
    }

    /// Columnwise max over rows, n×d → 1×d. The adjoint routes to the argmax
    /// row of each column; ties go to the lowest row index.
    pub fn max_pool(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(KeatError::shape(format!("max_pool: {:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = ta.data()[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::new(vec![1, c], out)?;
        self.push(out, Op::MaxPool { a: a.0, argmax }, "max_pool")
    }

    /// Mean over rows, n×d → 1×d.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += ta.data()[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let out = Tensor::new(vec![1, c], out)?;
        self.push(out, Op::MeanRows { a: a.0 }, "mean_rows")
    }

    /// `x / Σx`. Intended for non-negative inputs with positive mass.
    pub fn normalize(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum();
        if s <= 0.0 {
            return Err(KeatError::contract(format!("normalize: mass {s} is not positive")));
        }
        let data = ta.data().iter().map(|x| x / s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Normalize { a: a.0 }, "normalize")
    }

    /// Sum of all entries → 1×1.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, "sum")
    }

    /// Row lookup: out[i] = table[rows[i]]. Adjoints accumulate into the
    /// selected table rows only.
    pub fn gather(&mut self, table: VarId, rows: &[usize]) -> Result<VarId> {
        let tt = self.value(table);
        if rows.is_empty() {
            return Err(KeatError::shape("gather: empty row list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= tt.rows()) {
            return Err(KeatError::contract(format!(
                "gather: row {bad} out of range for table with {} rows",
                tt.rows()
            )));
        }
        let c = tt.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(tt.row_slice(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        self.push(out, Op::Gather { table: table.0, rows: rows.to_vec() }, "gather")
    }

    /// Scale row t of `a` by `w[t]`; `w` has one entry per row of `a`.
    pub fn scale_rows(&mut self, a: VarId, w: VarId) -> Result<VarId> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.numel() != ta.rows() {
            return Err(KeatError::shape(format!(
                "scale_rows: {:?} with {} weights",
                ta.shape(),
                tw.numel()
            )));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= tw.data()[i / c];
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::ScaleRows { a: a.0, w: w.0 }, "scale_rows")
    }

    /// Apply a precomputed dropout mask whose kept entries are `1/(1-p)`.
    pub fn dropout(&mut self, a: VarId, mask: &[f64]) -> Result<VarId> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(KeatError::shape(format!(
                "dropout: mask len {} vs {:?}",
                mask.len(),
                ta.shape()
            )));
        }
        let data = ta.data().iter().zip(mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { a: a.0, mask: mask.to_vec() }, "dropout")
    }

    pub fn clamp_min(&mut self, a: VarId, min: f64) -> Result<VarId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(min)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::ClampMin { a: a.0, min }, "clamp_min")
    }

    /// `-ln softmax(logits)[label]` for a 1×C logits row, computed via a
    /// max-subtracted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let tl = self.value(logits);
        if tl.rows() != 1 {
            return Err(KeatError::shape(format!("cross_entropy: logits {:?}", tl.shape())));
        }
        if label >= tl.cols() {
            return Err(KeatError::contract(format!(
                "cross_entropy: label {label} out of range for {} classes",
                tl.cols()
            )));
        }
        let max = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + tl.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - tl.data()[label];
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits: logits.0, label }, "cross_entropy")
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call is a
    /// contract error.
    pub fn backward(&mut self, loss: VarId, set: &ParamSet) -> Result<GradStore> {
        if self.consumed {
            return Err(KeatError::contract(
                "backward already called on this tape; build a fresh tape",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(KeatError::contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(up) = adj[i].take() else { continue };
            // Ops only reference earlier nodes, so writing into adj[<i] is safe.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    // Re-stash for collection below.
                    adj[i] = Some(up);
                    let _ = id;
                }
                Op::Matmul { a, b } => {
                    let da = mm_nt(&up, &self.nodes[*b].value);
                    let db = mm_tn(&self.nodes[*a].value, &up);
                    Self::acc(&mut adj, &self.nodes, *a, &da);
                    Self::acc(&mut adj, &self.nodes, *b, &db);
                }
                Op::Add { a, b } => {
                    Self::acc(&mut adj, &self.nodes, *a, &up);
                    Self::acc(&mut adj, &self.nodes, *b, &up);
                }
                Op::AddBias { a, bias } => {
                    Self::acc(&mut adj, &self.nodes, *a, &up);
                    let c = up.cols();
                    let mut db = vec![0.0; c];
                    for (k, v) in up.data().iter().enumerate() {
                        db[k % c] += v;
                    }
                    Self::acc(&mut adj, &self.nodes, *bias, &Tensor::row(db));
                }
                Op::AddScalarVar { a, s } => {
                    Self::acc(&mut adj, &self.nodes, *a, &up);
                    let ds = up.data().iter().sum();
                    Self::acc(&mut adj, &self.nodes, *s, &Tensor::scalar(ds));
                }
                Op::MulScalarVar { a, s } => {
                    let sv = self.nodes[*s].value.item();
                    let av = &self.nodes[*a].value;
                    let da: Vec<f64> = up.data().iter().map(|g| g * sv).collect();
                    let ds: f64 = up.data().iter().zip(av.data()).map(|(g, x)| g * x).sum();
                    Self::acc(
                        &mut adj,
                        &self.nodes,
                        *a,
                        &Tensor::new(av.shape().to_vec(), da).unwrap(),
                    );
                    Self::acc(&mut adj, &self.nodes, *s, &Tensor::scalar(ds));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> = up.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = up.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(av.shape().to_vec(), da).unwrap());
                    Self::acc(&mut adj, &self.nodes, *b, &Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
                Op::Div { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> = up.data().iter().zip(bv.data()).map(|(g, y)| g / y).collect();
                    let db: Vec<f64> = up
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(av.shape().to_vec(), da).unwrap());
                    Self::acc(&mut adj, &self.nodes, *b, &Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
                Op::Affine { a, k } => {
                    let da: Vec<f64> = up.data().iter().map(|g| g * k).collect();
                    let shape = self.nodes[*a].value.shape().to_vec();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(shape, da).unwrap());
                }
                Op::Tanh { a } => {
                    let y = &self.nodes[i].value;
                    let da: Vec<f64> =
                        up.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(y.shape().to_vec(), da).unwrap());
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    let da: Vec<f64> =
                        up.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(y.shape().to_vec(), da).unwrap());
                }
                Op::Abs { a } => {
                    let x = &self.nodes[*a].value;
                    let da: Vec<f64> = up
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, v)| match v.partial_cmp(&0.0) {
                            Some(std::cmp::Ordering::Greater) => *g,
                            Some(std::cmp::Ordering::Less) => -g,
                            _ => 0.0,
                        })
                        .collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(x.shape().to_vec(), da).unwrap());
                }
                Op::Softmax { a, axis } => {
                    let y = &self.nodes[i].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut da = vec![0.0; r * c];
                    let (lanes, lane_len, stride, lane_step) =
                        if *axis == 1 { (r, c, 1usize, c) } else { (c, r, c, 1usize) };
                    for lane in 0..lanes {
                        let base = lane * lane_step;
                        let mut dot = 0.0;
                        for j in 0..lane_len {
                            let k = base + j * stride;
                            dot += up.data()[k] * y.data()[k];
                        }
                        for j in 0..lane_len {
                            let k = base + j * stride;
                            da[k] = y.data()[k] * (up.data()[k] - dot);
                        }
                    }
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(y.shape().to_vec(), da).unwrap());
                }
                Op::Concat { a, b, axis } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if *axis == 0 {
                        let split = av.numel();
                        let da = Tensor::new(av.shape().to_vec(), up.data()[..split].to_vec()).unwrap();
                        let db = Tensor::new(bv.shape().to_vec(), up.data()[split..].to_vec()).unwrap();
                        Self::acc(&mut adj, &self.nodes, *a, &da);
                        Self::acc(&mut adj, &self.nodes, *b, &db);
                    } else {
                        let (ca, cb) = (av.cols(), bv.cols());
                        let mut da = Vec::with_capacity(av.numel());
                        let mut db = Vec::with_capacity(bv.numel());
                        for rrow in 0..av.rows() {
                            let row = up.row_slice(rrow);
                            da.extend_from_slice(&row[..ca]);
                            db.extend_from_slice(&row[ca..ca + cb]);
                        }
                        Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(av.shape().to_vec(), da).unwrap());
                        Self::acc(&mut adj, &self.nodes, *b, &Tensor::new(bv.shape().to_vec(), db).unwrap());
                    }
                }
                Op::SliceRows { a, start } => {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    da.data_mut()[start * c..start * c + up.numel()].copy_from_slice(up.data());
                    Self::acc(&mut adj, &self.nodes, *a, &da);
                }
                Op::StackRows { parts } => {
                    for (r, &p) in parts.iter().enumerate() {
                        Self::acc(&mut adj, &self.nodes, p, &Tensor::row(up.row_slice(r).to_vec()));
                    }
                }
                Op::RepeatRows { a } => {
                    let c = up.cols();
                    let mut da = vec![0.0; c];
                    for (k, v) in up.data().iter().enumerate() {
                        da[k % c] += v;
                    }
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::row(da));
                }
                Op::Transpose { a } => {
                    let (r, c) = (up.rows(), up.cols());
                    let mut da = vec![0.0; r * c];
                    for x in 0..r {
                        for y in 0..c {
                            da[y * r + x] = up.data()[x * c + y];
                        }
                    }
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(vec![c, r], da).unwrap());
                }
                Op::MaxPool { a, argmax } => {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    for (j, &r) in argmax.iter().enumerate() {
                        da.data_mut()[r * c + j] += up.data()[j];
                    }
                    Self::acc(&mut adj, &self.nodes, *a, &da);
                }
                Op::MeanRows { a } => {
                    let av = &self.nodes[*a].value;
                    let (r, c) = (av.rows(), av.cols());
                    let inv = 1.0 / r as f64;
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        for j in 0..c {
                            da[row * c + j] = up.data()[j] * inv;
                        }
                    }
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                Op::Normalize { a } => {
                    let y = &self.nodes[i].value;
                    let s: f64 = self.nodes[*a].value.data().iter().sum();
                    let dot: f64 = up.data().iter().zip(y.data()).map(|(g, v)| g * v).sum();
                    let da: Vec<f64> = up.data().iter().map(|g| (g - dot) / s).collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(y.shape().to_vec(), da).unwrap());
                }
                Op::Sum { a } => {
                    let av = &self.nodes[*a].value;
                    let g = up.item();
                    let da = Tensor::new(av.shape().to_vec(), vec![g; av.numel()]).unwrap();
                    Self::acc(&mut adj, &self.nodes, *a, &da);
                }
                Op::Gather { table, rows } => {
                    let tv = &self.nodes[*table].value;
                    let c = tv.cols();
                    let mut da = Tensor::zeros(tv.shape().to_vec());
                    for (r, &src) in rows.iter().enumerate() {
                        let urow = up.row_slice(r);
                        let drow = &mut da.data_mut()[src * c..(src + 1) * c];
                        for j in 0..c {
                            drow[j] += urow[j];
                        }
                    }
                    Self::acc(&mut adj, &self.nodes, *table, &da);
                }
                Op::ScaleRows { a, w } => {
                    let (av, wv) = (&self.nodes[*a].value, &self.nodes[*w].value);
                    let c = av.cols();
                    let da: Vec<f64> =
                        up.data().iter().enumerate().map(|(k, g)| g * wv.data()[k / c]).collect();
                    let mut dw = vec![0.0; wv.numel()];
                    for (k, g) in up.data().iter().enumerate() {
                        dw[k / c] += g * av.data()[k];
                    }
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(av.shape().to_vec(), da).unwrap());
                    Self::acc(&mut adj, &self.nodes, *w, &Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                Op::Dropout { a, mask } => {
                    let da: Vec<f64> = up.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    let shape = self.nodes[*a].value.shape().to_vec();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(shape, da).unwrap());
                }
                Op::ClampMin { a, min } => {
                    let x = &self.nodes[*a].value;
                    let da: Vec<f64> = up
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, v)| if v >= min { *g } else { 0.0 })
                        .collect();
                    Self::acc(&mut adj, &self.nodes, *a, &Tensor::new(x.shape().to_vec(), da).unwrap());
                }
                Op::CrossEntropy { logits, label } => {
                    let lv = &self.nodes[*logits].value;
                    let g = up.item();
                    let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = lv.data().iter().map(|x| (x - max).exp()).sum();
                    let mut da: Vec<f64> =
                        lv.data().iter().map(|x| g * (x - max).exp() / sum).collect();
                    da[*label] -= g;
                    Self::acc(&mut adj, &self.nodes, *logits, &Tensor::new(lv.shape().to_vec(), da).unwrap());
                }
            }
        }

        let mut store = GradStore::zeros_like(set);
        for (&pid, &vid) in &self.param_vids {
            if let Some(g) = adj[vid.0].take() {
                store.grads[pid] = g;
            }
        }
        Ok(store)
    }

    fn acc(adj: &mut [Option<Tensor>], nodes: &[Node], target: usize, delta: &Tensor) {
        let slot = adj[target]
            .get_or_insert_with(|| Tensor::zeros(nodes[target].value.shape().to_vec()));
        debug_assert_eq!(slot.shape(), delta.shape());
        for (d, s) in slot.data_mut().iter_mut().zip(delta.data()) {
            *d += s;
        }
    }
}
