//! Reverse-mode gradient tape over a fixed primitive-op vocabulary.
//!
//! The tape evaluates eagerly: creating a node validates shapes and computes
//! its value immediately, so the forward pass and the graph are built in one
//! walk. `backward` replays the node list in reverse and accumulates
//! gradients in creation order, which makes gradients bitwise deterministic
//! for a given graph.
//!
//! The op set is deliberately closed: every model in this crate is expressed
//! in these primitives, and each primitive's backward rule is covered by the
//! central finite-difference suite. Extending the model space means adding a
//! primitive here plus its gradient test, never ad-hoc math elsewhere.

use std::collections::BTreeMap;

use crate::error::{Result, UpdError};
use crate::numerics::matrix::DenseMatrix;

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-12;
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    /// Leaf holding a constant; receives no gradient.
    Input,
    /// Leaf registered as trainable under a unique name.
    Param,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Mul { a: NodeId, b: NodeId, broadcast: bool },
    Scale { a: NodeId, factor: f64 },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    LayerNormRows { a: NodeId },
    L2NormalizeRows { a: NodeId },
    Gelu { a: NodeId },
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, end: usize },
    Sum { a: NodeId },
    Log { a: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape::default()
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(UpdError::contract(format!(
                "expected scalar node, found shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn input(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Constant single-row leaf; convenience for vectors entering a sequence.
    pub fn input_row(&mut self, values: &[f64]) -> NodeId {
        self.input(DenseMatrix::row_vector(values))
    }

    /// Constant single-column leaf.
    pub fn input_column(&mut self, values: &[f64]) -> NodeId {
        self.input(DenseMatrix::column_vector(values))
    }

    /// Registers a trainable leaf. Registering a name again returns the
    /// existing node, so batched losses can bind shared weights once per
    /// item without bookkeeping; the value must have the same shape (the
    /// caller is expected to pull it from the same parameter map).
    pub fn parameter(&mut self, name: &str, value: DenseMatrix) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id].value.shape() != value.shape() {
                return Err(UpdError::contract(format!(
                    "parameter {name:?} re-registered with shape {:?}, tape holds {:?}",
                    value.shape(),
                    self.nodes[id].value.shape()
                )));
            }
            return Ok(id);
        }
        let id = self.push(Op::Param, value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    /// Elementwise sum. A single-row `b` broadcasts over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() == vb.shape() {
            let value = va.add(vb)?;
            return Ok(self.push(
                Op::Add {
                    a,
                    b,
                    broadcast: false,
                },
                value,
            ));
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut value = va.clone();
            let brow = vb.row(0).to_vec();
            for r in 0..value.rows() {
                for (x, y) in value.row_mut(r).iter_mut().zip(&brow) {
                    *x += y;
                }
            }
            return Ok(self.push(
                Op::Add {
                    a,
                    b,
                    broadcast: true,
                },
                value,
            ));
        }
        Err(UpdError::ShapeMismatch {
            op: "tape add",
            left: va.shape(),
            right: vb.shape(),
        })
    }

    /// Elementwise product. A single-row `b` broadcasts over the rows of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() == vb.shape() {
            let value = va.hadamard(vb)?;
            return Ok(self.push(
                Op::Mul {
                    a,
                    b,
                    broadcast: false,
                },
                value,
            ));
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut value = va.clone();
            let brow = vb.row(0).to_vec();
            for r in 0..value.rows() {
                for (x, y) in value.row_mut(r).iter_mut().zip(&brow) {
                    *x *= y;
                }
            }
            return Ok(self.push(
                Op::Mul {
                    a,
                    b,
                    broadcast: true,
                },
                value,
            ));
        }
        Err(UpdError::ShapeMismatch {
            op: "tape mul",
            left: va.shape(),
            right: vb.shape(),
        })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a].value.scale(factor);
        self.push(Op::Scale { a, factor }, value)
    }

    /// Row-wise softmax with max subtraction; safe for large negative masks.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a].value;
        let mut value = input.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                denom += *x;
            }
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        self.push(Op::SoftmaxRows { a }, value)
    }

    /// Row-wise log-softmax. Fused so that heavily masked entries stay
    /// finite where `log(softmax(x))` would underflow to `-inf`.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a].value;
        let mut value = input.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_denom = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x = *x - max - log_denom;
            }
        }
        self.push(Op::LogSoftmaxRows { a }, value)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + 1e-5)`, no affine.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a].value;
        let mut value = input.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        }
        self.push(Op::LayerNormRows { a }, value)
    }

    /// Rows scaled to unit L2 norm (plus a tiny epsilon in the denominator).
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a].value;
        let mut value = input.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm + L2_NORM_EPS;
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        self.push(Op::L2NormalizeRows { a }, value)
    }

    /// Tanh-approximated GELU; smooth everywhere, which keeps central
    /// finite differences well-conditioned.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a].value;
        let mut value = input.clone();
        for x in value.data_mut().iter_mut() {
            let u = GELU_SQRT_2_OVER_PI * (*x + GELU_CUBIC_COEF * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        self.push(Op::Gelu { a }, value)
    }

    /// Gathers rows of `table` by index; gradient scatters back additively.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[table].value;
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(UpdError::contract(format!(
                    "embedding lookup index {} out of range for table with {} rows",
                    id,
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = DenseMatrix::new(ids.len(), t.cols(), data)?;
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Stacks parts vertically; all parts must agree on column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(UpdError::contract("concat_rows over zero parts"));
        }
        let cols = self.nodes[parts[0]].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.cols() != cols {
                return Err(UpdError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = DenseMatrix::new(rows, cols, data)?;
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if start >= end || end > v.rows() {
            return Err(UpdError::contract(format!(
                "slice_rows [{start}, {end}) out of range for {} rows",
                v.rows()
            )));
        }
        let cols = v.cols();
        let data = v.data()[start * cols..end * cols].to_vec();
        let value = DenseMatrix::new(end - start, cols, data)?;
        Ok(self.push(Op::SliceRows { a, start, end }, value))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a].value.data().iter().sum();
        let value = DenseMatrix::new(1, 1, vec![total]).expect("1x1 shape");
        self.push(Op::Sum { a }, value)
    }

    /// Elementwise natural log; caller guarantees positive entries.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for x in value.data_mut().iter_mut() {
            *x = x.ln();
        }
        self.push(Op::Log { a }, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transposed();
        self.push(Op::Transpose { a }, value)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if rows * cols != v.rows() * v.cols() {
            return Err(UpdError::contract(format!(
                "reshape {:?} -> ({rows}, {cols}) changes element count",
                v.shape()
            )));
        }
        let value = DenseMatrix::new(rows, cols, v.data().to_vec())?;
        Ok(self.push(Op::Reshape { a }, value))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per registered
    /// parameter; parameters the loss never touched map to zero matrices.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, DenseMatrix>> {
        if self.nodes[loss].value.shape() != (1, 1) {
            return Err(UpdError::contract(format!(
                "backward requires a scalar loss, found shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(DenseMatrix::new(1, 1, vec![1.0])?);

        for id in (0..=loss).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Input | Op::Param => {
                    grads[id] = Some(grad);
                }
                Op::MatMul { a, b } => {
                    let da = grad.matmul_nt(&self.nodes[*b].value)?;
                    let db = self.nodes[*a].value.matmul_tn(&grad)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b, broadcast } => {
                    accumulate(&mut grads, *a, grad.clone())?;
                    if *broadcast {
                        accumulate(&mut grads, *b, collapse_rows(&grad))?;
                    } else {
                        accumulate(&mut grads, *b, grad)?;
                    }
                }
                Op::Mul { a, b, broadcast } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    if *broadcast {
                        let mut da = grad.clone();
                        let brow = vb.row(0).to_vec();
                        for r in 0..da.rows() {
                            for (x, y) in da.row_mut(r).iter_mut().zip(&brow) {
                                *x *= y;
                            }
                        }
                        accumulate(&mut grads, *a, da)?;
                        accumulate(&mut grads, *b, collapse_rows(&grad.hadamard(va)?))?;
                    } else {
                        accumulate(&mut grads, *a, grad.hadamard(vb)?)?;
                        accumulate(&mut grads, *b, grad.hadamard(va)?)?;
                    }
                }
                Op::Scale { a, factor } => {
                    accumulate(&mut grads, *a, grad.scale(*factor))?;
                }
                Op::SoftmaxRows { a } => {
                    let p = &self.nodes[id].value;
                    let mut da = grad.clone();
                    for r in 0..da.rows() {
                        let prow = p.row(r).to_vec();
                        let drow = da.row_mut(r);
                        let inner: f64 = drow.iter().zip(&prow).map(|(d, p)| d * p).sum();
                        for (d, p) in drow.iter_mut().zip(&prow) {
                            *d = p * (*d - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &self.nodes[id].value;
                    let mut da = grad.clone();
                    for r in 0..da.rows() {
                        let yrow = y.row(r).to_vec();
                        let drow = da.row_mut(r);
                        let total: f64 = drow.iter().sum();
                        for (d, ly) in drow.iter_mut().zip(&yrow) {
                            *d -= ly.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LayerNormRows { a } => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let mut da = grad.clone();
                    for r in 0..da.rows() {
                        let xrow = x.row(r);
                        let yrow = y.row(r).to_vec();
                        let n = xrow.len() as f64;
                        let mean = xrow.iter().sum::<f64>() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let drow = da.row_mut(r);
                        let mean_dy = drow.iter().sum::<f64>() / n;
                        let mean_dy_y: f64 =
                            drow.iter().zip(&yrow).map(|(d, y)| d * y).sum::<f64>() / n;
                        for (d, y) in drow.iter_mut().zip(&yrow) {
                            *d = inv_std * (*d - mean_dy - y * mean_dy_y);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::L2NormalizeRows { a } => {
                    let x = &self.nodes[*a].value;
                    let mut da = grad.clone();
                    for r in 0..da.rows() {
                        let xrow = x.row(r).to_vec();
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let denom = norm + L2_NORM_EPS;
                        let drow = da.row_mut(r);
                        let inner: f64 = drow.iter().zip(&xrow).map(|(d, x)| d * x).sum();
                        let correction = inner / (norm.max(L2_NORM_EPS) * denom * denom);
                        for (d, x) in drow.iter_mut().zip(&xrow) {
                            *d = *d / denom - x * correction;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Gelu { a } => {
                    let x = &self.nodes[*a].value;
                    let mut da = grad.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(x.data()) {
                        let u = GELU_SQRT_2_OVER_PI * (v + GELU_CUBIC_COEF * v * v * v);
                        let t = u.tanh();
                        let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::EmbeddingLookup { table, ids } => {
                    let t = &self.nodes[*table].value;
                    let mut dt = DenseMatrix::zeros(t.rows(), t.cols());
                    for (r, &id_) in ids.iter().enumerate() {
                        let src = grad.row(r).to_vec();
                        for (x, y) in dt.row_mut(id_).iter_mut().zip(&src) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows();
                        let cols = grad.cols();
                        let data =
                            grad.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, DenseMatrix::new(rows, cols, data)?)?;
                        offset += rows;
                    }
                }
                Op::SliceRows { a, start, end } => {
                    let v = &self.nodes[*a].value;
                    let mut da = DenseMatrix::zeros(v.rows(), v.cols());
                    for r in *start..*end {
                        let src = grad.row(r - start).to_vec();
                        for (x, y) in da.row_mut(r).iter_mut().zip(&src) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sum { a } => {
                    let g = grad.data()[0];
                    let v = &self.nodes[*a].value;
                    let da = DenseMatrix::new(v.rows(), v.cols(), vec![g; v.rows() * v.cols()])?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Log { a } => {
                    let x = &self.nodes[*a].value;
                    let mut da = grad.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(x.data()) {
                        *d /= v;
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Transpose { a } => {
                    accumulate(&mut grads, *a, grad.transposed())?;
                }
                Op::Reshape { a } => {
                    let v = &self.nodes[*a].value;
                    let da = DenseMatrix::new(v.rows(), v.cols(), grad.data().to_vec())?;
                    accumulate(&mut grads, *a, da)?;
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = match grads[id].take() {
                Some(g) => g,
                None => {
                    let v = &self.nodes[id].value;
                    DenseMatrix::zeros(v.rows(), v.cols())
                }
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], id: NodeId, delta: DenseMatrix) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Sums a gradient over rows, collapsing it to the single-row shape of a
/// broadcast operand.
fn collapse_rows(grad: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, grad.cols());
    for r in 0..grad.rows() {
        let src = grad.row(r).to_vec();
        for (x, y) in out.row_mut(0).iter_mut().zip(&src) {
            *x += y;
        }
    }
    out
}

/// Binds named weights from a parameter map onto one tape, as trainable
/// parameter leaves for names in the trainable set and as constant inputs
/// otherwise. Bindings are memoized, so a weight used by many sequence
/// losses on one tape occupies one node and accumulates one gradient.
pub struct GraphBinder<'p> {
    params: &'p crate::numerics::optim::Params,
    trainable: std::collections::BTreeSet<String>,
    cache: BTreeMap<String, NodeId>,
}

impl<'p> GraphBinder<'p> {
    pub fn with_trainable(
        params: &'p crate::numerics::optim::Params,
        trainable: impl IntoIterator<Item = String>,
    ) -> Self {
        GraphBinder {
            params,
            trainable: trainable.into_iter().collect(),
            cache: BTreeMap::new(),
        }
    }

    /// Every bound weight becomes a trainable leaf.
    pub fn all_trainable(params: &'p crate::numerics::optim::Params) -> Self {
        let names: Vec<String> = params.keys().cloned().collect();
        Self::with_trainable(params, names)
    }

    /// Every bound weight becomes a constant; backward sees no parameters
    /// through this binder.
    pub fn frozen(params: &'p crate::numerics::optim::Params) -> Self {
        Self::with_trainable(params, std::iter::empty::<String>())
    }

    pub fn params(&self) -> &'p crate::numerics::optim::Params {
        self.params
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn bind(&mut self, tape: &mut GradientTape, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| UpdError::MissingArtifact(format!("parameter {name}")))?
            .clone();
        let id = if self.trainable.contains(name) {
            tape.parameter(name, value)?
        } else {
            tape.input(value)
        };
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }
}
