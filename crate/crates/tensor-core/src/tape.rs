use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Epsilon inside layer normalization's variance square root.
pub const LN_EPS: f64 = 1e-12;

/// Rows with an l2 norm below this are treated as zero vectors.
const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a single element.
    Scalar,
    /// Right operand is one row, repeated down the left matrix.
    Row,
    /// Right operand is one column, repeated across the left matrix.
    Col,
}

#[derive(Clone, Debug)]
enum Op {
    MatMul,
    Add(Broadcast),
    Mul(Broadcast),
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Elu,
    Scale(f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { start: usize, len: usize },
    Softmax,
    // masked entries produce exact zeros, so the softmax backward formula
    // covers both variants without consulting the mask again
    MaskedSoftmax,
    LayerNorm,
    L2Normalize,
    Transpose,
    SumAll,
    MeanAll,
    SumAxis0,
    SumAxis1,
    GatherRows(Arc<Vec<usize>>),
    ClampMin(f64),
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of executed ops, replayed in reverse by [`Tape::gradients`].
///
/// Ops are recorded only when an input requires gradients, so the same code
/// path serves both training and plain inference.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to every leaf tensor on the tape.
pub struct Gradients {
    grads: HashMap<u64, Tensor>,
}

impl Gradients {
    /// Gradient for `t`; leaves not on the loss path get zeros.
    pub fn get(&self, t: &Tensor) -> Tensor {
        match self.grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * m..(p + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// a (n×k) times b-transpose where b is (m×k); result n×m.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// a-transpose times b where a is (n×k), b is (n×m); result k×m.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * m..(p + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

fn resolve_broadcast(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Broadcast> {
    if lhs.shape() == rhs.shape() {
        return Ok(Broadcast::Same);
    }
    if rhs.numel() == 1 {
        return Ok(Broadcast::Scalar);
    }
    let (lr, lc) = lhs.rows_cols();
    let (rr, rc) = rhs.rows_cols();
    if rr == 1 && rc == lc {
        return Ok(Broadcast::Row);
    }
    if rc == 1 && rr == lr && lhs.is_matrix() {
        return Ok(Broadcast::Col);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    })
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn emit(&self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let grad = inputs.iter().any(|t| t.needs_grad());
        let out = Tensor::new_unchecked(shape, data, grad);
        if grad {
            self.nodes.borrow_mut().push(Node {
                op,
                inputs,
                output: out.clone(),
            });
        }
        out
    }

    // ── binary kernels ───────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.is_matrix() || !b.is_matrix() {
            return Err(TensorError::BadShape {
                op: "matmul",
                expected: "two matrices",
                shape: if a.is_matrix() {
                    b.shape().to_vec()
                } else {
                    a.shape().to_vec()
                },
            });
        }
        let (n, k) = a.rows_cols();
        let (k2, m) = b.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_raw(a.data(), b.data(), n, k, m);
        check_finite("matmul", &out)?;
        Ok(self.emit(Op::MatMul, vec![a.clone(), b.clone()], vec![n, m], out))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bc = resolve_broadcast("add", a, b)?;
        let (r, c) = a.rows_cols();
        let bd = b.data();
        let mut out = a.data().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, v) in out.iter_mut().zip(bd) {
                    *o += v;
                }
            }
            Broadcast::Scalar => {
                let v = bd[0];
                for o in out.iter_mut() {
                    *o += v;
                }
            }
            Broadcast::Row => {
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] += bd[j];
                    }
                }
            }
            Broadcast::Col => {
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] += bd[i];
                    }
                }
            }
        }
        check_finite("add", &out)?;
        Ok(self.emit(Op::Add(bc), vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bc = resolve_broadcast("mul", a, b)?;
        let (r, c) = a.rows_cols();
        let bd = b.data();
        let mut out = a.data().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, v) in out.iter_mut().zip(bd) {
                    *o *= v;
                }
            }
            Broadcast::Scalar => {
                let v = bd[0];
                for o in out.iter_mut() {
                    *o *= v;
                }
            }
            Broadcast::Row => {
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] *= bd[j];
                    }
                }
            }
            Broadcast::Col => {
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] *= bd[i];
                    }
                }
            }
        }
        check_finite("mul", &out)?;
        Ok(self.emit(Op::Mul(bc), vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, &neg)
    }

    // ── unary kernels ────────────────────────────────────────────────

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|v| v.exp()).collect();
        check_finite("exp", &out)?;
        Ok(self.emit(Op::Exp, vec![a.clone()], a.shape().to_vec(), out))
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        for &v in a.data() {
            if v <= 0.0 {
                return Err(TensorError::LogDomain { value: v });
            }
        }
        let out: Vec<f64> = a.data().iter().map(|v| v.ln()).collect();
        check_finite("log", &out)?;
        Ok(self.emit(Op::Log, vec![a.clone()], a.shape().to_vec(), out))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(self.emit(Op::Relu, vec![a.clone()], a.shape().to_vec(), out))
    }

    pub fn leaky_relu(&self, a: &Tensor, slope: f64) -> Result<Tensor> {
        let out: Vec<f64> = a
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        Ok(self.emit(Op::LeakyRelu(slope), vec![a.clone()], a.shape().to_vec(), out))
    }

    pub fn elu(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        Ok(self.emit(Op::Elu, vec![a.clone()], a.shape().to_vec(), out))
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &out)?;
        Ok(self.emit(Op::Scale(factor), vec![a.clone()], a.shape().to_vec(), out))
    }

    pub fn clamp_min(&self, a: &Tensor, floor: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&v| v.max(floor)).collect();
        Ok(self.emit(Op::ClampMin(floor), vec![a.clone()], a.shape().to_vec(), out))
    }

    // ── structural kernels ───────────────────────────────────────────

    /// Concatenation along the last axis.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        let (rows, _) = parts[0].rows_cols();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols();
            if r != rows || p.shape().len() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for i in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out[i * total + off..i * total + off + w].copy_from_slice(p.row_slice(i));
                off += w;
            }
        }
        let shape = if rank == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let inputs: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.emit(Op::ConcatCols(widths), inputs, shape, out))
    }

    /// Stacks inputs as rows (vectors count as one row each).
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        let (_, cols) = parts[0].rows_cols();
        let mut counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols();
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            counts.push(r);
        }
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(total * cols);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let inputs: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.emit(Op::ConcatRows(counts), inputs, vec![total, cols], out))
    }

    /// Contiguous column range along the last axis; rank is preserved.
    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = a.rows_cols();
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{} out of width {c}", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&a.data()[i * c + start..i * c + start + len]);
        }
        let shape = if a.is_matrix() { vec![r, len] } else { vec![len] };
        Ok(self.emit(Op::SliceCols { start, len }, vec![a.clone()], shape, out))
    }

    /// Selects rows by index (duplicates allowed); gradients scatter-add back.
    pub fn gather_rows(&self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = a.rows_cols();
        if !a.is_matrix() {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                expected: "a matrix",
                shape: a.shape().to_vec(),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "no indices".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of {r}"),
                });
            }
            out.extend_from_slice(a.row_slice(i));
        }
        Ok(self.emit(
            Op::GatherRows(Arc::new(indices.to_vec())),
            vec![a.clone()],
            vec![indices.len(), c],
            out,
        ))
    }

    /// Single row as a 1×c matrix.
    pub fn row(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        self.gather_rows(a, &[i])
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || numel != a.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "rank 1 or 2 with matching element count",
                shape: shape.to_vec(),
            });
        }
        Ok(self.emit(Op::Reshape, vec![a.clone()], shape.to_vec(), a.data().to_vec()))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        if !a.is_matrix() {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "a matrix",
                shape: a.shape().to_vec(),
            });
        }
        let (r, c) = a.rows_cols();
        let d = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.emit(Op::Transpose, vec![a.clone()], vec![c, r], out))
    }

    // ── row-wise kernels (last axis) ─────────────────────────────────

    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.rows_cols();
        let d = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        check_finite("softmax", &out)?;
        Ok(self.emit(Op::Softmax, vec![a.clone()], a.shape().to_vec(), out))
    }

    /// Row-wise softmax restricted to `mask`-true positions; masked entries
    /// come out exactly zero. Errors on a fully masked row.
    pub fn masked_softmax(&self, a: &Tensor, mask: &Arc<Vec<bool>>) -> Result<Tensor> {
        let (r, c) = a.rows_cols();
        if mask.len() != a.numel() {
            return Err(TensorError::Invalid {
                op: "masked_softmax",
                msg: format!("mask has {} entries for {} values", mask.len(), a.numel()),
            });
        }
        let d = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[i * c + j] {
                    max = max.max(d[i * c + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Invalid {
                    op: "masked_softmax",
                    msg: format!("row {i} is fully masked"),
                });
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mask[i * c + j] {
                    let e = (d[i * c + j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        check_finite("masked_softmax", &out)?;
        Ok(self.emit(Op::MaskedSoftmax, vec![a.clone()], a.shape().to_vec(), out))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = x.rows_cols();
        if gain.numel() != c || bias.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: if gain.numel() != c {
                    gain.shape().to_vec()
                } else {
                    bias.shape().to_vec()
                },
            });
        }
        let d = x.data();
        let g = gain.data();
        let b = bias.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) / s * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        Ok(self.emit(
            Op::LayerNorm,
            vec![x.clone(), gain.clone(), bias.clone()],
            x.shape().to_vec(),
            out,
        ))
    }

    /// Row-wise l2 normalization. Zero rows stay zero; their indices are
    /// returned so callers can decide what a degenerate row means.
    pub fn l2_normalize(&self, a: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (r, c) = a.rows_cols();
        let d = a.data();
        let mut out = vec![0.0; r * c];
        let mut zero_rows = Vec::new();
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < ZERO_NORM_EPS {
                zero_rows.push(i);
            } else {
                for j in 0..c {
                    out[i * c + j] = row[j] / norm;
                }
            }
        }
        check_finite("l2_normalize", &out)?;
        let t = self.emit(Op::L2Normalize, vec![a.clone()], a.shape().to_vec(), out);
        Ok((t, zero_rows))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        check_finite("sum_all", &[s])?;
        Ok(self.emit(Op::SumAll, vec![a.clone()], vec![1], vec![s]))
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum::<f64>() / a.numel() as f64;
        check_finite("mean_all", &[s])?;
        Ok(self.emit(Op::MeanAll, vec![a.clone()], vec![1], vec![s]))
    }

    /// Column sums of a matrix.
    pub fn sum_axis0(&self, a: &Tensor) -> Result<Tensor> {
        if !a.is_matrix() {
            return Err(TensorError::BadShape {
                op: "sum_axis0",
                expected: "a matrix",
                shape: a.shape().to_vec(),
            });
        }
        let (r, c) = a.rows_cols();
        let d = a.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j];
            }
        }
        check_finite("sum_axis0", &out)?;
        Ok(self.emit(Op::SumAxis0, vec![a.clone()], vec![c], out))
    }

    /// Row sums of a matrix.
    pub fn sum_axis1(&self, a: &Tensor) -> Result<Tensor> {
        if !a.is_matrix() {
            return Err(TensorError::BadShape {
                op: "sum_axis1",
                expected: "a matrix",
                shape: a.shape().to_vec(),
            });
        }
        let (r, c) = a.rows_cols();
        let d = a.data();
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = d[i * c..(i + 1) * c].iter().sum();
        }
        check_finite("sum_axis1", &out)?;
        Ok(self.emit(Op::SumAxis1, vec![a.clone()], vec![r], out))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Gradients of a scalar `loss` with respect to every leaf on the tape.
    /// Leaves not connected to the loss receive zeros from [`Gradients::get`].
    pub fn gradients(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut acc: HashMap<u64, Vec<f64>> = HashMap::new();
        acc.insert(loss.id(), vec![1.0]);

        for node in nodes.iter().rev() {
            let out_grad = match acc.remove(&node.output.id()) {
                Some(g) => g,
                None => continue,
            };
            let input_grads = backward(node, &out_grad);
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                if !input.needs_grad() {
                    continue;
                }
                let grad = match grad {
                    Some(g) => g,
                    None => continue,
                };
                let slot = acc
                    .entry(input.id())
                    .or_insert_with(|| vec![0.0; input.numel()]);
                for (s, g) in slot.iter_mut().zip(&grad) {
                    *s += g;
                }
            }
        }

        // What survives the reverse sweep are exactly the leaves.
        let mut grads = HashMap::new();
        let shapes: HashMap<u64, Vec<usize>> = nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(|t| (t.id(), t.shape().to_vec())))
            .collect();
        for (id, data) in acc {
            if id == loss.id() && !shapes.contains_key(&id) {
                continue;
            }
            if let Some(shape) = shapes.get(&id) {
                grads.insert(id, Tensor::new_unchecked(shape.clone(), data, false));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-op vector-Jacobian products. Returns one optional gradient per input.
fn backward(node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let inputs = &node.inputs;
    let out = &node.output;
    match &node.op {
        Op::MatMul => {
            let (n, k) = inputs[0].rows_cols();
            let (_, m) = inputs[1].rows_cols();
            let da = matmul_nt(g, inputs[1].data(), n, m, k);
            let db = matmul_tn(inputs[0].data(), g, n, k, m);
            vec![Some(da), Some(db)]
        }
        Op::Add(bc) => {
            let (r, c) = inputs[0].rows_cols();
            let db = reduce_broadcast(g, r, c, *bc, None);
            vec![Some(g.to_vec()), Some(db)]
        }
        Op::Mul(bc) => {
            let (r, c) = inputs[0].rows_cols();
            let a = inputs[0].data();
            let b = inputs[1].data();
            let mut da = vec![0.0; a.len()];
            match bc {
                Broadcast::Same => {
                    for i in 0..a.len() {
                        da[i] = g[i] * b[i];
                    }
                }
                Broadcast::Scalar => {
                    for i in 0..a.len() {
                        da[i] = g[i] * b[0];
                    }
                }
                Broadcast::Row => {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[i * c + j] * b[j];
                        }
                    }
                }
                Broadcast::Col => {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[i * c + j] * b[i];
                        }
                    }
                }
            }
            let db = reduce_broadcast(g, r, c, *bc, Some(a));
            vec![Some(da), Some(db)]
        }
        Op::Exp => {
            let y = out.data();
            vec![Some(g.iter().zip(y).map(|(g, y)| g * y).collect())]
        }
        Op::Log => {
            let x = inputs[0].data();
            vec![Some(g.iter().zip(x).map(|(g, x)| g / x).collect())]
        }
        Op::Relu => {
            let x = inputs[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::LeakyRelu(slope) => {
            let x = inputs[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect(),
            )]
        }
        Op::Elu => {
            let x = inputs[0].data();
            let y = out.data();
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect(),
            )]
        }
        Op::Scale(f) => vec![Some(g.iter().map(|g| g * f).collect())],
        Op::ClampMin(floor) => {
            let x = inputs[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *floor { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::ConcatCols(widths) => {
            let (rows, total) = out.rows_cols();
            let mut grads = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in widths {
                let mut gi = Vec::with_capacity(rows * w);
                for i in 0..rows {
                    gi.extend_from_slice(&g[i * total + off..i * total + off + w]);
                }
                grads.push(Some(gi));
                off += w;
            }
            grads
        }
        Op::ConcatRows(counts) => {
            let (_, cols) = out.rows_cols();
            let mut grads = Vec::with_capacity(counts.len());
            let mut off = 0;
            for &r in counts {
                grads.push(Some(g[off * cols..(off + r) * cols].to_vec()));
                off += r;
            }
            grads
        }
        Op::SliceCols { start, len } => {
            let (r, c) = inputs[0].rows_cols();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                da[i * c + start..i * c + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(da)]
        }
        Op::GatherRows(indices) => {
            let (r, c) = inputs[0].rows_cols();
            let mut da = vec![0.0; r * c];
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..c {
                    da[i * c + j] += g[k * c + j];
                }
            }
            vec![Some(da)]
        }
        Op::Transpose => {
            let (r, c) = inputs[0].rows_cols();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(da)]
        }
        Op::Softmax | Op::MaskedSoftmax => {
            // y_i (g_i − Σ_k g_k y_k) per row; masked entries have y = 0.
            let (r, c) = out.rows_cols();
            let y = out.data();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    da[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(da)]
        }
        Op::LayerNorm => {
            let (r, c) = inputs[0].rows_cols();
            let x = inputs[0].data();
            let gain = inputs[1].data();
            let mut dx = vec![0.0; r * c];
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let s = (var + LN_EPS).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / s).collect();
                let dxhat: Vec<f64> = gr.iter().zip(gain).map(|(g, w)| g * w).collect();
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[i * c + j] = (dxhat[j] - m1 - xhat[j] * m2) / s;
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }
        Op::L2Normalize => {
            let (r, c) = inputs[0].rows_cols();
            let x = inputs[0].data();
            let y = out.data();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let xr = &x[i * c..(i + 1) * c];
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < ZERO_NORM_EPS {
                    continue; // zero row stays zero, gradient is zero
                }
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for j in 0..c {
                    dx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            vec![Some(dx)]
        }
        Op::SumAll => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0]; n])]
        }
        Op::MeanAll => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::SumAxis0 => {
            let (r, c) = inputs[0].rows_cols();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                da[i * c..(i + 1) * c].copy_from_slice(g);
            }
            vec![Some(da)]
        }
        Op::SumAxis1 => {
            let (r, c) = inputs[0].rows_cols();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[i];
                }
            }
            vec![Some(da)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
    }
}

/// Reduces an output-shaped gradient onto a broadcast right operand.
/// For `Mul`, `lhs` supplies the chain-rule factor.
#[allow(clippy::needless_range_loop)]
fn reduce_broadcast(g: &[f64], r: usize, c: usize, bc: Broadcast, lhs: Option<&[f64]>) -> Vec<f64> {
    let weighted = |idx: usize| match lhs {
        Some(a) => g[idx] * a[idx],
        None => g[idx],
    };
    match bc {
        Broadcast::Same => (0..g.len()).map(weighted).collect(),
        Broadcast::Scalar => vec![(0..g.len()).map(weighted).sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += weighted(i * c + j);
                }
            }
            out
        }
        Broadcast::Col => {
            let mut out = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    out[i] += weighted(i * c + j);
                }
            }
            out
        }
    }
}
