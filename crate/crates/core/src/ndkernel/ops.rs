//! Differentiable primitive ops.
//!
//! Each [`Op`] knows how to run forward on concrete arrays and how to map an
//! output gradient back onto its inputs. Backward rules recompute whatever
//! they need from the saved inputs and output, so a forward-only evaluation
//! never materialises backward state.

use std::sync::Arc;

use super::arena;
use super::array::NdArray;
use crate::error::{Error, Result};
use crate::objectives;

/// Compressed neighbour lists: row `t` attends to
/// `indices[offsets[t]..offsets[t + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighbors {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Neighbors { offsets, indices }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.indices[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Total number of (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// `alpha * op(a) * op(b)` where `op` optionally transposes.
    MatMul { ta: bool, tb: bool, alpha: f64 },
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `x[M×N] + b[N]` broadcast over rows.
    AddBias,
    /// `x[M×N] * w[M]` broadcast over columns.
    MulRows,
    Relu,
    /// Per-column learned slope for negative inputs.
    Prelu,
    SoftmaxRows,
    LayerNorm { eps: f64 },
    L2NormalizeRows,
    /// Softmax attention restricted to neighbour lists. Output is
    /// `[T × (d + 1)]`; the last column holds each row's log-sum-exp.
    SparseAttention { nbrs: Arc<Neighbors>, scale: f64 },
    Conv1d { stride: usize },
    Conv1dTranspose { stride: usize },
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
    /// Output row `r` copies input row `index[r]`, or zeros for `None`.
    GatherRows { index: Arc<Vec<Option<usize>>> },
    /// Input row `i` is accumulated into output row `target[i]`; each output
    /// row is divided by the number of contributions it received.
    ScatterMeanRows { target: Arc<Vec<Option<usize>>>, rows: usize },
    Reshape { shape: Vec<usize> },
    Sum,
    /// Soft-clipped SI-SNR of `est` against `target`, in dB.
    SiSnr { tau: f64 },
}

/// Name of every op, in declaration order.
pub const OP_NAMES: [&str; 24] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "mul_rows",
    "relu",
    "prelu",
    "softmax_rows",
    "layer_norm",
    "l2_normalize_rows",
    "sparse_attention",
    "conv1d",
    "conv1d_transpose",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "gather_rows",
    "scatter_mean_rows",
    "reshape",
    "sum",
    "si_snr",
];

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias => "add_bias",
            Op::MulRows => "mul_rows",
            Op::Relu => "relu",
            Op::Prelu => "prelu",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormalizeRows => "l2_normalize_rows",
            Op::SparseAttention { .. } => "sparse_attention",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv1dTranspose { .. } => "conv1d_transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterMeanRows { .. } => "scatter_mean_rows",
            Op::Reshape { .. } => "reshape",
            Op::Sum => "sum",
            Op::SiSnr { .. } => "si_snr",
        }
    }

    pub fn forward(&self, inputs: &[&NdArray]) -> Result<NdArray> {
        let out = match self {
            Op::MatMul { ta, tb, alpha } => {
                let (m, k, n) = matmul_dims(inputs[0], *ta, inputs[1], *tb)?;
                let mut out = vec![0.0; m * n];
                gemm(*alpha, inputs[0], *ta, inputs[1], *tb, 0.0, &mut out);
                arena::add_macs((m * k * n) as u64);
                NdArray::from_parts(vec![m, n], out)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                same_shape(self.name(), a, b)?;
                match self {
                    Op::Add => a.zip_map(b, |x, y| x + y),
                    Op::Sub => a.zip_map(b, |x, y| x - y),
                    _ => a.zip_map(b, |x, y| x * y),
                }
            }
            Op::Scale(c) => inputs[0].map(|x| c * x),
            Op::AddBias => {
                let (x, b) = (inputs[0], inputs[1]);
                if b.len() != x.cols() {
                    return Err(mismatch("add_bias", x, b));
                }
                let mut out = x.clone();
                for i in 0..x.rows() {
                    for (o, bb) in out.row_mut(i).iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
                out
            }
            Op::MulRows => {
                let (x, w) = (inputs[0], inputs[1]);
                if w.len() != x.rows() {
                    return Err(mismatch("mul_rows", x, w));
                }
                let mut out = x.clone();
                for i in 0..x.rows() {
                    let s = w.data()[i];
                    out.row_mut(i).iter_mut().for_each(|o| *o *= s);
                }
                out
            }
            Op::Relu => inputs[0].map(|x| x.max(0.0)),
            Op::Prelu => {
                let (x, slope) = (inputs[0], inputs[1]);
                if slope.len() != x.cols() {
                    return Err(mismatch("prelu", x, slope));
                }
                let mut out = x.clone();
                for i in 0..x.rows() {
                    for (o, s) in out.row_mut(i).iter_mut().zip(slope.data()) {
                        if *o <= 0.0 {
                            *o *= s;
                        }
                    }
                }
                out
            }
            Op::SoftmaxRows => softmax_rows(inputs[0]),
            Op::LayerNorm { eps } => {
                let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
                let n = x.shape()[x.rank() - 1];
                if gain.len() != n || bias.len() != n {
                    return Err(mismatch("layer_norm", x, gain));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(n) {
                    let (mean, inv) = row_moments(row, *eps);
                    for ((o, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
                        *o = (*o - mean) * inv * g + b;
                    }
                }
                out
            }
            Op::L2NormalizeRows => {
                let mut out = inputs[0].clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    let n = row_norm(row);
                    row.iter_mut().for_each(|x| *x /= n);
                }
                out
            }
            Op::SparseAttention { nbrs, scale } => {
                sparse_attention_forward(inputs[0], inputs[1], inputs[2], nbrs, *scale)?
            }
            Op::Conv1d { stride } => conv1d_forward(inputs[0], inputs[1], *stride)?,
            Op::Conv1dTranspose { stride } => conv1d_transpose_forward(inputs[0], inputs[1], *stride)?,
            Op::SliceRows { start, len } => {
                let x = inputs[0];
                if start + len > x.rows() || *len == 0 {
                    return Err(Error::InvalidShape {
                        op: "slice_rows",
                        shape: x.shape().to_vec(),
                        reason: "row range out of bounds",
                    });
                }
                let c = x.cols();
                let mut shape = x.shape().to_vec();
                shape[0] = *len;
                NdArray::from_parts(shape, x.data()[start * c..(start + len) * c].to_vec())
            }
            Op::SliceCols { start, len } => {
                let x = inputs[0];
                if x.rank() != 2 || start + len > x.cols() || *len == 0 {
                    return Err(Error::InvalidShape {
                        op: "slice_cols",
                        shape: x.shape().to_vec(),
                        reason: "column range out of bounds",
                    });
                }
                let mut out = Vec::with_capacity(x.rows() * len);
                for i in 0..x.rows() {
                    out.extend_from_slice(&x.row(i)[*start..start + len]);
                }
                NdArray::from_parts(vec![x.rows(), *len], out)
            }
            Op::ConcatRows => {
                let c = inputs[0].cols();
                if inputs.iter().any(|x| x.cols() != c || x.rank() != 2) {
                    return Err(mismatch("concat_rows", inputs[0], inputs[inputs.len() - 1]));
                }
                let rows = inputs.iter().map(|x| x.rows()).sum();
                let mut out = Vec::with_capacity(rows * c);
                for x in inputs {
                    out.extend_from_slice(x.data());
                }
                NdArray::from_parts(vec![rows, c], out)
            }
            Op::ConcatCols => {
                let r = inputs[0].rows();
                if inputs.iter().any(|x| x.rows() != r || x.rank() != 2) {
                    return Err(mismatch("concat_cols", inputs[0], inputs[inputs.len() - 1]));
                }
                let cols: usize = inputs.iter().map(|x| x.cols()).sum();
                let mut out = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for x in inputs {
                        out.extend_from_slice(x.row(i));
                    }
                }
                NdArray::from_parts(vec![r, cols], out)
            }
            Op::GatherRows { index } => {
                let x = inputs[0];
                let c = x.cols();
                if index.iter().flatten().any(|&i| i >= x.rows()) || index.is_empty() {
                    return Err(Error::InvalidShape {
                        op: "gather_rows",
                        shape: x.shape().to_vec(),
                        reason: "gather index out of bounds",
                    });
                }
                let mut out = vec![0.0; index.len() * c];
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        out[r * c..(r + 1) * c].copy_from_slice(x.row(*s));
                    }
                }
                NdArray::from_parts(vec![index.len(), c], out)
            }
            Op::ScatterMeanRows { target, rows } => {
                let x = inputs[0];
                if target.len() != x.rows() || target.iter().flatten().any(|&t| t >= *rows) {
                    return Err(Error::InvalidShape {
                        op: "scatter_mean_rows",
                        shape: x.shape().to_vec(),
                        reason: "scatter target does not match input rows",
                    });
                }
                let c = x.cols();
                let counts = scatter_counts(target, *rows);
                let mut out = vec![0.0; rows * c];
                for (i, t) in target.iter().enumerate() {
                    if let Some(t) = t {
                        for (o, v) in out[t * c..(t + 1) * c].iter_mut().zip(x.row(i)) {
                            *o += v;
                        }
                    }
                }
                for (r, &n) in counts.iter().enumerate() {
                    if n > 1 {
                        let inv = 1.0 / n as f64;
                        out[r * c..(r + 1) * c].iter_mut().for_each(|o| *o *= inv);
                    }
                }
                NdArray::from_parts(vec![*rows, c], out)
            }
            Op::Reshape { shape } => inputs[0].clone().reshape(shape)?,
            Op::Sum => NdArray::scalar(inputs[0].sum()),
            Op::SiSnr { tau } => {
                let (est, target) = (inputs[0], inputs[1]);
                if est.len() != target.len() {
                    return Err(Error::LengthMismatch(est.len(), target.len()));
                }
                NdArray::scalar(objectives::si_snr_soft(est.data(), target.data(), *tau)?)
            }
        };
        Ok(out)
    }

    /// Gradients of a scalar objective with respect to each input, given the
    /// gradient `g` with respect to this op's output. `None` entries mark
    /// inputs the op does not differentiate through.
    pub fn backward(&self, inputs: &[&NdArray], out: &NdArray, g: &NdArray) -> Vec<Option<NdArray>> {
        match self {
            Op::MatMul { ta, tb, alpha } => {
                let (a, b) = (inputs[0], inputs[1]);
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; b.len()];
                match (ta, tb) {
                    (false, false) => gemm(*alpha, g, false, b, true, 0.0, &mut da),
                    (false, true) => gemm(*alpha, g, false, b, false, 0.0, &mut da),
                    (true, false) => gemm(*alpha, b, false, g, true, 0.0, &mut da),
                    (true, true) => gemm(*alpha, b, true, g, true, 0.0, &mut da),
                }
                match (ta, tb) {
                    (false, false) => gemm(*alpha, a, true, g, false, 0.0, &mut db),
                    (true, false) => gemm(*alpha, a, false, g, false, 0.0, &mut db),
                    (false, true) => gemm(*alpha, g, true, a, false, 0.0, &mut db),
                    (true, true) => gemm(*alpha, g, true, a, true, 0.0, &mut db),
                }
                vec![
                    Some(NdArray::from_parts(a.shape().to_vec(), da)),
                    Some(NdArray::from_parts(b.shape().to_vec(), db)),
                ]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Op::Mul => vec![
                Some(g.zip_map(inputs[1], |a, b| a * b)),
                Some(g.zip_map(inputs[0], |a, b| a * b)),
            ],
            Op::Scale(c) => vec![Some(g.map(|x| c * x))],
            Op::AddBias => {
                let mut db = NdArray::zeros(inputs[1].shape());
                for i in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                vec![Some(g.clone()), Some(db)]
            }
            Op::MulRows => {
                let (x, w) = (inputs[0], inputs[1]);
                let mut dx = g.clone();
                let mut dw = NdArray::zeros(w.shape());
                for i in 0..x.rows() {
                    let s = w.data()[i];
                    dx.row_mut(i).iter_mut().for_each(|d| *d *= s);
                    dw.data_mut()[i] = g.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
                }
                vec![Some(dx), Some(dw)]
            }
            Op::Relu => vec![Some(g.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Prelu => {
                let (x, slope) = (inputs[0], inputs[1]);
                let mut dx = g.clone();
                let mut ds = NdArray::zeros(slope.shape());
                for i in 0..x.rows() {
                    let dr = dx.row_mut(i);
                    for (j, (d, xv)) in dr.iter_mut().zip(x.row(i)).enumerate() {
                        if *xv <= 0.0 {
                            ds.data_mut()[j] += *d * xv;
                            *d *= slope.data()[j];
                        }
                    }
                }
                vec![Some(dx), Some(ds)]
            }
            Op::SoftmaxRows => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (d, yv) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = yv * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (inputs[0], inputs[1]);
                let n = gain.len();
                let mut dx = NdArray::zeros(x.shape());
                let mut dgain = NdArray::zeros(gain.shape());
                let mut dbias = NdArray::zeros(gain.shape());
                let nf = n as f64;
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for ((xr, gr), dr) in x
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.data_mut().chunks_mut(n))
                {
                    let (mean, inv) = row_moments(xr, *eps);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..n {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = gr[j] * gain.data()[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                        dgain.data_mut()[j] += gr[j] * xhat[j];
                        dbias.data_mut()[j] += gr[j];
                    }
                    for j in 0..n {
                        dr[j] = inv / nf * (nf * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }
            Op::L2NormalizeRows => {
                let x = inputs[0];
                let mut dx = g.clone();
                for i in 0..x.rows() {
                    let n = row_norm(x.row(i));
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (d, yv) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = (*d - yv * dot) / n;
                    }
                }
                vec![Some(dx)]
            }
            Op::SparseAttention { nbrs, scale } => {
                let (dq, dk, dv) = sparse_attention_backward(inputs[0], inputs[1], inputs[2], out, g, nbrs, *scale);
                vec![Some(dq), Some(dk), Some(dv)]
            }
            Op::Conv1d { stride } => {
                let (x, w) = (inputs[0], inputs[1]);
                let (f, kw) = (w.shape()[0], w.len() / w.shape()[0]);
                let tp = g.rows();
                let mut dx = NdArray::zeros(x.shape());
                let mut dw = NdArray::zeros(w.shape());
                for t in 0..tp {
                    let base = t * stride;
                    let gr = g.row(t);
                    for (fi, &gv) in gr.iter().enumerate().take(f) {
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &w.data()[fi * kw..(fi + 1) * kw];
                        for k in 0..kw {
                            dx.data_mut()[base + k] += gv * wr[k];
                            dw.data_mut()[fi * kw + k] += gv * x.data()[base + k];
                        }
                    }
                }
                vec![Some(dx), Some(dw)]
            }
            Op::Conv1dTranspose { stride } => {
                let (x, w) = (inputs[0], inputs[1]);
                let (f, kw) = (w.shape()[0], w.len() / w.shape()[0]);
                let mut dx = NdArray::zeros(x.shape());
                let mut dw = NdArray::zeros(w.shape());
                for t in 0..x.rows() {
                    let gs = &g.data()[t * stride..t * stride + kw];
                    let xr = x.row(t);
                    let dxr = dx.row_mut(t);
                    for fi in 0..f {
                        let wr = &w.data()[fi * kw..(fi + 1) * kw];
                        dxr[fi] = wr.iter().zip(gs).map(|(a, b)| a * b).sum();
                    }
                    for fi in 0..f {
                        let xv = xr[fi];
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw.data_mut()[fi * kw..(fi + 1) * kw].iter_mut().zip(gs) {
                            *d += xv * gv;
                        }
                    }
                }
                vec![Some(dx), Some(dw)]
            }
            Op::SliceRows { start, .. } => {
                let x = inputs[0];
                let c = x.cols();
                let mut dx = NdArray::zeros(x.shape());
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![Some(dx)]
            }
            Op::SliceCols { start, len } => {
                let x = inputs[0];
                let mut dx = NdArray::zeros(x.shape());
                for i in 0..x.rows() {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                vec![Some(dx)]
            }
            Op::ConcatRows => {
                let c = g.cols();
                let mut off = 0;
                inputs
                    .iter()
                    .map(|x| {
                        let n = x.rows() * c;
                        let d = NdArray::from_parts(x.shape().to_vec(), g.data()[off..off + n].to_vec());
                        off += n;
                        Some(d)
                    })
                    .collect()
            }
            Op::ConcatCols => {
                let mut off = 0;
                inputs
                    .iter()
                    .map(|x| {
                        let c = x.cols();
                        let mut d = Vec::with_capacity(x.len());
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        Some(NdArray::from_parts(x.shape().to_vec(), d))
                    })
                    .collect()
            }
            Op::GatherRows { index } => {
                let x = inputs[0];
                let c = x.cols();
                let mut dx = NdArray::zeros(x.shape());
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        for (d, v) in dx.row_mut(*s).iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *d += v;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::ScatterMeanRows { target, rows } => {
                let x = inputs[0];
                let counts = scatter_counts(target, *rows);
                let mut dx = NdArray::zeros(x.shape());
                for (i, t) in target.iter().enumerate() {
                    if let Some(t) = t {
                        let inv = 1.0 / counts[*t] as f64;
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(*t)) {
                            *d = v * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape { .. } => {
                let dx = NdArray::from_parts(inputs[0].shape().to_vec(), g.data().to_vec());
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(NdArray::full(inputs[0].shape(), g.data()[0]))],
            Op::SiSnr { tau } => {
                let (est, target) = (inputs[0], inputs[1]);
                let grad = objectives::si_snr_soft_grad(est.data(), target.data(), *tau);
                let s = g.data()[0];
                let dx = NdArray::from_parts(est.shape().to_vec(), grad.into_iter().map(|v| v * s).collect());
                vec![Some(dx), None]
            }
        }
    }
}

fn mismatch(op: &'static str, a: &NdArray, b: &NdArray) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn same_shape(op: &'static str, a: &NdArray, b: &NdArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    Ok(())
}

fn logical_dims(a: &NdArray, t: bool) -> (usize, usize) {
    if t {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    }
}

fn matmul_dims(a: &NdArray, ta: bool, b: &NdArray, tb: bool) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k) = logical_dims(a, ta);
    let (k2, n) = logical_dims(b, tb);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    Ok((m, k, n))
}

/// `c = alpha * op(a) * op(b) + beta * c`, row-major.
pub(crate) fn gemm(alpha: f64, a: &NdArray, ta: bool, b: &NdArray, tb: bool, beta: f64, c: &mut [f64]) {
    let (m, k) = logical_dims(a, ta);
    let (_, n) = logical_dims(b, tb);
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
    // whose lengths were checked against (m, k, n) by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows(x: &NdArray) -> NdArray {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}

fn scatter_counts(target: &[Option<usize>], rows: usize) -> Vec<usize> {
    let mut counts = vec![0usize; rows];
    for t in target.iter().flatten() {
        counts[*t] += 1;
    }
    counts
}

fn sparse_attention_forward(
    q: &NdArray,
    k: &NdArray,
    v: &NdArray,
    nbrs: &Neighbors,
    scale: f64,
) -> Result<NdArray> {
    let d = q.cols();
    if k.cols() != d || v.rows() != k.rows() || nbrs.rows() != q.rows() {
        return Err(mismatch("sparse_attention", q, k));
    }
    if nbrs.indices.iter().any(|&j| j >= k.rows()) {
        return Err(Error::InvalidShape {
            op: "sparse_attention",
            shape: k.shape().to_vec(),
            reason: "neighbour index out of bounds",
        });
    }
    let dv = v.cols();
    let mut out = vec![0.0; q.rows() * (dv + 1)];
    let mut scores = Vec::new();
    for t in 0..q.rows() {
        let list = nbrs.row(t);
        if list.is_empty() {
            return Err(Error::InvalidShape {
                op: "sparse_attention",
                shape: q.shape().to_vec(),
                reason: "empty neighbour list",
            });
        }
        let qt = q.row(t);
        scores.clear();
        scores.extend(list.iter().map(|&j| scale * dot(qt, k.row(j))));
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let orow = &mut out[t * (dv + 1)..(t + 1) * (dv + 1)];
        for (&j, &p) in list.iter().zip(scores.iter()) {
            let w = p / z;
            for (o, vv) in orow[..dv].iter_mut().zip(v.row(j)) {
                *o += w * vv;
            }
        }
        orow[dv] = m + z.ln();
    }
    arena::add_macs((nbrs.pairs() * (d + dv)) as u64);
    Ok(NdArray::from_parts(vec![q.rows(), dv + 1], out))
}

fn sparse_attention_backward(
    q: &NdArray,
    k: &NdArray,
    v: &NdArray,
    out: &NdArray,
    g: &NdArray,
    nbrs: &Neighbors,
    scale: f64,
) -> (NdArray, NdArray, NdArray) {
    let dv_cols = v.cols();
    let mut dq = NdArray::zeros(q.shape());
    let mut dk = NdArray::zeros(k.shape());
    let mut dv = NdArray::zeros(v.shape());
    let mut ps = Vec::new();
    for t in 0..q.rows() {
        let list = nbrs.row(t);
        let qt = q.row(t);
        let orow = out.row(t);
        let grow = g.row(t);
        let (go, gl) = (&grow[..dv_cols], grow[dv_cols]);
        let lse = orow[dv_cols];
        let go_o = dot(go, &orow[..dv_cols]);
        ps.clear();
        ps.extend(list.iter().map(|&j| (scale * dot(qt, k.row(j)) - lse).exp()));
        for (&j, &p) in list.iter().zip(ps.iter()) {
            let dp = dot(go, v.row(j));
            let ds = p * (dp - go_o) + gl * p;
            let c = scale * ds;
            for (d, kv) in dq.row_mut(t).iter_mut().zip(k.row(j)) {
                *d += c * kv;
            }
            for (d, qv) in dk.row_mut(j).iter_mut().zip(qt) {
                *d += c * qv;
            }
            for (d, gv) in dv.row_mut(j).iter_mut().zip(go) {
                *d += p * gv;
            }
        }
    }
    (dq, dk, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid strided convolution of a mono signal with `F` single-channel
/// filters; output is time-major `[T' × F]`.
fn conv1d_forward(x: &NdArray, w: &NdArray, stride: usize) -> Result<NdArray> {
    if x.rank() != 1 || w.rank() != 3 || w.shape()[1] != 1 || stride == 0 {
        return Err(mismatch("conv1d", x, w));
    }
    let (f, kw) = (w.shape()[0], w.shape()[2]);
    let t = x.len();
    if t < kw {
        return Err(Error::InputTooShort { len: t, kernel: kw });
    }
    let tp = conv_out_len(t, kw, stride);
    let mut out = vec![0.0; tp * f];
    for ti in 0..tp {
        let seg = &x.data()[ti * stride..ti * stride + kw];
        let orow = &mut out[ti * f..(ti + 1) * f];
        for (fi, o) in orow.iter_mut().enumerate() {
            *o = dot(seg, &w.data()[fi * kw..(fi + 1) * kw]);
        }
    }
    arena::add_macs((tp * f * kw) as u64);
    Ok(NdArray::from_parts(vec![tp, f], out))
}

fn conv1d_transpose_forward(x: &NdArray, w: &NdArray, stride: usize) -> Result<NdArray> {
    if x.rank() != 2 || w.rank() != 3 || w.shape()[1] != 1 || x.cols() != w.shape()[0] || stride == 0 {
        return Err(mismatch("conv1d_transpose", x, w));
    }
    let (f, kw) = (w.shape()[0], w.shape()[2]);
    let tp = x.rows();
    let t = (tp - 1) * stride + kw;
    let mut out = vec![0.0; t];
    for ti in 0..tp {
        let xr = x.row(ti);
        let seg = &mut out[ti * stride..ti * stride + kw];
        for (fi, &xv) in xr.iter().enumerate().take(f) {
            if xv == 0.0 {
                continue;
            }
            for (o, wv) in seg.iter_mut().zip(&w.data()[fi * kw..(fi + 1) * kw]) {
                *o += xv * wv;
            }
        }
    }
    arena::add_macs((tp * f * kw) as u64);
    Ok(NdArray::from_parts(vec![t], out))
}

/// Output length of a valid strided convolution.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize) -> usize {
    (t - kernel) / stride + 1
}

/// Signal length produced by the transposed convolution.
pub fn conv_transpose_len(frames: usize, kernel: usize, stride: usize) -> usize {
    (frames - 1) * stride + kernel
}
