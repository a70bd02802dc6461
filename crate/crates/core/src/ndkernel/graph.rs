//! Forward evaluation and tape-based reverse-mode differentiation behind a
//! single [`Graph`] interface, so model code is written once and runs either
//! as plain inference ([`Eval`]) or recorded for training ([`Tape`]).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::array::NdArray;
use super::ops::{Neighbors, Op};
use crate::error::Result;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A learnable array with a process-unique identity.
#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    value: Arc<NdArray>,
}

impl Param {
    pub fn new(value: NdArray) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value: Arc::new(value),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn value(&self) -> &NdArray {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Mutable access; copies the storage if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut NdArray {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: NdArray) {
        self.value = Arc::new(value);
    }
}

pub trait Graph {
    type V: Clone;

    /// Non-differentiable input.
    fn constant(&mut self, a: NdArray) -> Self::V;
    fn param(&mut self, p: &Param) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a NdArray;
    fn apply(&mut self, op: Op, inputs: &[&Self::V]) -> Result<Self::V>;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::MatMul { ta: false, tb: false, alpha: 1.0 }, &[a, b])
    }

    /// `alpha * a * bᵀ`
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V, alpha: f64) -> Result<Self::V> {
        self.apply(Op::MatMul { ta: false, tb: true, alpha }, &[a, b])
    }

    /// `aᵀ * b`
    fn matmul_tn(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::MatMul { ta: true, tb: false, alpha: 1.0 }, &[a, b])
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mul, &[a, b])
    }

    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V> {
        self.apply(Op::Scale(c), &[a])
    }

    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::AddBias, &[x, b])
    }

    fn mul_rows(&mut self, x: &Self::V, w: &Self::V) -> Result<Self::V> {
        self.apply(Op::MulRows, &[x, w])
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Relu, &[x])
    }

    fn prelu(&mut self, x: &Self::V, slope: &Self::V) -> Result<Self::V> {
        self.apply(Op::Prelu, &[x, slope])
    }

    fn softmax_rows(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::SoftmaxRows, &[x])
    }

    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V, eps: f64) -> Result<Self::V> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    fn l2_normalize_rows(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::L2NormalizeRows, &[x])
    }

    fn sparse_attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        nbrs: Arc<Neighbors>,
        scale: f64,
    ) -> Result<Self::V> {
        self.apply(Op::SparseAttention { nbrs, scale }, &[q, k, v])
    }

    fn conv1d(&mut self, x: &Self::V, filters: &Self::V, stride: usize) -> Result<Self::V> {
        self.apply(Op::Conv1d { stride }, &[x, filters])
    }

    fn conv1d_transpose(&mut self, x: &Self::V, filters: &Self::V, stride: usize) -> Result<Self::V> {
        self.apply(Op::Conv1dTranspose { stride }, &[x, filters])
    }

    fn slice_rows(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        self.apply(Op::SliceRows { start, len }, &[x])
    }

    fn slice_cols(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        self.apply(Op::SliceCols { start, len }, &[x])
    }

    fn concat_rows(&mut self, xs: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Self::V> = xs.iter().collect();
        self.apply(Op::ConcatRows, &refs)
    }

    fn concat_cols(&mut self, xs: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Self::V> = xs.iter().collect();
        self.apply(Op::ConcatCols, &refs)
    }

    fn gather_rows(&mut self, x: &Self::V, index: Arc<Vec<Option<usize>>>) -> Result<Self::V> {
        self.apply(Op::GatherRows { index }, &[x])
    }

    fn scatter_mean_rows(&mut self, x: &Self::V, target: Arc<Vec<Option<usize>>>, rows: usize) -> Result<Self::V> {
        self.apply(Op::ScatterMeanRows { target, rows }, &[x])
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    fn sum(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sum, &[x])
    }

    fn si_snr(&mut self, est: &Self::V, target: &Self::V, tau: f64) -> Result<Self::V> {
        self.apply(Op::SiSnr { tau }, &[est, target])
    }
}

/// Forward-only evaluation; intermediates are freed as soon as they are
/// no longer referenced.
#[derive(Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type V = Arc<NdArray>;

    fn constant(&mut self, a: NdArray) -> Self::V {
        Arc::new(a)
    }

    fn param(&mut self, p: &Param) -> Self::V {
        p.value.clone()
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a NdArray {
        v
    }

    fn apply(&mut self, op: Op, inputs: &[&Self::V]) -> Result<Self::V> {
        let arrays: Vec<&NdArray> = inputs.iter().map(|a| a.as_ref()).collect();
        Ok(Arc::new(op.forward(&arrays)?))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Option<Op>,
    inputs: Vec<Var>,
    value: Arc<NdArray>,
    requires_grad: bool,
}

/// Ordered record of executed ops for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, a: NdArray) -> Var {
        self.push(None, Vec::new(), Arc::new(a), true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(Op::name)
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<Var>, value: Arc<NdArray>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagate gradients from a scalar `loss` back to every recorded value.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        let root = &self.nodes[loss.0];
        grads[loss.0] = Some(NdArray::full(root.value.shape(), 1.0));
        let mut visited = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            visited.push(idx);
            let inputs: Vec<&NdArray> = node.inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
            let in_grads = op.backward(&inputs, &node.value, &g);
            for (var, dg) in node.inputs.iter().zip(in_grads) {
                let Some(dg) = dg else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.params.clone(),
            visited,
        }
    }
}

impl Graph for Tape {
    type V = Var;

    fn constant(&mut self, a: NdArray) -> Var {
        self.push(None, Vec::new(), Arc::new(a), false)
    }

    fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.push(None, Vec::new(), p.value.clone(), true);
        self.params.insert(p.id, v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a NdArray {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let arrays: Vec<&NdArray> = inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
        let out = op.forward(&arrays)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Some(op), inputs.iter().map(|v| **v).collect(), Arc::new(out), requires_grad))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<NdArray>>,
    params: HashMap<u64, Var>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; exactly zero if the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> NdArray {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| NdArray::zeros(&self.shapes[v.0]))
    }

    /// Gradient with respect to a parameter, or `None` if it never entered
    /// the tape.
    pub fn param(&self, p: &Param) -> Option<NdArray> {
        self.params.get(&p.id).map(|&v| self.wrt(v))
    }

    /// Op nodes in the order their backward rules ran.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_runs_in_reverse_order() {
        let mut t = Tape::new();
        let a = t.leaf(NdArray::vector(vec![1.0, 2.0]));
        let b = t.scale(&a, 2.0).unwrap();
        let c = t.relu(&b).unwrap();
        let d = t.sum(&c).unwrap();
        let g = t.backward(d);
        assert_eq!(g.visited(), &[d.index(), c.index(), b.index()]);
        assert_eq!(g.wrt(a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn unused_values_have_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(NdArray::vector(vec![1.0, 2.0]));
        let unused = t.leaf(NdArray::vector(vec![3.0, 4.0, 5.0]));
        let s = t.sum(&a).unwrap();
        let g = t.backward(s);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let p = Param::new(NdArray::vector(vec![3.0]));
        let mut t = Tape::new();
        let a = t.param(&p);
        let b = t.param(&p);
        assert_eq!(a, b);
        let m = t.mul(&a, &b).unwrap();
        let s = t.sum(&m).unwrap();
        let g = t.backward(s);
        assert_eq!(g.param(&p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn eval_and_tape_agree() {
        let x = NdArray::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut e = Eval;
        let ev = e.constant(x.clone());
        let eo = e.softmax_rows(&ev).unwrap();
        let mut t = Tape::new();
        let tv = t.leaf(x);
        let to = t.softmax_rows(&tv).unwrap();
        assert_eq!(e.value(&eo), t.value(&to));
    }
}
