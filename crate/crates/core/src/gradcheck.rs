//! Finite-difference verification of reverse-mode gradients.
//!
//! Every check compares an analytical gradient `a` against a central
//! difference `n` and reports `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-12)`.
//! Scalar losses are formed as `sum(out ⊙ R)` with a seeded random `R`, so
//! every output element contributes.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionKind, AttentionSpec, AttentionWeights};
use crate::config::{Chunking, InterAttention, SepformerConfig, Variant};
use crate::dualpath::{sepformer_block, ChunkGeometry, SepformerBlockParams};
use crate::encoder_stack::{transformer_layer, transformer_stack, TransformerLayerParams, TransformerStackParams};
use crate::error::{Error, Result};
use crate::ndkernel::{Graph, NdArray, Neighbors, Param, Tape, Var, LN_EPS, OP_NAMES};
use crate::objectives::SI_SNR_TAU;
use crate::sepmodel::Sepformer;
use crate::train::pit_loss_graph;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Entries sampled per tensor in the larger checks.
const SAMPLES_PER_TENSOR: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub suite: &'static str,
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

impl GradReport {
    fn new(suite: &'static str, name: impl Into<String>, rel_error: f64) -> Self {
        GradReport {
            suite,
            name: name.into(),
            rel_error,
            passed: rel_error < TOLERANCE,
        }
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-12)
}

/// Compare `grad_fn` against central differences of `value_fn` over every
/// entry of every input.
pub fn check_gradient(
    inputs: &[NdArray],
    value_fn: impl Fn(&[NdArray]) -> Result<f64>,
    grad_fn: impl Fn(&[NdArray]) -> Result<Vec<NdArray>>,
    step: f64,
) -> Result<f64> {
    let analytic = grad_fn(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::ShapeMismatch {
            op: "gradcheck",
            left: vec![analytic.len()],
            right: vec![inputs.len()],
        });
    }
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "gradcheck",
                left: grad.shape().to_vec(),
                right: inputs[i].shape().to_vec(),
            });
        }
        for e in 0..inputs[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let up = value_fn(&work)?;
            work[i].data_mut()[e] = orig - step;
            let down = value_fn(&work)?;
            work[i].data_mut()[e] = orig;
            n.push((up - down) / (2.0 * step));
            a.push(grad.data()[e]);
        }
    }
    Ok(relative_error(&a, &n))
}

/// Something holding learnable parameters.
pub trait ParamSet {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)>;
}

impl ParamSet for () {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        Vec::new()
    }
}

impl ParamSet for AttentionWeights {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.params_mut().into_iter().map(|(n, p)| (n.to_string(), p)).collect()
    }
}

impl ParamSet for TransformerLayerParams {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.params_mut()
    }
}

impl ParamSet for TransformerStackParams {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.params_mut()
    }
}

impl ParamSet for SepformerBlockParams {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.params_mut()
    }
}

impl ParamSet for Sepformer {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.params_mut()
    }
}

/// Which entries of a tensor to probe.
fn probe_entries(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => sample(rng, len, m).into_vec(),
        _ => (0..len).collect(),
    }
}

fn eval_loss<M>(
    model: &M,
    inputs: &[NdArray],
    loss: &impl Fn(&mut Tape, &M, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let l = loss(&mut tape, model, &vars)?;
    Ok(tape.value(&l).data()[0])
}

/// Check gradients of `loss` with respect to leaf `inputs` and to the
/// parameters of `model` whose name passes `select`. With `max_entries`
/// set, that many seeded entries per tensor are probed.
pub fn check_tape<M: ParamSet>(
    model: &mut M,
    inputs: &[NdArray],
    loss: impl Fn(&mut Tape, &M, &[Var]) -> Result<Var>,
    select: impl Fn(&str) -> bool,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let l = loss(&mut tape, model, &vars)?;
    let grads = tape.backward(l);
    let input_grads: Vec<NdArray> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let param_grads: Vec<Option<NdArray>> = model
        .named_params_mut()
        .into_iter()
        .map(|(name, p)| {
            select(&name).then(|| grads.param(p).unwrap_or_else(|| NdArray::zeros(p.shape())))
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (i, g) in input_grads.iter().enumerate() {
        for e in probe_entries(g.len(), max_entries, &mut rng) {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + DEFAULT_STEP;
            let up = eval_loss(model, &work, &loss)?;
            work[i].data_mut()[e] = orig - DEFAULT_STEP;
            let down = eval_loss(model, &work, &loss)?;
            work[i].data_mut()[e] = orig;
            n.push((up - down) / (2.0 * DEFAULT_STEP));
            a.push(g.data()[e]);
        }
    }
    for (pi, g) in param_grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for e in probe_entries(g.len(), max_entries, &mut rng) {
            let nudge = |m: &mut M, delta: f64| {
                let mut ps = m.named_params_mut();
                ps[pi].1.value_mut().data_mut()[e] += delta;
            };
            nudge(model, DEFAULT_STEP);
            let up = eval_loss(model, inputs, &loss)?;
            nudge(model, -2.0 * DEFAULT_STEP);
            let down = eval_loss(model, inputs, &loss)?;
            nudge(model, DEFAULT_STEP);
            n.push((up - down) / (2.0 * DEFAULT_STEP));
            a.push(g.data()[e]);
        }
    }
    Ok(relative_error(&a, &n))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Uniform values with magnitude in `[0.1, 1)`, away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    random(shape, rng).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// `sum(out ⊙ R)` with `R` drawn from `seed`.
pub fn weighted_sum<G: Graph>(g: &mut G, out: &G::V, seed: u64) -> Result<G::V> {
    let shape = g.value(out).shape().to_vec();
    let r = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let r = g.constant(r);
    let p = g.mul(out, &r)?;
    g.sum(&p)
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, rng);
    type LossFn = Box<dyn Fn(&mut Tape, &(), &[Var]) -> Result<Var>>;
    let (inputs, f): (Vec<NdArray>, LossFn) = match name {
        "matmul" => (
            vec![r(&[3, 4], rng), r(&[4, 5], rng), r(&[5, 4], rng)],
            Box::new(|g, _, v| {
                let ab = g.matmul(&v[0], &v[1])?;
                let nt = g.matmul_nt(&v[0], &v[2], 0.7)?;
                let tn = g.matmul_tn(&v[0], &nt)?;
                let a = weighted_sum(g, &ab, 1)?;
                let b = weighted_sum(g, &tn, 2)?;
                g.add(&a, &b)
            }),
        ),
        "add" | "sub" | "mul" => {
            let which = name.to_string();
            (
                vec![r(&[3, 4], rng), r(&[3, 4], rng)],
                Box::new(move |g, _, v| {
                    let o = match which.as_str() {
                        "add" => g.add(&v[0], &v[1])?,
                        "sub" => g.sub(&v[0], &v[1])?,
                        _ => g.mul(&v[0], &v[1])?,
                    };
                    weighted_sum(g, &o, 3)
                }),
            )
        }
        "scale" => (
            vec![r(&[3, 4], rng)],
            Box::new(|g, _, v| {
                let o = g.scale(&v[0], -1.7)?;
                weighted_sum(g, &o, 4)
            }),
        ),
        "add_bias" => (
            vec![r(&[3, 4], rng), r(&[4], rng)],
            Box::new(|g, _, v| {
                let o = g.add_bias(&v[0], &v[1])?;
                weighted_sum(g, &o, 5)
            }),
        ),
        "mul_rows" => (
            vec![r(&[3, 4], rng), r(&[3], rng)],
            Box::new(|g, _, v| {
                let o = g.mul_rows(&v[0], &v[1])?;
                weighted_sum(g, &o, 6)
            }),
        ),
        "relu" => (
            vec![off_kink(&[4, 5], rng)],
            Box::new(|g, _, v| {
                let o = g.relu(&v[0])?;
                weighted_sum(g, &o, 7)
            }),
        ),
        "prelu" => (
            vec![off_kink(&[4, 5], rng), r(&[5], rng)],
            Box::new(|g, _, v| {
                let o = g.prelu(&v[0], &v[1])?;
                weighted_sum(g, &o, 8)
            }),
        ),
        "softmax_rows" => (
            vec![r(&[3, 5], rng).map(|x| 3.0 * x)],
            Box::new(|g, _, v| {
                let o = g.softmax_rows(&v[0])?;
                weighted_sum(g, &o, 9)
            }),
        ),
        "layer_norm" => (
            vec![r(&[4, 6], rng), r(&[6], rng), r(&[6], rng)],
            Box::new(|g, _, v| {
                let o = g.layer_norm(&v[0], &v[1], &v[2], LN_EPS)?;
                weighted_sum(g, &o, 10)
            }),
        ),
        "l2_normalize_rows" => (
            vec![off_kink(&[4, 3], rng)],
            Box::new(|g, _, v| {
                let o = g.l2_normalize_rows(&v[0])?;
                weighted_sum(g, &o, 11)
            }),
        ),
        "sparse_attention" => {
            let nbrs = Arc::new(Neighbors::from_lists(&[
                vec![0, 1],
                vec![0, 1, 2],
                vec![1, 2, 3, 4],
                vec![0, 3],
                vec![4],
            ]));
            (
                vec![r(&[5, 3], rng), r(&[5, 3], rng), r(&[5, 2], rng)],
                Box::new(move |g, _, v| {
                    let o = g.sparse_attention(&v[0], &v[1], &v[2], nbrs.clone(), 0.6)?;
                    weighted_sum(g, &o, 12)
                }),
            )
        }
        "conv1d" => (
            vec![r(&[21], rng), r(&[3, 1, 4], rng)],
            Box::new(|g, _, v| {
                let o = g.conv1d(&v[0], &v[1], 2)?;
                weighted_sum(g, &o, 13)
            }),
        ),
        "conv1d_transpose" => (
            vec![r(&[7, 3], rng), r(&[3, 1, 4], rng)],
            Box::new(|g, _, v| {
                let o = g.conv1d_transpose(&v[0], &v[1], 2)?;
                weighted_sum(g, &o, 14)
            }),
        ),
        "slice_rows" => (
            vec![r(&[6, 3], rng)],
            Box::new(|g, _, v| {
                let o = g.slice_rows(&v[0], 2, 3)?;
                weighted_sum(g, &o, 15)
            }),
        ),
        "slice_cols" => (
            vec![r(&[3, 6], rng)],
            Box::new(|g, _, v| {
                let o = g.slice_cols(&v[0], 1, 4)?;
                weighted_sum(g, &o, 16)
            }),
        ),
        "concat_rows" => (
            vec![r(&[2, 3], rng), r(&[4, 3], rng)],
            Box::new(|g, _, v| {
                let o = g.concat_rows(&[v[0], v[1], v[0]])?;
                weighted_sum(g, &o, 17)
            }),
        ),
        "concat_cols" => (
            vec![r(&[3, 2], rng), r(&[3, 4], rng)],
            Box::new(|g, _, v| {
                let o = g.concat_cols(&[v[1], v[0]])?;
                weighted_sum(g, &o, 18)
            }),
        ),
        "gather_rows" => {
            let idx = Arc::new(vec![Some(2), None, Some(0), Some(2), Some(3)]);
            (
                vec![r(&[4, 3], rng)],
                Box::new(move |g, _, v| {
                    let o = g.gather_rows(&v[0], idx.clone())?;
                    weighted_sum(g, &o, 19)
                }),
            )
        }
        "scatter_mean_rows" => {
            let tgt = Arc::new(vec![Some(0), Some(1), Some(1), None, Some(3), Some(1)]);
            (
                vec![r(&[6, 3], rng)],
                Box::new(move |g, _, v| {
                    let o = g.scatter_mean_rows(&v[0], tgt.clone(), 4)?;
                    weighted_sum(g, &o, 20)
                }),
            )
        }
        "reshape" => (
            vec![r(&[4, 3], rng)],
            Box::new(|g, _, v| {
                let o = g.reshape(&v[0], &[2, 6])?;
                let o = g.softmax_rows(&o)?;
                weighted_sum(g, &o, 21)
            }),
        ),
        "sum" => (
            vec![r(&[3, 4], rng)],
            Box::new(|g, _, v| {
                let s = g.sum(&v[0])?;
                g.mul(&s, &s)
            }),
        ),
        "si_snr" => {
            let target = r(&[40], rng);
            (
                vec![r(&[40], rng)],
                Box::new(move |g, _, v| {
                    let t = g.constant(target.clone());
                    let o = g.si_snr(&v[0], &t, SI_SNR_TAU)?;
                    weighted_sum(g, &o, 22)
                }),
            )
        }
        other => return Err(Error::InvalidConfig(format!("no gradient case for op `{other}`"))),
    };
    check_tape(&mut (), &inputs, f, |_| true, None, 0)
}

/// One report per primitive op.
pub fn ndkernel_suite() -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    OP_NAMES
        .iter()
        .map(|&name| Ok(GradReport::new("ndkernel", name, op_case(name, &mut rng)?)))
        .collect()
}

fn small_kinds(len: usize) -> [AttentionKind; 4] {
    [
        AttentionKind::Full,
        AttentionKind::Longformer {
            window: 3,
            global_every: Some(5),
        },
        AttentionKind::Linformer { k: 4, max_len: len },
        AttentionKind::Reformer {
            n_buckets: 4,
            n_rounds: 2,
            bucket_chunk: 4,
        },
    ]
}

/// Each attention variant, then a transformer layer, a stack and a
/// dual-path block, with respect to inputs and every weight.
pub fn attention_suite() -> Result<Vec<GradReport>> {
    let (len, d, heads) = (12, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[len, d], &mut rng);
    let mut out = Vec::new();
    for kind in small_kinds(len) {
        let spec = AttentionSpec::new(kind, heads, d)?.with_seed(3);
        let mut w = AttentionWeights::init(&spec, &mut rng);
        let err = check_tape(
            &mut w,
            std::slice::from_ref(&x),
            |g, w, v| {
                let o = attend(g, &v[0], w, &spec)?;
                weighted_sum(g, &o, 31)
            },
            |_| true,
            Some(SAMPLES_PER_TENSOR),
            1,
        )?;
        out.push(GradReport::new("attention", spec.kind.name(), err));
    }

    let full = AttentionSpec::new(AttentionKind::Full, heads, d)?;
    let mut layer = TransformerLayerParams::init(&full, 16, &mut rng);
    let err = check_tape(
        &mut layer,
        std::slice::from_ref(&x),
        |g, p, v| {
            let o = transformer_layer(g, &v[0], p, &full)?;
            weighted_sum(g, &o, 32)
        },
        |_| true,
        Some(SAMPLES_PER_TENSOR),
        2,
    )?;
    out.push(GradReport::new("attention", "transformer_layer", err));

    let lf = AttentionSpec::new(small_kinds(len)[1].clone(), heads, d)?;
    let mut stack = TransformerStackParams::init(2, 16, true, &lf, &mut rng);
    let err = check_tape(
        &mut stack,
        std::slice::from_ref(&x),
        |g, p, v| {
            let o = transformer_stack(g, &v[0], p, &lf)?;
            weighted_sum(g, &o, 33)
        },
        |_| true,
        Some(SAMPLES_PER_TENSOR),
        3,
    )?;
    out.push(GradReport::new("attention", "transformer_stack", err));

    let geom = ChunkGeometry::new(11, 4)?;
    let intra = AttentionSpec::new(AttentionKind::Full, heads, d)?;
    let inter = AttentionSpec::new(AttentionKind::Linformer { k: 2, max_len: geom.n_chunks }, heads, d)?;
    let mut block = SepformerBlockParams::init(1, 1, 1, 16, true, intra, inter, &mut rng);
    let xb = random(&[geom.rows(), d], &mut rng);
    let err = check_tape(
        &mut block,
        &[xb],
        |g, p, v| {
            let o = sepformer_block(g, &v[0], &geom, p)?;
            weighted_sum(g, &o, 34)
        },
        |_| true,
        Some(SAMPLES_PER_TENSOR),
        4,
    )?;
    out.push(GradReport::new("attention", "dual_path_block", err));
    Ok(out)
}

/// Tiny two-source model used by the end-to-end check.
pub fn tiny_config() -> SepformerConfig {
    SepformerConfig {
        filters: 8,
        kernel_size: 4,
        stride: 2,
        chunking: Chunking::Size(6),
        repeats: 1,
        intra_layers: 1,
        inter_layers: 1,
        heads: 2,
        d_ff: 16,
        sources: 2,
        intra_attention: Variant::Full,
        inter_attention: InterAttention::Same,
        max_seconds: 0.01,
        seed: 5,
        ..SepformerConfig::standard()
    }
}

/// uPIT loss of the tiny model with respect to the encoder filters, then
/// with respect to every parameter.
pub fn model_suite() -> Result<Vec<GradReport>> {
    let mut model = Sepformer::new(tiny_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // Zero biases put dead ReLU rows exactly on the kink; shift them off it.
    for (name, p) in model.params_mut() {
        if name.ends_with("bias") {
            let shift = off_kink(p.shape(), &mut rng).map(|v| 0.1 * v);
            p.value_mut().add_assign(&shift);
        }
    }
    let t = 64;
    let targets: Vec<Vec<f64>> = (0..2).map(|_| random(&[t], &mut rng).into_vec()).collect();
    let mixture: Vec<f64> = targets[0].iter().zip(&targets[1]).map(|(a, b)| a + b).collect();
    let x = NdArray::vector(mixture);
    let loss = |g: &mut Tape, m: &Sepformer, v: &[Var]| {
        let est = m.forward(g, &v[0])?;
        let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        Ok(pit_loss_graph(g, &est, &refs)?.0)
    };
    let no_input = |g: &mut Tape, m: &Sepformer, _: &[Var]| {
        let xv = g.constant(x.clone());
        loss(g, m, &[xv])
    };
    let enc = check_tape(&mut model, &[], no_input, |n| n == "encoder.filters", None, 5)?;
    let all = check_tape(&mut model, &[], no_input, |_| true, Some(SAMPLES_PER_TENSOR), 6)?;
    Ok(vec![
        GradReport::new("model", "encoder.filters", enc),
        GradReport::new("model", "all_parameters", all),
    ])
}

/// Run the suite named `which`: `ndkernel`, `attention`, `model` or `all`.
pub fn run(which: &str) -> Result<Vec<GradReport>> {
    match which {
        "ndkernel" => ndkernel_suite(),
        "attention" => attention_suite(),
        "model" => model_suite(),
        "all" => {
            let mut v = ndkernel_suite()?;
            v.extend(attention_suite()?);
            v.extend(model_suite()?);
            Ok(v)
        }
        other => Err(Error::InvalidConfig(format!("unknown gradcheck module `{other}`"))),
    }
}
