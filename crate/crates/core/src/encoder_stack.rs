//! Pre-LayerNorm transformer layer and the K-layer stack used by both the
//! intra-chunk and inter-chunk paths.
//!
//! Layer wiring, with `z'` the layer input:
//!
//! ```text
//! z''  = MHA(LayerNorm(z'))
//! out  = FFW(LayerNorm(z'' + z')) + z'' + z'
//! ```
//!
//! Stack wiring: `f(z) = g_K(...g_1(z + e)) + z`, with `e` the sinusoidal
//! positional encoding added once before the first layer.

use rand::Rng;

use crate::attention::{self, uniform_init, AttentionSpec, AttentionWeights};
use crate::error::Result;
use crate::ndkernel::{Eval, Graph, NdArray, Param, LN_EPS};

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        LayerNormParams {
            gain: Param::new(NdArray::full(&[width], 1.0)),
            bias: Param::new(NdArray::zeros(&[width])),
        }
    }

    pub fn apply<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, &gain, &bias, LN_EPS)
    }
}

/// Position-wise affine map `x·Wᵀ + b` with `W: out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Linear {
            weight: Param::new(uniform_init(rng, &[output, input], input)),
            bias: Param::new(NdArray::zeros(&[output])),
        }
    }

    pub fn apply<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul_nt(x, &w, 1.0)?;
        g.add_bias(&y, &b)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub attention: AttentionWeights,
    pub norm_attn: LayerNormParams,
    pub norm_ffw: LayerNormParams,
    /// `F × d_ff`, applied as `x·W₁`
    pub w1: Param,
    pub b1: Param,
    /// `d_ff × F`
    pub w2: Param,
    pub b2: Param,
}

impl TransformerLayerParams {
    pub fn init(spec: &AttentionSpec, d_ff: usize, rng: &mut impl Rng) -> Self {
        let f = spec.d_model;
        TransformerLayerParams {
            attention: AttentionWeights::init(spec, rng),
            norm_attn: LayerNormParams::new(f),
            norm_ffw: LayerNormParams::new(f),
            w1: Param::new(uniform_init(rng, &[f, d_ff], f)),
            b1: Param::new(NdArray::zeros(&[d_ff])),
            w2: Param::new(uniform_init(rng, &[d_ff, f], d_ff)),
            b2: Param::new(NdArray::zeros(&[f])),
        }
    }

    pub fn d_ff(&self) -> usize {
        self.b1.len()
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut v: Vec<(String, &Param)> = self
            .attention
            .params()
            .into_iter()
            .map(|(n, p)| (format!("attn.{n}"), p))
            .collect();
        v.push(("norm1.gain".into(), &self.norm_attn.gain));
        v.push(("norm1.bias".into(), &self.norm_attn.bias));
        v.push(("norm2.gain".into(), &self.norm_ffw.gain));
        v.push(("norm2.bias".into(), &self.norm_ffw.bias));
        v.push(("ffw.w1".into(), &self.w1));
        v.push(("ffw.b1".into(), &self.b1));
        v.push(("ffw.w2".into(), &self.w2));
        v.push(("ffw.b2".into(), &self.b2));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v: Vec<(String, &mut Param)> = self
            .attention
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("attn.{n}"), p))
            .collect();
        v.push(("norm1.gain".into(), &mut self.norm_attn.gain));
        v.push(("norm1.bias".into(), &mut self.norm_attn.bias));
        v.push(("norm2.gain".into(), &mut self.norm_ffw.gain));
        v.push(("norm2.bias".into(), &mut self.norm_ffw.bias));
        v.push(("ffw.w1".into(), &mut self.w1));
        v.push(("ffw.b1".into(), &mut self.b1));
        v.push(("ffw.w2".into(), &mut self.w2));
        v.push(("ffw.b2".into(), &mut self.b2));
        v
    }
}

/// Intermediate values of one layer.
pub struct LayerTrace<V> {
    pub z_prime: V,
    pub z_dprime: V,
    pub ffw_branch: V,
    pub output: V,
}

fn feed_forward<G: Graph>(g: &mut G, x: &G::V, p: &TransformerLayerParams) -> Result<G::V> {
    let w1 = g.param(&p.w1);
    let b1 = g.param(&p.b1);
    let w2 = g.param(&p.w2);
    let b2 = g.param(&p.b2);
    let h = g.matmul(x, &w1)?;
    let h = g.add_bias(&h, &b1)?;
    let h = g.relu(&h)?;
    let y = g.matmul(&h, &w2)?;
    g.add_bias(&y, &b2)
}

pub fn transformer_layer_traced<G: Graph>(
    g: &mut G,
    z_prime: &G::V,
    p: &TransformerLayerParams,
    spec: &AttentionSpec,
) -> Result<LayerTrace<G::V>> {
    let len = g.value(z_prime).rows();
    transformer_layer_segments(g, z_prime, p, spec, len)
}

/// One layer over a batch of `seg_len`-row sequences stacked along rows;
/// only attention looks across rows, and never across segments.
pub fn transformer_layer_segments<G: Graph>(
    g: &mut G,
    z_prime: &G::V,
    p: &TransformerLayerParams,
    spec: &AttentionSpec,
    seg_len: usize,
) -> Result<LayerTrace<G::V>> {
    let z_dprime = {
        let n1 = p.norm_attn.apply(g, z_prime)?;
        attention::attend_segments(g, &n1, &p.attention, spec, seg_len)?
    };
    let skip = g.add(&z_dprime, z_prime)?;
    let ffw_branch = {
        let n2 = p.norm_ffw.apply(g, &skip)?;
        feed_forward(g, &n2, p)?
    };
    let output = g.add(&ffw_branch, &skip)?;
    Ok(LayerTrace {
        z_prime: z_prime.clone(),
        z_dprime,
        ffw_branch,
        output,
    })
}

pub fn transformer_layer<G: Graph>(
    g: &mut G,
    z_prime: &G::V,
    p: &TransformerLayerParams,
    spec: &AttentionSpec,
) -> Result<G::V> {
    Ok(transformer_layer_traced(g, z_prime, p, spec)?.output)
}

#[derive(Debug, Clone)]
pub struct TransformerStackParams {
    pub layers: Vec<TransformerLayerParams>,
    pub use_positional_encoding: bool,
}

impl TransformerStackParams {
    pub fn init(
        depth: usize,
        d_ff: usize,
        use_positional_encoding: bool,
        spec: &AttentionSpec,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(depth >= 1, "stack needs at least one layer");
        TransformerStackParams {
            layers: (0..depth).map(|_| TransformerLayerParams::init(spec, d_ff, rng)).collect(),
            use_positional_encoding,
        }
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("layer{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, p)| (format!("layer{i}.{n}"), p)))
            .collect()
    }
}

/// Per-layer attention spec: layer `i` hashes with `seed + i` so LSH
/// rotations differ between layers.
pub fn layer_spec(spec: &AttentionSpec, layer: usize) -> AttentionSpec {
    spec.clone().with_seed(spec.seed.wrapping_add(layer as u64))
}

pub fn transformer_stack<G: Graph>(
    g: &mut G,
    z: &G::V,
    p: &TransformerStackParams,
    spec: &AttentionSpec,
) -> Result<G::V> {
    let len = g.value(z).rows();
    transformer_stack_segments(g, z, p, spec, len)
}

/// The stack applied to every `seg_len`-row sequence of a row-stacked
/// batch, each with its own positional encoding.
pub fn transformer_stack_segments<G: Graph>(
    g: &mut G,
    z: &G::V,
    p: &TransformerStackParams,
    spec: &AttentionSpec,
    seg_len: usize,
) -> Result<G::V> {
    let mut h = if p.use_positional_encoding {
        let (rows, width) = {
            let v = g.value(z);
            (v.rows(), v.cols())
        };
        let pe = attention::positional_encoding(seg_len, width);
        let e = if rows == seg_len {
            pe
        } else {
            let tiled: Vec<f64> = pe.data().iter().copied().cycle().take(rows * width).collect();
            NdArray::matrix(rows, width, tiled)?
        };
        let e = g.constant(e);
        g.add(z, &e)?
    } else {
        z.clone()
    };
    for (i, layer) in p.layers.iter().enumerate() {
        h = transformer_layer_segments(g, &h, layer, &layer_spec(spec, i), seg_len)?.output;
    }
    g.add(&h, z)
}

/// Convenience forward on plain arrays.
pub fn transformer_stack_eval(z: &NdArray, p: &TransformerStackParams, spec: &AttentionSpec) -> Result<NdArray> {
    let mut g = Eval;
    let zv = g.constant(z.clone());
    Ok((*transformer_stack(&mut g, &zv, p, spec)?).clone())
}
