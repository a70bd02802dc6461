//! A small fully-convolutional separator (temporal conv net masking, in the
//! style of Conv-TasNet) used as a memory reference point.
//!
//! Forward-only; weights are random since only cost is measured.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::uniform_init;
use crate::error::Result;
use crate::ndkernel::{arena, Eval, Graph, NdArray, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBaselineConfig {
    /// Encoder filters `N`.
    pub filters: usize,
    /// Encoder kernel `L`.
    pub kernel_size: usize,
    pub stride: usize,
    /// Bottleneck channels `B`.
    pub bottleneck: usize,
    /// Hidden channels `H`.
    pub hidden: usize,
    /// Depthwise kernel `P`.
    pub depthwise_kernel: usize,
    /// Blocks per repeat `X`, dilations `1, 2, …, 2^(X−1)`.
    pub blocks: usize,
    pub repeats: usize,
    pub sources: usize,
}

impl Default for ConvBaselineConfig {
    fn default() -> Self {
        ConvBaselineConfig {
            filters: 512,
            kernel_size: 16,
            stride: 8,
            bottleneck: 128,
            hidden: 512,
            depthwise_kernel: 3,
            blocks: 8,
            repeats: 3,
            sources: 2,
        }
    }
}

struct Block {
    w_in: NdArray,
    depthwise: NdArray,
    w_res: NdArray,
    w_skip: NdArray,
    dilation: usize,
}

pub struct ConvBaseline {
    pub config: ConvBaselineConfig,
    encoder: NdArray,
    bottleneck: NdArray,
    blocks: Vec<Block>,
    mask: NdArray,
    decoder: NdArray,
    slope: NdArray,
    gain_b: NdArray,
    bias_b: NdArray,
    gain_h: NdArray,
    bias_h: NdArray,
    gain_n: NdArray,
    bias_n: NdArray,
}

/// Same-length depthwise dilated convolution over time, `[T × C]` with
/// per-channel kernels `[C × P]`.
fn depthwise_conv(x: &NdArray, w: &NdArray, dilation: usize) -> NdArray {
    let (t, c) = (x.rows(), x.cols());
    let p = w.cols();
    let pad = dilation * (p - 1) / 2;
    let mut out = NdArray::zeros(&[t, c]);
    for i in 0..t {
        for k in 0..p {
            let Some(src) = (i + k * dilation).checked_sub(pad) else {
                continue;
            };
            if src >= t {
                continue;
            }
            let xr = x.row(src);
            let or = out.row_mut(i);
            for ch in 0..c {
                or[ch] += w.at(ch, k) * xr[ch];
            }
        }
    }
    arena::add_macs((t * c * p) as u64);
    out
}

impl ConvBaseline {
    pub fn new(config: ConvBaselineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let mut blocks = Vec::new();
        for _ in 0..c.repeats {
            for x in 0..c.blocks {
                blocks.push(Block {
                    w_in: uniform_init(&mut rng, &[c.hidden, c.bottleneck], c.bottleneck),
                    depthwise: uniform_init(&mut rng, &[c.hidden, c.depthwise_kernel], c.depthwise_kernel),
                    w_res: uniform_init(&mut rng, &[c.bottleneck, c.hidden], c.hidden),
                    w_skip: uniform_init(&mut rng, &[c.bottleneck, c.hidden], c.hidden),
                    dilation: 1 << x,
                });
            }
        }
        ConvBaseline {
            config,
            encoder: uniform_init(&mut rng, &[c.filters, 1, c.kernel_size], c.kernel_size),
            bottleneck: uniform_init(&mut rng, &[c.bottleneck, c.filters], c.filters),
            blocks,
            mask: uniform_init(&mut rng, &[c.filters * c.sources, c.bottleneck], c.bottleneck),
            decoder: uniform_init(&mut rng, &[c.filters, 1, c.kernel_size], c.kernel_size),
            slope: NdArray::full(&[c.hidden], 0.25),
            gain_b: NdArray::full(&[c.bottleneck], 1.0),
            bias_b: NdArray::zeros(&[c.bottleneck]),
            gain_h: NdArray::full(&[c.hidden], 1.0),
            bias_h: NdArray::zeros(&[c.hidden]),
            gain_n: NdArray::full(&[c.filters], 1.0),
            bias_n: NdArray::zeros(&[c.filters]),
        }
    }

    pub fn separate(&self, x: &[f64]) -> Result<Vec<NdArray>> {
        let c = self.config;
        let mut g = Eval;
        let xv = g.constant(NdArray::vector(x.to_vec()));
        let enc = g.constant(self.encoder.clone());
        let h = g.conv1d(&xv, &enc, c.stride)?;
        let h = g.relu(&h)?;
        let (gn, bn) = (g.constant(self.gain_n.clone()), g.constant(self.bias_n.clone()));
        let n = g.layer_norm(&h, &gn, &bn, LN_EPS)?;
        let wb = g.constant(self.bottleneck.clone());
        let mut y = g.matmul_nt(&n, &wb, 1.0)?;
        let (gh, bh) = (g.constant(self.gain_h.clone()), g.constant(self.bias_h.clone()));
        let slope = g.constant(self.slope.clone());
        let mut skip: Option<<Eval as Graph>::V> = None;
        for b in &self.blocks {
            let w_in = g.constant(b.w_in.clone());
            let u = g.matmul_nt(&y, &w_in, 1.0)?;
            let u = g.prelu(&u, &slope)?;
            let u = g.layer_norm(&u, &gh, &bh, LN_EPS)?;
            let u = g.constant(depthwise_conv(&u, &b.depthwise, b.dilation));
            let u = g.prelu(&u, &slope)?;
            let u = g.layer_norm(&u, &gh, &bh, LN_EPS)?;
            let w_res = g.constant(b.w_res.clone());
            let w_skip = g.constant(b.w_skip.clone());
            let r = g.matmul_nt(&u, &w_res, 1.0)?;
            let s = g.matmul_nt(&u, &w_skip, 1.0)?;
            y = g.add(&y, &r)?;
            skip = Some(match skip {
                Some(acc) => g.add(&acc, &s)?,
                None => s,
            });
        }
        let skip = skip.unwrap_or(y);
        let (gb, bb) = (g.constant(self.gain_b.clone()), g.constant(self.bias_b.clone()));
        let skip = g.layer_norm(&skip, &gb, &bb, LN_EPS)?;
        let wm = g.constant(self.mask.clone());
        let logits = g.matmul_nt(&skip, &wm, 1.0)?;
        let masks = g.constant(logits.map(|v| 1.0 / (1.0 + (-v).exp())));
        drop(logits);
        let dec = g.constant(self.decoder.clone());
        let mut out = Vec::with_capacity(c.sources);
        for k in 0..c.sources {
            let m = g.slice_cols(&masks, k * c.filters, c.filters)?;
            let mh = g.mul(&m, &h)?;
            out.push((*g.conv1d_transpose(&mh, &dec, c.stride)?).clone());
        }
        Ok(out)
    }
}
