//! The full separator: convolutional encoder, dual-path masking network,
//! and transposed-convolution decoder.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{uniform_init, AttentionKind, AttentionSpec};
use crate::config::SepformerConfig;
use crate::dualpath::{chunk_graph, overlap_add_graph, sepformer_block, ChunkGeometry, SepformerBlockParams};
use crate::encoder_stack::{LayerNormParams, Linear};
use crate::error::{Error, Result};
use crate::ndkernel::{Eval, Graph, NdArray, Param};

#[derive(Debug, Clone)]
pub struct Sepformer {
    pub config: SepformerConfig,
    /// `F × 1 × Kw`
    pub encoder: Param,
    pub mask_norm: LayerNormParams,
    pub mask_in: Linear,
    pub block: SepformerBlockParams,
    /// Per-feature PReLU slope.
    pub prelu_slope: Param,
    /// `F → F·Ns`
    pub mask_out: Linear,
    pub ffw1: Linear,
    pub ffw2: Linear,
    /// `F × 1 × Kw`
    pub decoder: Param,
}

/// Every intermediate of one forward pass, time-major.
pub struct ForwardTrace<V> {
    /// Encoder latent `h`, `[T' × F]`.
    pub latent: V,
    /// After LayerNorm and the input linear, `[T' × F]`.
    pub projected: V,
    /// Chunked, `[Nc·C × F]`.
    pub chunked: V,
    /// Dual-path block output, `[Nc·C × F]`.
    pub block_out: V,
    /// After PReLU and the output linear, `[Nc·C × F·Ns]`.
    pub expanded: V,
    /// Overlap-added per source, `[T' × F]` each.
    pub per_source: Vec<V>,
    /// Masks, `[T' × F]` each.
    pub masks: Vec<V>,
    /// Decoded estimates, `[T]` each.
    pub estimates: Vec<V>,
}

pub struct SeparationOutput {
    pub estimates: Vec<Vec<f64>>,
    pub masks: Vec<NdArray>,
}

impl Sepformer {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: SepformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = config.filters;
        let kw = config.kernel_size;
        let encoder = Param::new(uniform_init(&mut rng, &[f, 1, kw], kw));
        let mask_norm = LayerNormParams::new(f);
        let mask_in = Linear::init(&mut rng, f, f);
        let block = SepformerBlockParams::init(
            config.repeats,
            config.intra_layers,
            config.inter_layers,
            config.d_ff,
            config.positional_encoding,
            config.intra_spec()?,
            config.inter_spec()?,
            &mut rng,
        );
        let prelu_slope = Param::new(NdArray::full(&[f], 0.25));
        let mask_out = Linear::init(&mut rng, f, f * config.sources);
        let ffw1 = Linear::init(&mut rng, f, f);
        let ffw2 = Linear::init(&mut rng, f, f);
        let decoder = Param::new(uniform_init(&mut rng, &[f, 1, kw], kw));
        Ok(Sepformer {
            config,
            encoder,
            mask_norm,
            mask_in,
            block,
            prelu_slope,
            mask_out,
            ffw1,
            ffw2,
            decoder,
        })
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut v: Vec<(String, &Param)> = vec![
            ("encoder.filters".into(), &self.encoder),
            ("mask.norm.gain".into(), &self.mask_norm.gain),
            ("mask.norm.bias".into(), &self.mask_norm.bias),
            ("mask.in.weight".into(), &self.mask_in.weight),
            ("mask.in.bias".into(), &self.mask_in.bias),
        ];
        v.extend(self.block.params().into_iter().map(|(n, p)| (format!("mask.{n}"), p)));
        v.push(("mask.prelu.slope".into(), &self.prelu_slope));
        for (name, l) in [("mask.out", &self.mask_out), ("mask.ffw1", &self.ffw1), ("mask.ffw2", &self.ffw2)] {
            v.push((format!("{name}.weight"), &l.weight));
            v.push((format!("{name}.bias"), &l.bias));
        }
        v.push(("decoder.filters".into(), &self.decoder));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v: Vec<(String, &mut Param)> = vec![
            ("encoder.filters".into(), &mut self.encoder),
            ("mask.norm.gain".into(), &mut self.mask_norm.gain),
            ("mask.norm.bias".into(), &mut self.mask_norm.bias),
            ("mask.in.weight".into(), &mut self.mask_in.weight),
            ("mask.in.bias".into(), &mut self.mask_in.bias),
        ];
        v.extend(self.block.params_mut().into_iter().map(|(n, p)| (format!("mask.{n}"), p)));
        v.push(("mask.prelu.slope".into(), &mut self.prelu_slope));
        for (name, l) in [("mask.out", &mut self.mask_out), ("mask.ffw1", &mut self.ffw1), ("mask.ffw2", &mut self.ffw2)] {
            v.push((format!("{name}.weight"), &mut l.weight));
            v.push((format!("{name}.bias"), &mut l.bias));
        }
        v.push(("decoder.filters".into(), &mut self.decoder));
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// `h = ReLU(Conv1d(x))`, `[T' × F]`.
    pub fn encode<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        let w = g.param(&self.encoder);
        let h = g.conv1d(x, &w, self.config.stride)?;
        g.relu(&h)
    }

    /// Full forward pass with every intermediate kept.
    pub fn forward_traced<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<ForwardTrace<G::V>> {
        let cfg = &self.config;
        let t = g.value(x).len();
        cfg.frames(t)?;
        let latent = self.encode(g, x)?;
        let frames = g.value(&latent).rows();
        let geom = cfg.geometry(frames)?;

        let n = self.mask_norm.apply(g, &latent)?;
        let projected = self.mask_in.apply(g, &n)?;
        let chunked = chunk_graph(g, &projected, &geom)?;
        let block_out = sepformer_block(g, &chunked, &geom, &self.block)?;
        let slope = g.param(&self.prelu_slope);
        let act = g.prelu(&block_out, &slope)?;
        let expanded = self.mask_out.apply(g, &act)?;

        let dec = g.param(&self.decoder);
        let fit = Arc::new((0..t).map(Some).collect::<Vec<_>>());
        let mut per_source = Vec::with_capacity(cfg.sources);
        let mut masks = Vec::with_capacity(cfg.sources);
        let mut estimates = Vec::with_capacity(cfg.sources);
        for k in 0..cfg.sources {
            let (merged, m, y) = self.source_tail(g, &expanded, k, &latent, &geom, &dec, &fit)?;
            estimates.push(y);
            per_source.push(merged);
            masks.push(m);
        }
        Ok(ForwardTrace {
            latent,
            projected,
            chunked,
            block_out,
            expanded,
            per_source,
            masks,
            estimates,
        })
    }

    /// Mask merge, mask FFW, masking and decoding for source `k`; returns
    /// the overlap-added features, the mask and the estimate.
    #[allow(clippy::too_many_arguments)]
    fn source_tail<G: Graph>(
        &self,
        g: &mut G,
        expanded: &G::V,
        k: usize,
        latent: &G::V,
        geom: &ChunkGeometry,
        dec: &G::V,
        fit: &Arc<Vec<Option<usize>>>,
    ) -> Result<(G::V, G::V, G::V)> {
        let f = self.config.filters;
        let part = if self.config.sources == 1 {
            expanded.clone()
        } else {
            g.slice_cols(expanded, k * f, f)?
        };
        let merged = overlap_add_graph(g, &part, geom)?;
        drop(part);
        let m = {
            let a = self.ffw1.apply(g, &merged)?;
            let a = g.relu(&a)?;
            let a = self.ffw2.apply(g, &a)?;
            g.relu(&a)?
        };
        let y = {
            let masked = g.mul(&m, latent)?;
            g.conv1d_transpose(&masked, dec, self.config.stride)?
        };
        let t = fit.len();
        let y = fit_length(g, &y, fit, t)?;
        Ok((merged, m, y))
    }

    /// Forward pass returning only the estimates. Under [`Eval`] every
    /// intermediate is released as soon as the next stage no longer needs it.
    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::V) -> Result<Vec<G::V>> {
        let cfg = &self.config;
        let t = g.value(x).len();
        cfg.frames(t)?;
        let latent = self.encode(g, x)?;
        let geom = cfg.geometry(g.value(&latent).rows())?;
        let expanded = {
            let chunked = {
                let n = self.mask_norm.apply(g, &latent)?;
                let projected = self.mask_in.apply(g, &n)?;
                drop(n);
                chunk_graph(g, &projected, &geom)?
            };
            let block_out = sepformer_block(g, &chunked, &geom, &self.block)?;
            drop(chunked);
            let slope = g.param(&self.prelu_slope);
            let act = g.prelu(&block_out, &slope)?;
            drop(block_out);
            self.mask_out.apply(g, &act)?
        };
        let dec = g.param(&self.decoder);
        let fit = Arc::new((0..t).map(Some).collect::<Vec<_>>());
        let mut estimates = Vec::with_capacity(cfg.sources);
        for k in 0..cfg.sources {
            estimates.push(self.source_tail(g, &expanded, k, &latent, &geom, &dec, &fit)?.2);
        }
        Ok(estimates)
    }

    /// Latent masks for a mixture.
    pub fn mask_net(&self, x: &[f64]) -> Result<Vec<NdArray>> {
        Ok(self.separate(x)?.masks)
    }

    pub fn separate(&self, x: &[f64]) -> Result<SeparationOutput> {
        let mut g = Eval;
        let xv = g.constant(NdArray::vector(x.to_vec()));
        let tr = self.forward_traced(&mut g, &xv)?;
        Ok(SeparationOutput {
            estimates: tr.estimates.iter().map(|e| e.data().to_vec()).collect(),
            masks: tr.masks.iter().map(|m| (**m).clone()).collect(),
        })
    }

    /// Decode with externally supplied masks, bypassing the masking network.
    pub fn decode_with_masks(&self, x: &[f64], masks: &[NdArray]) -> Result<Vec<Vec<f64>>> {
        let mut g = Eval;
        let xv = g.constant(NdArray::vector(x.to_vec()));
        let h = self.encode(&mut g, &xv)?;
        let dec = g.param(&self.decoder);
        let fit = Arc::new((0..x.len()).map(Some).collect::<Vec<_>>());
        masks
            .iter()
            .map(|m| {
                let mv = g.constant(m.clone());
                let masked = g.mul(&mv, &h)?;
                let y = g.conv1d_transpose(&masked, &dec, self.config.stride)?;
                Ok(fit_length(&mut g, &y, &fit, x.len())?.data().to_vec())
            })
            .collect()
    }
}

/// Zero-pad or truncate a decoded signal to `t` samples.
fn fit_length<G: Graph>(g: &mut G, y: &G::V, fit: &Arc<Vec<Option<usize>>>, t: usize) -> Result<G::V> {
    let len = g.value(y).len();
    if len == t {
        return Ok(y.clone());
    }
    let index: Vec<Option<usize>> = fit.iter().map(|i| i.filter(|&i| i < len)).collect();
    let col = g.reshape(y, &[len, 1])?;
    let out = g.gather_rows(&col, Arc::new(index))?;
    g.reshape(&out, &[t])
}

fn attention_params(spec: &AttentionSpec) -> usize {
    let d = spec.d_model;
    match spec.kind {
        AttentionKind::Reformer { .. } => 3 * d * d,
        AttentionKind::Linformer { k, max_len } => 4 * d * d + 2 * max_len * k,
        _ => 4 * d * d,
    }
}

fn layer_params(spec: &AttentionSpec, d_ff: usize) -> usize {
    let f = spec.d_model;
    attention_params(spec) + 4 * f + 2 * f * d_ff + d_ff + f
}

/// Closed-form count of learnable scalars for `cfg`.
pub fn parameter_census(cfg: &SepformerConfig) -> Result<usize> {
    let f = cfg.filters;
    let ns = cfg.sources;
    let per_repeat = cfg.intra_layers * layer_params(&cfg.intra_spec()?, cfg.d_ff)
        + cfg.inter_layers * layer_params(&cfg.inter_spec()?, cfg.d_ff);
    let codec = 2 * f * cfg.kernel_size;
    let mask = 2 * f + (f * f + f) + f + (f * f * ns + f * ns) + 2 * (f * f + f);
    Ok(codec + mask + cfg.repeats * per_repeat)
}

const MAGIC: &[u8; 4] = b"SPFK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Sepformer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let pairs = self.config.to_pairs();
        put_u32(&mut out, pairs.len() as u32);
        for (k, v) in pairs {
            let line = format!("{k}={v}");
            put_u32(&mut out, line.len() as u32);
            out.extend_from_slice(line.as_bytes());
        }
        for (name, p) in self.params() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, p.shape().len() as u32);
            for &d in p.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_lines = r.u32("config line count")? as usize;
        let mut lines = Vec::with_capacity(n_lines);
        for _ in 0..n_lines {
            let len = r.u32("config line length")? as usize;
            let s = std::str::from_utf8(r.take(len, "config line")?)
                .map_err(|_| Error::Checkpoint("config line is not UTF-8".into()))?;
            lines.push(s.to_string());
        }
        let mut pairs = Vec::with_capacity(n_lines);
        for l in &lines {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed config line `{l}`")))?;
            pairs.push((k, v));
        }
        let config = SepformerConfig::from_pairs(pairs)?;
        let mut model = Sepformer::new(config)?;
        let mut slots = model.params_mut();
        let mut filled = vec![false; slots.len()];
        while !r.done() {
            let len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "parameter name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, "parameter values")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let Some(i) = slots.iter().position(|(s, _)| *s == name) else {
                return Err(Error::Checkpoint(format!("unknown parameter `{name}`")));
            };
            if slots[i].1.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {shape:?}, expected {:?}",
                    slots[i].1.shape()
                )));
            }
            slots[i].1.set(NdArray::new(shape, data)?);
            filled[i] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", slots[i].0)));
        }
        drop(slots);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
