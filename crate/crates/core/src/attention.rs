//! Multi-head self-attention with four interchangeable mechanisms, and
//! sinusoidal positional encoding.
//!
//! All variants take a time-major sequence `[T × d_model]`, project it to
//! per-head queries, keys and values, attend, and recombine the heads with
//! the output projection. They differ only in which (query, key) pairs are
//! scored:
//!
//! * `Full`: every pair, `T²` scores per head.
//! * `Longformer`: a symmetric band of `window` positions plus a strided set
//!   of global positions that see, and are seen by, everything.
//! * `Linformer`: keys and values are projected along time to a fixed `k`
//!   slots, giving a `T × k` map.
//! * `Reformer`: shared-QK attention inside LSH-sorted chunks, averaged over
//!   hashing rounds with log-sum-exp weights.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndkernel::{self, Graph, NdArray, Neighbors, Param};

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionKind {
    Full,
    Longformer {
        window: usize,
        /// Every `n`-th position (starting at 0) is global; `None` disables
        /// global attention.
        global_every: Option<usize>,
    },
    Linformer {
        k: usize,
        max_len: usize,
    },
    Reformer {
        n_buckets: usize,
        n_rounds: usize,
        bucket_chunk: usize,
    },
}

impl AttentionKind {
    pub fn longformer() -> Self {
        AttentionKind::Longformer {
            window: 101,
            global_every: Some(100),
        }
    }

    pub fn linformer(max_len: usize) -> Self {
        AttentionKind::Linformer {
            k: 128.min(max_len),
            max_len,
        }
    }

    pub fn reformer() -> Self {
        AttentionKind::Reformer {
            n_buckets: 8,
            n_rounds: 2,
            bucket_chunk: 64,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Full => "full",
            AttentionKind::Longformer { .. } => "longformer",
            AttentionKind::Linformer { .. } => "linformer",
            AttentionKind::Reformer { .. } => "reformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    pub heads: usize,
    pub d_model: usize,
    /// Seed for LSH rotations; ignored by the other variants.
    pub seed: u64,
}

impl AttentionSpec {
    pub fn new(kind: AttentionKind, heads: usize, d_model: usize) -> Result<Self> {
        let spec = AttentionSpec {
            kind,
            heads,
            d_model,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAttention(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        match self.kind {
            AttentionKind::Full => {}
            AttentionKind::Longformer { window, global_every } => {
                if window % 2 == 0 {
                    return bad(format!("longformer window {window} must be odd"));
                }
                if global_every == Some(0) {
                    return bad("longformer global stride must be positive".into());
                }
            }
            AttentionKind::Linformer { k, max_len } => {
                if k == 0 || k > max_len {
                    return bad(format!("linformer k {k} must be in 1..={max_len}"));
                }
            }
            AttentionKind::Reformer {
                n_buckets,
                n_rounds,
                bucket_chunk,
            } => {
                if n_buckets < 2 || !n_buckets.is_power_of_two() {
                    return bad(format!("reformer n_buckets {n_buckets} must be a power of two ≥ 2"));
                }
                if n_rounds == 0 || bucket_chunk == 0 {
                    return bad("reformer rounds and chunk size must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Learned projections for one attention block. `W_Q`, `W_K`, `W_V` and
/// `W_O` are `d_model × d_model`; `W_K` is absent under shared-QK (Reformer);
/// the Linformer time projections are `max_len × k`.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Param,
    pub wk: Option<Param>,
    pub wv: Param,
    pub wo: Param,
    pub proj_k: Option<Param>,
    pub proj_v: Option<Param>,
}

pub(crate) fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> NdArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    NdArray::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl AttentionWeights {
    pub fn init(spec: &AttentionSpec, rng: &mut impl Rng) -> Self {
        let d = spec.d_model;
        let mut mat = || Param::new(uniform_init(rng, &[d, d], d));
        let wq = mat();
        let wk = match spec.kind {
            AttentionKind::Reformer { .. } => None,
            _ => Some(mat()),
        };
        let wv = mat();
        let wo = mat();
        let (proj_k, proj_v) = match spec.kind {
            AttentionKind::Linformer { k, max_len } => (
                Some(Param::new(uniform_init(rng, &[max_len, k], max_len))),
                Some(Param::new(uniform_init(rng, &[max_len, k], max_len))),
            ),
            _ => (None, None),
        };
        AttentionWeights {
            wq,
            wk,
            wv,
            wo,
            proj_k,
            proj_v,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut v = vec![("wq", &self.wq)];
        if let Some(wk) = &self.wk {
            v.push(("wk", wk));
        }
        v.push(("wv", &self.wv));
        v.push(("wo", &self.wo));
        if let (Some(p), Some(f)) = (&self.proj_k, &self.proj_v) {
            v.push(("proj_k", p));
            v.push(("proj_v", f));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut v = vec![("wq", &mut self.wq)];
        if let Some(wk) = &mut self.wk {
            v.push(("wk", wk));
        }
        v.push(("wv", &mut self.wv));
        v.push(("wo", &mut self.wo));
        if let (Some(p), Some(f)) = (&mut self.proj_k, &mut self.proj_v) {
            v.push(("proj_k", p));
            v.push(("proj_v", f));
        }
        v
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d_model: usize) -> NdArray {
    let mut pe = NdArray::zeros(&[len, d_model]);
    for t in 0..len {
        let row = pe.row_mut(t);
        for (j, v) in row.iter_mut().enumerate() {
            let i = j / 2;
            let angle = t as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            *v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Neighbour lists for banded attention with strided global positions.
pub fn longformer_neighbors(len: usize, window: usize, global_every: Option<usize>) -> Neighbors {
    let half = window / 2;
    let is_global = |t: usize| global_every.is_some_and(|g| t.is_multiple_of(g));
    let globals: Vec<usize> = (0..len).filter(|&t| is_global(t)).collect();
    let lists: Vec<Vec<usize>> = (0..len)
        .map(|t| {
            if is_global(t) {
                return (0..len).collect();
            }
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(len - 1);
            let mut l: Vec<usize> = globals.iter().copied().filter(|&g| g < lo).collect();
            l.extend(lo..=hi);
            l.extend(globals.iter().copied().filter(|&g| g > hi));
            l
        })
        .collect();
    Neighbors::from_lists(&lists)
}

/// Number of scored (query, key) pairs for [`longformer_neighbors`].
pub fn longformer_pairs(len: usize, window: usize, global_every: Option<usize>) -> u64 {
    let half = window / 2;
    let mut total = 0u64;
    let n_global = global_every.map_or(0, |g| len.div_ceil(g));
    for t in 0..len {
        if global_every.is_some_and(|g| t % g == 0) {
            total += len as u64;
            continue;
        }
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(len - 1);
        let band = hi - lo + 1;
        let globals_in_band = global_every.map_or(0, |g| hi / g + 1 - lo.div_ceil(g));
        total += (band + n_global - globals_in_band) as u64;
    }
    total
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Angular LSH: project rows onto a random Gaussian rotation and take the
/// argmax over `[xR, −xR]`.
pub fn lsh_buckets(x: &NdArray, n_buckets: usize, seed: u64) -> Vec<usize> {
    let d = x.cols();
    let half = n_buckets / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = NdArray::from_parts(
        vec![d, half],
        (0..d * half).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    );
    let proj = ndkernel::matmul(x, &rot).expect("rotation matches feature width");
    (0..x.rows())
        .map(|t| {
            let row = proj.row(t);
            let mut best = (0, f64::NEG_INFINITY);
            for (j, &v) in row.iter().enumerate() {
                if v > best.1 {
                    best = (j, v);
                }
            }
            for (j, &v) in row.iter().enumerate() {
                if -v > best.1 {
                    best = (half + j, -v);
                }
            }
            best.0
        })
        .collect()
}

/// Neighbour lists for chunked LSH attention: positions are stably sorted by
/// bucket, cut into chunks of `bucket_chunk`, and each position sees its own
/// chunk plus the preceding one (cyclically), never itself unless it is alone.
pub fn reformer_neighbors(buckets: &[usize], bucket_chunk: usize) -> Neighbors {
    let len = buckets.len();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by_key(|&t| (buckets[t], t));
    let n_chunks = len.div_ceil(bucket_chunk);
    let chunk = |c: usize| &order[c * bucket_chunk..((c + 1) * bucket_chunk).min(len)];
    let mut lists = vec![Vec::new(); len];
    for c in 0..n_chunks {
        let prev = (c + n_chunks - 1) % n_chunks;
        for &t in chunk(c) {
            let mut l: Vec<usize> = chunk(c).iter().copied().filter(|&s| s != t).collect();
            if n_chunks > 1 {
                l.extend_from_slice(chunk(prev));
            }
            if l.is_empty() {
                l.push(t);
            }
            lists[t] = l;
        }
    }
    Neighbors::from_lists(&lists)
}

/// Number of scored pairs for [`reformer_neighbors`]; independent of the
/// bucket assignment.
pub fn reformer_pairs(len: usize, bucket_chunk: usize) -> u64 {
    if len == 1 {
        return 1;
    }
    let n_chunks = len.div_ceil(bucket_chunk);
    let size = |c: usize| (((c + 1) * bucket_chunk).min(len) - c * bucket_chunk) as u64;
    (0..n_chunks)
        .map(|c| {
            let own = size(c);
            let prev = if n_chunks > 1 { size((c + n_chunks - 1) % n_chunks) } else { 0 };
            own * (own - 1 + prev)
        })
        .sum()
}

fn rotation_seed(spec: &AttentionSpec, head: usize, round: usize) -> u64 {
    mix_seed(spec.seed, head as u64 + 1, round as u64 + 1)
}

struct Projected<V> {
    q: V,
    k: V,
    v: V,
}

fn project_heads<G: Graph>(g: &mut G, x: &G::V, w: &AttentionWeights, spec: &AttentionSpec) -> Result<Vec<Projected<G::V>>> {
    let wq = g.param(&w.wq);
    let wv = g.param(&w.wv);
    let q = g.matmul_nt(x, &wq, 1.0)?;
    let v = g.matmul_nt(x, &wv, 1.0)?;
    let k = match &w.wk {
        Some(wk) => {
            let wk = g.param(wk);
            Some(g.matmul_nt(x, &wk, 1.0)?)
        }
        None => None,
    };
    let dk = spec.d_head();
    let mut heads = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let slice = |g: &mut G, a: &G::V| -> Result<G::V> {
            if spec.heads == 1 {
                Ok(a.clone())
            } else {
                g.slice_cols(a, h * dk, dk)
            }
        };
        let qh = slice(g, &q)?;
        let vh = slice(g, &v)?;
        let kh = match &k {
            Some(k) => slice(g, k)?,
            None => g.l2_normalize_rows(&qh)?,
        };
        heads.push(Projected { q: qh, k: kh, v: vh });
    }
    Ok(heads)
}

/// Multi-head self-attention over a `[T × d_model]` sequence.
pub fn attend<G: Graph>(g: &mut G, x: &G::V, w: &AttentionWeights, spec: &AttentionSpec) -> Result<G::V> {
    let len = g.value(x).rows();
    attend_segments(g, x, w, spec, len)
}

/// Repeat one segment's neighbour lists over `n_seg` consecutive segments.
fn tile_neighbors(n_seg: usize, len: usize, segment: impl Fn(usize) -> Neighbors) -> Neighbors {
    let mut lists = Vec::with_capacity(n_seg * len);
    for s in 0..n_seg {
        let nb = segment(s);
        let base = s * len;
        lists.extend((0..len).map(|t| nb.row(t).iter().map(|&j| base + j).collect::<Vec<_>>()));
    }
    Neighbors::from_lists(&lists)
}

/// Self-attention applied independently to each run of `seg_len`
/// consecutive rows, as one batch: projections cover all rows at once and
/// full attention materialises every segment's score matrix together.
pub fn attend_segments<G: Graph>(
    g: &mut G,
    x: &G::V,
    w: &AttentionWeights,
    spec: &AttentionSpec,
    seg_len: usize,
) -> Result<G::V> {
    let (rows, width) = {
        let xv = g.value(x);
        (xv.rows(), xv.cols())
    };
    if width != spec.d_model {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: vec![rows, width],
            right: vec![rows, spec.d_model],
        });
    }
    if seg_len == 0 || rows % seg_len != 0 {
        return Err(Error::InvalidShape {
            op: "attention",
            shape: vec![rows, width],
            reason: "rows do not split into whole segments",
        });
    }
    let (len, n_seg) = (seg_len, rows / seg_len);
    if let AttentionKind::Linformer { max_len, .. } = spec.kind {
        if len > max_len {
            return Err(Error::SequenceTooLong { len, max_len });
        }
    }
    let dk = spec.d_head();
    let scale = 1.0 / (dk as f64).sqrt();
    let heads = project_heads(g, x, w, spec)?;
    // Full attention scores every head before any softmax, the way a
    // batched [heads × rows × len] score tensor would be held.
    let mut full_scores = std::collections::VecDeque::new();
    if matches!(spec.kind, AttentionKind::Full) {
        for p in &heads {
            let sc = if n_seg == 1 {
                g.matmul_nt(&p.q, &p.k, scale)?
            } else {
                let mut blocks = Vec::with_capacity(n_seg);
                for s in 0..n_seg {
                    let q = g.slice_rows(&p.q, s * len, len)?;
                    let k = g.slice_rows(&p.k, s * len, len)?;
                    blocks.push(g.matmul_nt(&q, &k, scale)?);
                }
                g.concat_rows(&blocks)?
            };
            full_scores.push_back(sc);
        }
    }
    let mut outs = Vec::with_capacity(spec.heads);
    for (h, p) in heads.iter().enumerate() {
        let o = match &spec.kind {
            AttentionKind::Full => {
                let a = {
                    let sc = full_scores.pop_front().expect("one score matrix per head");
                    g.softmax_rows(&sc)?
                };
                if n_seg == 1 {
                    g.matmul(&a, &p.v)?
                } else {
                    let mut parts = Vec::with_capacity(n_seg);
                    for s in 0..n_seg {
                        let a_s = g.slice_rows(&a, s * len, len)?;
                        let v_s = g.slice_rows(&p.v, s * len, len)?;
                        parts.push(g.matmul(&a_s, &v_s)?);
                    }
                    g.concat_rows(&parts)?
                }
            }
            AttentionKind::Longformer { window, global_every } => {
                let band = longformer_neighbors(len, *window, *global_every);
                let nbrs = if n_seg == 1 { band } else { tile_neighbors(n_seg, len, |_| band.clone()) };
                let o = g.sparse_attention(&p.q, &p.k, &p.v, Arc::new(nbrs), scale)?;
                g.slice_cols(&o, 0, dk)?
            }
            AttentionKind::Linformer { max_len, .. } => {
                let (pk, pv) = linformer_projections(g, w, len, *max_len)?;
                let mut parts = Vec::with_capacity(n_seg);
                for s in 0..n_seg {
                    let (q, k, v) = if n_seg == 1 {
                        (p.q.clone(), p.k.clone(), p.v.clone())
                    } else {
                        (
                            g.slice_rows(&p.q, s * len, len)?,
                            g.slice_rows(&p.k, s * len, len)?,
                            g.slice_rows(&p.v, s * len, len)?,
                        )
                    };
                    let kp = g.matmul_tn(&pk, &k)?;
                    let vp = g.matmul_tn(&pv, &v)?;
                    let sc = g.matmul_nt(&q, &kp, scale)?;
                    let a = g.softmax_rows(&sc)?;
                    parts.push(g.matmul(&a, &vp)?);
                }
                if n_seg == 1 {
                    parts.pop().expect("one segment")
                } else {
                    g.concat_rows(&parts)?
                }
            }
            AttentionKind::Reformer {
                n_buckets,
                n_rounds,
                bucket_chunk,
            } => {
                let mut round_out = Vec::with_capacity(*n_rounds);
                let mut round_lse = Vec::with_capacity(*n_rounds);
                for r in 0..*n_rounds {
                    // hashing is row-wise, so one call covers every segment
                    let buckets = lsh_buckets(g.value(&p.k), *n_buckets, rotation_seed(spec, h, r));
                    let nbrs = if n_seg == 1 {
                        reformer_neighbors(&buckets, *bucket_chunk)
                    } else {
                        tile_neighbors(n_seg, len, |s| reformer_neighbors(&buckets[s * len..(s + 1) * len], *bucket_chunk))
                    };
                    let o = g.sparse_attention(&p.q, &p.k, &p.v, Arc::new(nbrs), scale)?;
                    round_out.push(g.slice_cols(&o, 0, dk)?);
                    round_lse.push(g.slice_cols(&o, dk, 1)?);
                }
                if *n_rounds == 1 {
                    round_out.pop().expect("one round")
                } else {
                    let lse = g.concat_cols(&round_lse)?;
                    let wts = g.softmax_rows(&lse)?;
                    let mut acc: Option<G::V> = None;
                    for (r, o) in round_out.iter().enumerate() {
                        let wr = g.slice_cols(&wts, r, 1)?;
                        let term = g.mul_rows(o, &wr)?;
                        acc = Some(match acc {
                            Some(a) => g.add(&a, &term)?,
                            None => term,
                        });
                    }
                    acc.expect("at least two rounds")
                }
            }
        };
        outs.push(o);
    }
    let cat = if outs.len() == 1 {
        outs.pop().expect("one head")
    } else {
        g.concat_cols(&outs)?
    };
    let wo = g.param(&w.wo);
    g.matmul_nt(&cat, &wo, 1.0)
}

fn linformer_projections<G: Graph>(g: &mut G, w: &AttentionWeights, len: usize, max_len: usize) -> Result<(G::V, G::V)> {
    let (Some(pk), Some(pv)) = (&w.proj_k, &w.proj_v) else {
        return Err(Error::InvalidAttention("linformer weights lack time projections".into()));
    };
    let mut pk = g.param(pk);
    let mut pv = g.param(pv);
    if len < max_len {
        pk = g.slice_rows(&pk, 0, len)?;
        pv = g.slice_rows(&pv, 0, len)?;
    }
    Ok((pk, pv))
}

/// Realised attention map of every head (`T × T`, or `T × k` for
/// Linformer). Reformer maps combine the hashing rounds with their
/// log-sum-exp weights.
pub fn attention_maps(x: &NdArray, w: &AttentionWeights, spec: &AttentionSpec) -> Result<Vec<NdArray>> {
    let mut g = ndkernel::Eval;
    let xv = Arc::new(x.clone());
    let len = x.rows();
    let dk = spec.d_head();
    let scale = 1.0 / (dk as f64).sqrt();
    let heads = project_heads(&mut g, &xv, w, spec)?;
    let sparse_map = |q: &NdArray, k: &NdArray, nbrs: &Neighbors| -> (NdArray, Vec<f64>) {
        let mut m = NdArray::zeros(&[len, k.rows()]);
        let mut lses = Vec::with_capacity(len);
        for t in 0..len {
            let list = nbrs.row(t);
            let s: Vec<f64> = list.iter().map(|&j| scale * dot(q.row(t), k.row(j))).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for (&j, sv) in list.iter().zip(&s) {
                m.set(t, j, (sv - mx).exp() / z);
            }
            lses.push(mx + z.ln());
        }
        (m, lses)
    };
    let mut maps = Vec::with_capacity(spec.heads);
    for (h, p) in heads.iter().enumerate() {
        let map = match &spec.kind {
            AttentionKind::Full => ndkernel::softmax_rows(&ndkernel::matmul(&p.q, &p.k.transposed())?.map(|v| v * scale)),
            AttentionKind::Longformer { window, global_every } => {
                sparse_map(&p.q, &p.k, &longformer_neighbors(len, *window, *global_every)).0
            }
            AttentionKind::Linformer { max_len, .. } => {
                let (pk, _) = linformer_projections(&mut g, w, len, *max_len)?;
                let kp = ndkernel::matmul(&pk.transposed(), &p.k)?;
                ndkernel::softmax_rows(&ndkernel::matmul(&p.q, &kp.transposed())?.map(|v| v * scale))
            }
            AttentionKind::Reformer {
                n_buckets,
                n_rounds,
                bucket_chunk,
            } => {
                let rounds: Vec<(NdArray, Vec<f64>)> = (0..*n_rounds)
                    .map(|r| {
                        let buckets = lsh_buckets(&p.k, *n_buckets, rotation_seed(spec, h, r));
                        sparse_map(&p.q, &p.k, &reformer_neighbors(&buckets, *bucket_chunk))
                    })
                    .collect();
                let mut m = NdArray::zeros(&[len, len]);
                for t in 0..len {
                    let mx = rounds.iter().map(|r| r.1[t]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = rounds.iter().map(|r| (r.1[t] - mx).exp()).sum();
                    for (rm, lse) in &rounds {
                        let wgt = (lse[t] - mx).exp() / z;
                        for (o, v) in m.row_mut(t).iter_mut().zip(rm.row(t)) {
                            *o += wgt * v;
                        }
                    }
                }
                m
            }
        };
        maps.push(map);
    }
    Ok(maps)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
