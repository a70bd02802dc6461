//! 50%-overlap chunking, the IntraT → permute → InterT block, and
//! overlap-add reconstruction.
//!
//! A chunked feature map is stored as `Nc·C` rows of width `F`: row
//! `n·C + c` is position `c` of chunk `n`. The intra path attends over the
//! `C` rows of each chunk; the inter path attends over the `Nc` rows that
//! share an intra-chunk position.

use std::sync::Arc;

use rand::Rng;

use crate::attention::AttentionSpec;
use crate::encoder_stack::{transformer_stack_segments, TransformerStackParams};
use crate::error::{Error, Result};
use crate::ndkernel::{Eval, Graph, NdArray, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub original_len: usize,
    pub chunk_size: usize,
    pub hop: usize,
    pub padded_len: usize,
    pub n_chunks: usize,
}

impl ChunkGeometry {
    pub fn new(len: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size < 2 || !chunk_size.is_multiple_of(2) {
            return Err(Error::InvalidChunkSize(chunk_size));
        }
        let hop = chunk_size / 2;
        let padded_len = if len <= chunk_size {
            chunk_size
        } else {
            chunk_size + (len - chunk_size).div_ceil(hop) * hop
        };
        Ok(ChunkGeometry {
            original_len: len,
            chunk_size,
            hop,
            padded_len,
            n_chunks: 1 + (padded_len - chunk_size) / hop,
        })
    }

    pub fn rows(&self) -> usize {
        self.n_chunks * self.chunk_size
    }

    /// Source frame of every chunked row, `None` in the zero padding.
    fn frame_sources(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.rows());
        for n in 0..self.n_chunks {
            for c in 0..self.chunk_size {
                let t = n * self.hop + c;
                idx.push((t < self.original_len).then_some(t));
            }
        }
        idx
    }

    /// Chunk-major rows reordered position-major: row `c·Nc + n` reads
    /// chunk `n`, position `c`.
    fn position_major(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.rows());
        for c in 0..self.chunk_size {
            idx.extend((0..self.n_chunks).map(|n| Some(n * self.chunk_size + c)));
        }
        idx
    }

    /// Maps position-major rows (`c·Nc + n`) back to chunk-major order.
    fn unpermute(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.rows());
        for n in 0..self.n_chunks {
            for c in 0..self.chunk_size {
                idx.push(Some(c * self.n_chunks + n));
            }
        }
        idx
    }
}

/// Chunked feature map, `data` shaped `[Nc × C × F]`.
#[derive(Debug, Clone)]
pub struct ChunkTensor {
    pub data: NdArray,
    pub geometry: ChunkGeometry,
}

pub fn chunk_graph<G: Graph>(g: &mut G, h: &G::V, geom: &ChunkGeometry) -> Result<G::V> {
    g.gather_rows(h, Arc::new(geom.frame_sources()))
}

pub fn overlap_add_graph<G: Graph>(g: &mut G, x: &G::V, geom: &ChunkGeometry) -> Result<G::V> {
    g.scatter_mean_rows(x, Arc::new(geom.frame_sources()), geom.original_len)
}

/// Split a `[T' × F]` feature map into 50%-overlapping chunks of `C` frames.
pub fn chunk(h: &NdArray, chunk_size: usize) -> Result<ChunkTensor> {
    let geometry = ChunkGeometry::new(h.rows(), chunk_size)?;
    let mut g = Eval;
    let hv = g.constant(h.clone());
    let out = chunk_graph(&mut g, &hv, &geometry)?;
    let data = (*out).clone().reshape(&[geometry.n_chunks, chunk_size, h.cols()])?;
    Ok(ChunkTensor { data, geometry })
}

/// Sum chunks at their offsets, divide by coverage, truncate to the
/// original length.
pub fn overlap_add(x: &ChunkTensor) -> Result<NdArray> {
    let geom = &x.geometry;
    let width = x.data.len() / geom.rows();
    let mut g = Eval;
    let xv = g.constant(x.data.clone().reshape(&[geom.rows(), width])?);
    Ok((*overlap_add_graph(&mut g, &xv, geom)?).clone())
}

#[derive(Debug, Clone)]
pub struct DualPathRepeat {
    pub intra: TransformerStackParams,
    pub inter: TransformerStackParams,
}

#[derive(Debug, Clone)]
pub struct SepformerBlockParams {
    pub repeats: Vec<DualPathRepeat>,
    pub intra_spec: AttentionSpec,
    pub inter_spec: AttentionSpec,
}

impl SepformerBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        repeats: usize,
        intra_depth: usize,
        inter_depth: usize,
        d_ff: usize,
        use_positional_encoding: bool,
        intra_spec: AttentionSpec,
        inter_spec: AttentionSpec,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(repeats >= 1, "block needs at least one repeat");
        let repeats = (0..repeats)
            .map(|_| DualPathRepeat {
                intra: TransformerStackParams::init(intra_depth, d_ff, use_positional_encoding, &intra_spec, rng),
                inter: TransformerStackParams::init(inter_depth, d_ff, use_positional_encoding, &inter_spec, rng),
            })
            .collect();
        SepformerBlockParams {
            repeats,
            intra_spec,
            inter_spec,
        }
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        for (r, rep) in self.repeats.iter().enumerate() {
            v.extend(rep.intra.params().into_iter().map(|(n, p)| (format!("block{r}.intra.{n}"), p)));
            v.extend(rep.inter.params().into_iter().map(|(n, p)| (format!("block{r}.inter.{n}"), p)));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        for (r, rep) in self.repeats.iter_mut().enumerate() {
            v.extend(rep.intra.params_mut().into_iter().map(|(n, p)| (format!("block{r}.intra.{n}"), p)));
            v.extend(rep.inter.params_mut().into_iter().map(|(n, p)| (format!("block{r}.inter.{n}"), p)));
        }
        v
    }

    fn spec_for(spec: &AttentionSpec, repeat: usize, inter: bool) -> AttentionSpec {
        let offset = 1000 * repeat as u64 + if inter { 500 } else { 0 };
        spec.clone().with_seed(spec.seed.wrapping_add(offset))
    }
}

/// Apply `stack` to each chunk independently, all chunks as one batch.
pub fn intra_pass<G: Graph>(
    g: &mut G,
    x: &G::V,
    geom: &ChunkGeometry,
    stack: &TransformerStackParams,
    spec: &AttentionSpec,
) -> Result<G::V> {
    transformer_stack_segments(g, x, stack, spec, geom.chunk_size)
}

/// Apply `stack` across chunks, independently for each intra position.
pub fn inter_pass<G: Graph>(
    g: &mut G,
    x: &G::V,
    geom: &ChunkGeometry,
    stack: &TransformerStackParams,
    spec: &AttentionSpec,
) -> Result<G::V> {
    let by_position = g.gather_rows(x, Arc::new(geom.position_major()))?;
    let y = transformer_stack_segments(g, &by_position, stack, spec, geom.n_chunks)?;
    drop(by_position);
    g.gather_rows(&y, Arc::new(geom.unpermute()))
}

/// `N` repeats of IntraT followed by InterT over a chunked feature map.
pub fn sepformer_block<G: Graph>(g: &mut G, x: &G::V, geom: &ChunkGeometry, p: &SepformerBlockParams) -> Result<G::V> {
    let mut h = x.clone();
    for (r, rep) in p.repeats.iter().enumerate() {
        h = intra_pass(g, &h, geom, &rep.intra, &SepformerBlockParams::spec_for(&p.intra_spec, r, false))?;
        h = inter_pass(g, &h, geom, &rep.inter, &SepformerBlockParams::spec_for(&p.inter_spec, r, true))?;
    }
    Ok(h)
}

/// Convenience forward on a [`ChunkTensor`].
pub fn sepformer_block_eval(x: &ChunkTensor, p: &SepformerBlockParams) -> Result<ChunkTensor> {
    let geom = x.geometry;
    let width = x.data.len() / geom.rows();
    let mut g = Eval;
    let xv = g.constant(x.data.clone().reshape(&[geom.rows(), width])?);
    let y = sepformer_block(&mut g, &xv, &geom, p)?;
    Ok(ChunkTensor {
        data: (*y).clone().reshape(&[geom.n_chunks, geom.chunk_size, width])?,
        geometry: geom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{positional_encoding, AttentionKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> NdArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NdArray::from_parts(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn geometry_cases() {
        let g = ChunkGeometry::new(1000, 250).unwrap();
        assert_eq!((g.hop, g.n_chunks, g.padded_len), (125, 7, 1000));
        let g = ChunkGeometry::new(100, 250).unwrap();
        assert_eq!((g.padded_len, g.n_chunks), (250, 1));
        let g = ChunkGeometry::new(251, 250).unwrap();
        assert_eq!((g.padded_len, g.n_chunks), (375, 2));
        assert!(matches!(ChunkGeometry::new(10, 7), Err(Error::InvalidChunkSize(7))));
        assert!(matches!(ChunkGeometry::new(10, 0), Err(Error::InvalidChunkSize(0))));
    }

    #[test]
    fn ones_overlap_add_hand_case() {
        let geometry = ChunkGeometry::new(6, 4).unwrap();
        assert_eq!(geometry.n_chunks, 2);
        let x = ChunkTensor {
            data: NdArray::full(&[2, 4, 1], 1.0),
            geometry,
        };
        assert_eq!(overlap_add(&x).unwrap().data(), &[1.0; 6]);
        let z = ChunkTensor {
            data: NdArray::zeros(&[2, 4, 3]),
            geometry,
        };
        assert!(overlap_add(&z).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn chunk_layout() {
        let h = NdArray::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = chunk(&h, 4).unwrap();
        assert_eq!(c.data.shape(), &[2, 4, 1]);
        assert_eq!(c.data.data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 0.0]);
    }

    fn zeroed_block(f: usize, heads: usize) -> SepformerBlockParams {
        let spec = AttentionSpec::new(AttentionKind::Full, heads, f).unwrap();
        let mut p = SepformerBlockParams::init(1, 1, 1, 4, true, spec.clone(), spec, &mut ChaCha8Rng::seed_from_u64(1));
        for (_, param) in p.params_mut() {
            let shape = param.shape().to_vec();
            param.set(NdArray::zeros(&shape));
        }
        p
    }

    #[test]
    fn degenerate_block_hand_trace() {
        // zero layers make each stack f(z) = 2z + e, so the block gives
        // 2·(2x + e_C[c]) + e_Nc[n]
        let p = zeroed_block(2, 1);
        let x = rand_matrix(8, 2, 3).reshape(&[2, 4, 2]).unwrap();
        let geometry = ChunkGeometry::new(6, 4).unwrap();
        let y = sepformer_block_eval(&ChunkTensor { data: x.clone(), geometry }, &p).unwrap();
        let e_c = positional_encoding(4, 2);
        let e_n = positional_encoding(2, 2);
        for n in 0..2 {
            for c in 0..4 {
                for f in 0..2 {
                    let i = (n * 4 + c) * 2 + f;
                    let intra = (x.data()[i] + e_c.at(c, f)) + x.data()[i];
                    let expect = (intra + e_n.at(n, f)) + intra;
                    assert_eq!(y.data.data()[i], expect);
                }
            }
        }
    }

    #[test]
    fn single_chunk_block_runs() {
        let spec = AttentionSpec::new(AttentionKind::Full, 2, 4).unwrap();
        let p = SepformerBlockParams::init(1, 1, 1, 8, true, spec.clone(), spec, &mut ChaCha8Rng::seed_from_u64(4));
        let h = rand_matrix(5, 4, 5);
        let c = chunk(&h, 6).unwrap();
        assert_eq!(c.geometry.n_chunks, 1);
        let y = sepformer_block_eval(&c, &p).unwrap();
        assert_eq!(y.data.shape(), &[1, 6, 4]);
        assert!(y.data.is_finite());
    }

    #[test]
    fn intra_and_inter_variants_can_differ() {
        let intra = AttentionSpec::new(AttentionKind::reformer(), 2, 4).unwrap();
        let inter = AttentionSpec::new(AttentionKind::Full, 2, 4).unwrap();
        let p = SepformerBlockParams::init(1, 1, 1, 8, true, intra, inter, &mut ChaCha8Rng::seed_from_u64(6));
        assert!(p.repeats[0].intra.layers[0].attention.wk.is_none());
        assert!(p.repeats[0].inter.layers[0].attention.wk.is_some());
        let y = sepformer_block_eval(&chunk(&rand_matrix(30, 4, 7), 10).unwrap(), &p).unwrap();
        assert!(y.data.is_finite());
    }

    #[test]
    fn intra_and_inter_independence() {
        let spec = AttentionSpec::new(AttentionKind::Full, 2, 4).unwrap();
        let stack = TransformerStackParams::init(1, 8, true, &spec, &mut ChaCha8Rng::seed_from_u64(8));
        let geom = ChunkGeometry::new(20, 8).unwrap();
        let x = rand_matrix(geom.rows(), 4, 9);
        let mut y = x.clone();
        // perturb chunk 2 (rows 16..24) at intra position 3 (row 19)
        y.row_mut(19)[0] += 0.5;
        let run = |a: &NdArray, inter: bool| {
            let mut g = Eval;
            let v = g.constant(a.clone());
            let o = if inter {
                inter_pass(&mut g, &v, &geom, &stack, &spec)
            } else {
                intra_pass(&mut g, &v, &geom, &stack, &spec)
            };
            (*o.unwrap()).clone()
        };
        let (a, b) = (run(&x, false), run(&y, false));
        for r in 0..geom.rows() {
            let changed = a.row(r) != b.row(r);
            assert_eq!(changed, r / 8 == 2, "intra row {r}");
        }
        let (a, b) = (run(&x, true), run(&y, true));
        for r in 0..geom.rows() {
            let changed = a.row(r) != b.row(r);
            assert_eq!(changed, r % 8 == 3, "inter row {r}");
        }
    }
}
