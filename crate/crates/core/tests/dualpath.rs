use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepformer::attention::{AttentionKind, AttentionSpec};
use sepformer::dualpath::{chunk, overlap_add};
use sepformer::ndkernel::NdArray;
use sepformer::profiler::attention_core_macs;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chunking_round_trips(
        features in 1usize..6,
        frames in 1usize..120,
        half in 1usize..30,
        seed in any::<u64>(),
    ) {
        let c = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = NdArray::matrix(frames, features, (0..frames * features).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let chunked = chunk(&h, c).unwrap();
        prop_assert_eq!(chunked.data.shape(), &[chunked.geometry.n_chunks, c, features][..]);
        let back = overlap_add(&chunked).unwrap();
        prop_assert_eq!(back.shape(), h.shape());
        prop_assert!(back.max_abs_diff(&h) <= 1e-12);
    }
}

#[test]
fn boundary_lengths_round_trip() {
    for c in [2, 4, 10, 250] {
        for frames in [c - 1, c, c + 1, 3 * c / 2, 4 * c + 1] {
            let h = NdArray::matrix(frames.max(1), 2, (0..frames.max(1) * 2).map(|i| i as f64).collect()).unwrap();
            let back = overlap_add(&chunk(&h, c).unwrap()).unwrap();
            assert_eq!(back, h, "C={c} T'={frames}");
        }
    }
}

#[test]
fn chunked_attention_cost_is_bounded() {
    let spec = AttentionSpec::new(AttentionKind::Full, 8, 256).unwrap();
    let (frames, c) = (2000, 250);
    let geom = sepformer::dualpath::ChunkGeometry::new(frames, c).unwrap();
    let chunked = geom.n_chunks as u64 * attention_core_macs(&spec, c).unwrap()
        + c as u64 * attention_core_macs(&spec, geom.n_chunks).unwrap();
    let whole = attention_core_macs(&spec, frames).unwrap();
    assert!(chunked < whole, "{chunked} vs {whole}");
    // Nc·C²·d + C·Nc²·d with the two matmuls of each attention call
    let d = 256u64;
    let (nc, cc) = (geom.n_chunks as u64, c as u64);
    assert_eq!(chunked, 2 * (nc * cc * cc * d + cc * nc * nc * d));
}
