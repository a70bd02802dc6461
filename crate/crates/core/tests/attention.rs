use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepformer::attention::{self, AttentionKind, AttentionSpec, AttentionWeights};
use sepformer::ndkernel::{Eval, Graph, NdArray};
use sepformer::profiler::attention_core_macs;

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> NdArray {
    NdArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_kinds(max_len: usize) -> Vec<AttentionKind> {
    vec![
        AttentionKind::Full,
        AttentionKind::Longformer { window: 5, global_every: Some(7) },
        AttentionKind::Linformer { k: 6, max_len },
        AttentionKind::Reformer { n_buckets: 4, n_rounds: 2, bucket_chunk: 4 },
    ]
}

fn run(x: &NdArray, w: &AttentionWeights, spec: &AttentionSpec) -> NdArray {
    let mut g = Eval;
    let xv = g.constant(x.clone());
    (*attention::attend(&mut g, &xv, w, spec).unwrap()).clone()
}

#[test]
fn full_attention_commutes_with_position_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = AttentionSpec::new(AttentionKind::Full, 2, 8).unwrap();
    let w = AttentionWeights::init(&spec, &mut rng);
    let x = random(&mut rng, 12, 8);
    let mut perm: Vec<usize> = (0..12).collect();
    perm.reverse();
    perm.swap(0, 5);
    let px = NdArray::from_rows(&perm.iter().map(|&i| x.row(i)).collect::<Vec<_>>()).unwrap();
    let out = run(&x, &w, &spec);
    let pout = run(&px, &w, &spec);
    for (r, &i) in perm.iter().enumerate() {
        let d = pout.row(r).iter().zip(out.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9, "row {r}: {d}");
    }
}

#[test]
fn every_attention_row_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in small_kinds(40) {
        let spec = AttentionSpec::new(kind.clone(), 2, 8).unwrap().with_seed(9);
        let w = AttentionWeights::init(&spec, &mut rng);
        let x = random(&mut rng, 30, 8);
        for map in attention::attention_maps(&x, &w, &spec).unwrap() {
            for r in 0..map.rows() {
                let row = map.row(r);
                assert!(row.iter().all(|&v| v >= 0.0), "{}", kind.name());
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{}", kind.name());
            }
        }
    }
}

#[test]
fn batched_segments_match_separate_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (len, n_seg) = (10, 4);
    for kind in small_kinds(len) {
        let spec = AttentionSpec::new(kind.clone(), 2, 8).unwrap().with_seed(4);
        let w = AttentionWeights::init(&spec, &mut rng);
        let x = random(&mut rng, len * n_seg, 8);
        let mut g = Eval;
        let xv: Arc<NdArray> = g.constant(x.clone());
        let batched = attention::attend_segments(&mut g, &xv, &w, &spec, len).unwrap();
        for s in 0..n_seg {
            let seg = NdArray::from_rows(&(0..len).map(|t| x.row(s * len + t)).collect::<Vec<_>>()).unwrap();
            let alone = run(&seg, &w, &spec);
            for t in 0..len {
                let d = alone
                    .row(t)
                    .iter()
                    .zip(batched.row(s * len + t))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(d < 1e-12, "{} segment {s} row {t}: {d}", kind.name());
            }
        }
    }
}

#[test]
fn full_attention_cost_is_quadratic() {
    let spec = AttentionSpec::new(AttentionKind::Full, 8, 256).unwrap();
    for t in [1000, 1500, 2000] {
        let r = attention_core_macs(&spec, 2 * t).unwrap() as f64 / attention_core_macs(&spec, t).unwrap() as f64;
        assert!((3.6..=4.4).contains(&r), "T={t}: {r}");
    }
    for kind in [AttentionKind::linformer(4000), AttentionKind::reformer()] {
        let spec = AttentionSpec::new(kind.clone(), 8, 256).unwrap();
        let r = attention_core_macs(&spec, 4000).unwrap() as f64 / attention_core_macs(&spec, 2000).unwrap() as f64;
        assert!((1.9..=2.1).contains(&r), "{}: {r}", kind.name());
    }
    // global rows see every position, so a thin quadratic term remains
    let spec = AttentionSpec::new(AttentionKind::longformer(), 8, 256).unwrap();
    let r = attention_core_macs(&spec, 4000).unwrap() as f64 / attention_core_macs(&spec, 2000).unwrap() as f64;
    assert!((2.0..3.0).contains(&r), "longformer: {r}");
}

#[test]
fn positional_encoding_rows_are_bounded_and_distinct() {
    let pe = attention::positional_encoding(64, 16);
    assert!(pe.max_abs() <= 1.0);
    for a in 0..64 {
        for b in a + 1..64 {
            assert!(pe.row(a) != pe.row(b));
        }
    }
}
