use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepformer::config::{Chunking, SepformerConfig, Variant};
use sepformer::ndkernel::{Eval, Graph, NdArray, Tape};
use sepformer::objectives::pit_loss;
use sepformer::sepmodel::Sepformer;
use sepformer::train::pit_loss_graph;

fn tiny(sources: usize, chunk: usize, variant: Variant) -> SepformerConfig {
    let mut cfg = SepformerConfig::standard();
    cfg.filters = 8;
    cfg.kernel_size = 4;
    cfg.stride = 2;
    cfg.chunking = Chunking::Size(chunk);
    cfg.repeats = 1;
    cfg.intra_layers = 1;
    cfg.inter_layers = 1;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.sources = sources;
    cfg.intra_attention = variant;
    cfg.max_seconds = 0.05;
    cfg.reformer_chunk = 4;
    cfg.longformer_window = 5;
    cfg.longformer_global_every = 7;
    cfg.linformer_k = 8;
    cfg
}

fn noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_intermediate_has_its_stated_shape(
        sources in 1usize..4,
        half in 2usize..8,
        samples in 8usize..300,
        variant in prop_oneof![Just(Variant::Full), Just(Variant::Longformer), Just(Variant::Linformer), Just(Variant::Reformer)],
        seed in any::<u64>(),
    ) {
        let cfg = tiny(sources, 2 * half, variant);
        let model = Sepformer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = noise(&mut rng, samples);
        let mut g = Eval;
        let xv = g.constant(NdArray::vector(x));
        let tr = model.forward_traced(&mut g, &xv).unwrap();
        let frames = cfg.frames(samples).unwrap();
        let geom = cfg.geometry(frames).unwrap();
        let f = cfg.filters;
        prop_assert_eq!(tr.latent.shape(), &[frames, f][..]);
        prop_assert_eq!(tr.projected.shape(), &[frames, f][..]);
        prop_assert_eq!(tr.chunked.shape(), &[geom.rows(), f][..]);
        prop_assert_eq!(tr.block_out.shape(), &[geom.rows(), f][..]);
        prop_assert_eq!(tr.expanded.shape(), &[geom.rows(), f * sources][..]);
        prop_assert_eq!(tr.per_source.len(), sources);
        prop_assert_eq!(tr.masks.len(), sources);
        for k in 0..sources {
            prop_assert_eq!(tr.per_source[k].shape(), &[frames, f][..]);
            prop_assert_eq!(tr.masks[k].shape(), &[frames, f][..]);
            prop_assert_eq!(tr.estimates[k].shape(), &[samples][..]);
        }
    }
}

#[test]
fn training_loss_ignores_target_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Sepformer::new(tiny(3, 8, Variant::Full)).unwrap();
    let x = noise(&mut rng, 160);
    let targets: Vec<Vec<f64>> = (0..3).map(|_| noise(&mut rng, 160)).collect();
    let out = model.separate(&x).unwrap();
    let est: Vec<&[f64]> = out.estimates.iter().map(Vec::as_slice).collect();
    let order = |p: [usize; 3]| -> Vec<&[f64]> { p.iter().map(|&i| targets[i].as_slice()).collect() };
    let (base, _) = pit_loss(&est, &order([0, 1, 2])).unwrap();
    for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let (l, _) = pit_loss(&est, &order(p)).unwrap();
        assert_eq!(l, base);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 40;
    let targets: Vec<Vec<f64>> = (0..2).map(|_| noise(&mut rng, n)).collect();
    // estimates near a swapped assignment so the best permutation is strict
    let est: Vec<Vec<f64>> = (0..2)
        .map(|i| targets[1 - i].iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let trefs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let value = |e: &[Vec<f64>]| {
        let r: Vec<&[f64]> = e.iter().map(Vec::as_slice).collect();
        pit_loss(&r, &trefs).unwrap()
    };
    let (_, pit) = value(&est);
    let mut sorted: Vec<f64> = [pit.matrix[0][1] + pit.matrix[1][0], pit.matrix[0][0] + pit.matrix[1][1]].to_vec();
    sorted.sort_by(f64::total_cmp);
    assert!((sorted[1] - sorted[0]) / 2.0 >= 1.0, "assignment not strict");

    let mut tape = Tape::new();
    let leaves: Vec<_> = est.iter().map(|e| tape.leaf(NdArray::vector(e.clone()))).collect();
    let (loss, _) = pit_loss_graph(&mut tape, &leaves, &trefs).unwrap();
    let grads = tape.backward(loss);
    let h = 1e-6;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let mut up = est.clone();
            let mut down = est.clone();
            up[i][j] += h;
            down[i][j] -= h;
            numeric[j] = (value(&up).0 - value(&down).0) / (2.0 * h);
        }
        let num = NdArray::vector(numeric);
        let rel = analytic.max_abs_diff(&num) / analytic.max_abs().max(num.max_abs()).max(1e-12);
        assert!(rel < 1e-4, "estimate {i}: {rel}");
    }
}

#[test]
fn single_source_model_is_plain_enhancement() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Sepformer::new(tiny(1, 8, Variant::Full)).unwrap();
    let x = noise(&mut rng, 100);
    let target = noise(&mut rng, 100);
    let out = model.separate(&x).unwrap();
    assert_eq!(out.estimates.len(), 1);
    let (loss, pit) = pit_loss(&[&out.estimates[0]], &[&target]).unwrap();
    assert_eq!(pit.perm, vec![0]);
    let direct = sepformer::objectives::si_snr(&out.estimates[0], &target).unwrap();
    assert_eq!(loss, -direct);
}
