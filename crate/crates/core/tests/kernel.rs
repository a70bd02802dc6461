use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepformer::ndkernel::{self, NdArray};

fn random(rng: &mut impl Rng, shape: &[usize]) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_is_associative_on_small_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        // diagonally dominant keeps the products well conditioned
        let mut a = random(&mut rng, &[8, 8]);
        let b = random(&mut rng, &[8, 8]);
        let c = random(&mut rng, &[8, 8]);
        for i in 0..8 {
            a.set(i, i, a.at(i, i) + 4.0);
        }
        let left = ndkernel::matmul(&ndkernel::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = ndkernel::matmul(&a, &ndkernel::matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_ignores_row_offsets(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]);
        let offsets: Vec<f64> = (0..rows).map(|r| shift * (r as f64 + 1.0)).collect();
        let mut y = x.clone();
        for r in 0..rows {
            y.row_mut(r).iter_mut().for_each(|v| *v += offsets[r]);
        }
        let (a, b) = (ndkernel::softmax_rows(&x), ndkernel::softmax_rows(&y));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        for r in 0..rows {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint(
        kernel in 1usize..6,
        stride in 1usize..5,
        extra in 0usize..30,
        filters in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = kernel + extra;
        let x = random(&mut rng, &[t]);
        let w = random(&mut rng, &[filters, 1, kernel]);
        let frames = ndkernel::conv_out_len(t, kernel, stride);
        let y = random(&mut rng, &[frames, filters]);
        let cx = ndkernel::conv1d(&x, &w, stride).unwrap();
        let cty = ndkernel::conv1d_transpose(&y, &w, stride).unwrap();
        // the transpose covers (frames−1)·stride + kernel samples, at most t
        let lhs = cx.dot(&y);
        let rhs: f64 = cty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }
}
