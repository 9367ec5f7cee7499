use plugmem::numerics::kernels::{matmul, matmul_nt, softmax_rows, transpose};
use plugmem::numerics::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in matrix(6, 9)) {
        let x = &seed[..rows * cols];
        let y = softmax_rows(x, rows, cols, None).unwrap();
        for r in y.chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_columns_get_zero(cols in 2usize..9, x in matrix(1, 9), cut in 1usize..8) {
        let cut = cut.min(cols - 1);
        let keep: Vec<bool> = (0..cols).map(|j| j < cut).collect();
        let y = softmax_rows(&x[..cols], 1, cols, Some(&keep)).unwrap();
        prop_assert!(y[cut..].iter().all(|&p| p == 0.0));
        prop_assert!((y[..cut].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transposed_product_agrees(m in 1usize..7, k in 1usize..7, n in 1usize..7, a in matrix(7, 7), b in matrix(7, 7)) {
        let (a, b) = (&a[..m * k], &b[..n * k]);
        let direct = matmul_nt(a, b, m, k, n);
        let via = matmul(a, &transpose(b, n, k), m, k, n);
        for (x, y) in direct.iter().zip(&via) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn layer_norm_centres_rows(x in matrix(3, 5)) {
        prop_assume!(x.chunks(5).all(|r| r.iter().any(|v| (v - r[0]).abs() > 1e-3)));
        let tape = Tape::new();
        let xv = tape.leaf(&Tensor::new(vec![3, 5], x).unwrap());
        let g = tape.constant(vec![5], vec![1.0; 5]).unwrap();
        let b = tape.constant(vec![5], vec![0.0; 5]).unwrap();
        let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
        for r in tape.data(y).chunks(5) {
            let mean = r.iter().sum::<f64>() / 5.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn nan_propagates_through_softmax() {
    let y = softmax_rows(&[f64::NAN, 0.0, 1.0], 1, 3, None).unwrap();
    assert!(y.iter().any(|p| p.is_nan()));
    assert!(softmax_rows(&[1.0, 2.0], 1, 2, Some(&[false, false])).is_none());
}
