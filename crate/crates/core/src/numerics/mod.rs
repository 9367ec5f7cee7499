//! Dense `f64` tensors with a reverse-mode differentiation tape.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_grad, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data[i * k + t] * b.data[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(&*tape.data(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(&*tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(3, 4, 2), (1, 1, 1), (17, 64, 9), (64, 64, 64)] {
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let tape = Tape::new();
            let c = tape.matmul(tape.leaf(&a), tape.leaf(&b)).unwrap();
            let oracle = triple_loop(&a, &b);
            for (x, y) in tape.data(c).iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(&*tape.data(tape.softmax_rows(x).unwrap()), &[0.5, 0.5]);

        let x = tape.constant(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert!((tape.data(y)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.data(y)[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = tape.constant(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(y)[1] >= 0.0 && tape.data(y)[1] < 1e-300);

        let x = tape.constant(vec![2, 0], vec![]).unwrap();
        assert!(tape.softmax_rows(x).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let ones = tape.constant(vec![4], vec![1.0; 4]).unwrap();
        let zeros = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let x = tape.constant(vec![1, 4], vec![5.0; 4]).unwrap();
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!(tape.data(y).iter().all(|v| *v == 0.0));

        let g = tape.constant(vec![2], vec![1.0; 2]).unwrap();
        let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        let x = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-12);
        assert!((tape.data(y)[1] + 1.0).abs() < 1e-12);

        let g0 = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let b7 = tape.constant(vec![4], vec![7.0; 4]).unwrap();
        let x = tape.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 9.0]).unwrap();
        let y = tape.layer_norm(x, g0, b7, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|v| *v == 7.0));

        let e = tape.constant(vec![0], vec![]).unwrap();
        let x = tape.constant(vec![3, 0], vec![]).unwrap();
        assert!(tape.layer_norm(x, e, e, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(kernels::gelu(0.0), 0.0);
        assert!((kernels::gelu(20.0) - 20.0).abs() < 1e-12);
        assert!(kernels::gelu(-20.0).abs() < 1e-12);
        // mpmath at 30 digits: 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let reference = 0.841_191_990_608_276_7;
        assert!((kernels::gelu(1.0) - reference).abs() < 1e-10);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap().with_grad();
        let tape = Tape::new();
        let v = tape.leaf(&w);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::zeros(&[2, 2]).with_grad();
        let tape = Tape::new();
        let v = tape.leaf(&w);
        let y = tape.scale(v, 2.0);
        assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 3]).with_grad();
        // loss = sum(A·A): A appears on both sides.
        let tape = Tape::new();
        let v = tape.leaf(&a);
        let loss = tape.sum(tape.matmul(v, v).unwrap());
        let g = tape.backward(loss).unwrap().get(v).unwrap().to_vec();

        // single-use pieces: d/dA sum(A·B) and d/dB sum(B·A) with B = A held fixed
        let tape1 = Tape::new();
        let v1 = tape1.leaf(&a);
        let c = tape1.leaf(&Tensor::new(a.shape.clone(), a.data.clone()).unwrap());
        let l1 = tape1.sum(tape1.matmul(v1, c).unwrap());
        let g1 = tape1.backward(l1).unwrap().get(v1).unwrap().to_vec();
        let tape2 = Tape::new();
        let v2 = tape2.leaf(&a);
        let c2 = tape2.leaf(&Tensor::new(a.shape.clone(), a.data.clone()).unwrap());
        let l2 = tape2.sum(tape2.matmul(c2, v2).unwrap());
        let g2 = tape2.backward(l2).unwrap().get(v2).unwrap().to_vec();
        for i in 0..9 {
            assert!((g[i] - (g1[i] + g2[i])).abs() <= 1e-12 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn finite_diff_examples() {
        let p = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data[0] * t.data[0], &p, 1e-5);
        assert!((g.data[0] - 6.0).abs() < 1e-8);

        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|_| 4.2, &p, 1e-5);
        assert!(g.data.iter().all(|v| *v == 0.0));

        let c = [0.5, -1.5, 2.0];
        let g = finite_diff_grad(|t| t.data.iter().zip(&c).map(|(a, b)| a * b).sum(), &p, 1e-5);
        for (x, y) in g.data.iter().zip(&c) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    /// Every op's backward rule against central differences on one composed graph.
    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[4, 6]).with_grad();
        let w = random(&mut rng, &[6, 6]).with_grad();
        let gamma = random(&mut rng, &[6]).with_grad();
        let beta = random(&mut rng, &[6]).with_grad();
        let table = random(&mut rng, &[5, 6]).with_grad();

        let build = |x: &Tensor, w: &Tensor, gamma: &Tensor, beta: &Tensor, table: &Tensor| {
            let tape = Tape::new();
            let (xv, wv, gv, bv, tv) = (
                tape.leaf(x),
                tape.leaf(w),
                tape.leaf(gamma),
                tape.leaf(beta),
                tape.leaf(table),
            );
            let emb = tape.gather_rows(tv, &[0, 3, 3, 1]).unwrap();
            let h = tape.add(xv, emb).unwrap();
            let h = tape.layer_norm(h, gv, bv, 1e-5).unwrap();
            let hw = tape.matmul(h, wv).unwrap();
            let hw = tape.add_bias(hw, gv).unwrap();
            let left = tape.slice_cols(hw, 0, 3).unwrap();
            let right = tape.slice_cols(hw, 3, 3).unwrap();
            let swapped = tape.concat_cols(&[right, left]).unwrap();
            let act = tape.gelu(swapped);
            let scores = tape.matmul(act, tape.transpose(h).unwrap()).unwrap();
            let probs = tape.softmax_rows_masked(scores, &[true, false, true, true]).unwrap();
            let mixed = tape.matmul(probs, h).unwrap();
            let top = tape.slice_rows(mixed, 1, 2).unwrap();
            let both = tape.concat_rows(&[top, mixed]).unwrap();
            let sq = tape.mul(both, both).unwrap();
            let r = tape.reshape(sq, &[3, 12]).unwrap();
            let ce = tape.cross_entropy(r, &[2, -1, 7]).unwrap();
            let loss = tape.add(tape.scale(tape.sum(sq), 0.1), ce).unwrap();
            (tape, loss, [xv, wv, gv, bv, tv])
        };

        let (tape, loss, vars) = build(&x, &w, &gamma, &beta, &table);
        let grads = tape.backward(loss).unwrap();
        let params = [&x, &w, &gamma, &beta, &table];
        for (k, p) in params.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut ps: Vec<Tensor> = params.iter().map(|t| (*t).clone()).collect();
                    ps[k] = probe.clone();
                    let (t, l, _) = build(&ps[0], &ps[1], &ps[2], &ps[3], &ps[4]);
                    t.scalar(l)
                },
                p,
                1e-5,
            );
            let check = compare_gradients(grads.get(vars[k]).unwrap(), &numeric.data, 1e-8);
            assert!(check.checked > 0);
            assert!(check.max_rel_err < 1e-4, "param {k}: {check:?}");
        }
    }
}
