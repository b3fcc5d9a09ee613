use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_orthogonal_pick() {
    let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    let r = mat(&[&[1.0, 0.0]]).matmul(&mat(&[&[0.0], &[5.0]])).unwrap();
    assert_eq!(r.data(), &[0.0]);
}

#[test]
fn matmul_matches_scalar_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - s).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_rejects_mismatch() {
    let mut tape = Tape::new();
    let a = tape.var(Tensor::zeros(&[2, 3]));
    let b = tape.var(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.var(mat(&[&[0.0, 0.0]]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.var(mat(&[&[MASK_SENTINEL, 0.0]]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 1.0]);

    let x = tape.var(mat(&[&[1.0, 2.0, 3.0]]));
    let y = tape.softmax(x).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in tape.value(y).data().iter().enumerate() {
        assert!((v - ((k + 1) as f64).exp() / z).abs() <= 1e-12);
    }
}

#[test]
fn softmax_fully_masked_row_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.var(mat(&[&[0.0, 1.0], &[MASK_SENTINEL, MASK_SENTINEL]]));
    assert!(matches!(tape.softmax(x), Err(crate::Error::EmptyRow { row: 1 })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let x = tape.var(mat(&[&[1.0, 1.0, 1.0, 1.0]]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.var(mat(&[&[1.0, -1.0]]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y).data()[0] - s).abs() < 1e-15);
    assert!((tape.value(y).data()[1] + s).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = tape.constant(Tensor::full(&[32], 1.0));
    let b = tape.constant(Tensor::zeros(&[32]));
    let x = tape.var(random(&[1, 32], &mut rng));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    let mean = v.iter().sum::<f64>() / 32.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 32.0;
    assert!(mean.abs() <= 1e-9);
    assert!((var - 1.0).abs() <= 1e-6);
}

#[test]
fn layer_norm_needs_two_entries() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let x = tape.var(mat(&[&[3.0]]));
    assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");

    let mut tape = Tape::new();
    let v = tape.var(x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);
}

#[test]
fn grad_check_rejects_bad_eps() {
    let x = Tensor::scalar(1.0);
    assert!(grad_check(|t, x| t.sum(x), &x, 1e-1).is_err());
}

#[test]
fn gradients_accumulate_across_shared_uses() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.add(a, x).unwrap();
    let s = tape.sum(b).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
}

/// Weighted sum so that every output coordinate matters to the scalar.
fn weighted_sum(t: &mut Tape<'_>, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&shape, &mut rng));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check_op(shape: &[usize], seed: u64, f: impl Fn(&mut Tape<'_>, Var) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    let err = grad_check(
        |t, x| {
            let y = f(t, x)?;
            weighted_sum(t, y, seed + 1)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b = random(&[4, 3], &mut rng);
    let row = random(&[4], &mut rng);
    let other = random(&[3, 4], &mut rng);
    check_op(&[3, 4], 1, |t, x| {
        let b = t.constant(b.clone());
        t.matmul(x, b)
    });
    check_op(&[4, 3], 2, |t, x| {
        let a = t.constant(other.clone());
        t.matmul(a, x)
    });
    check_op(&[3, 4], 3, |t, x| {
        let o = t.constant(other.clone());
        t.matmul_nt(x, o)
    });
    check_op(&[3, 4], 4, |t, x| {
        let o = t.constant(other.clone());
        t.matmul_nt(o, x)
    });
    check_op(&[3, 4], 5, |t, x| {
        let r = t.constant(row.clone());
        t.add_row(x, r)
    });
    check_op(&[4], 6, |t, r| {
        let x = t.constant(other.clone());
        t.add_row(x, r)
    });
    check_op(&[3, 4], 7, |t, x| t.mul(x, x));
    check_op(&[3, 4], 8, |t, x| t.scale(x, -0.7));
    check_op(&[3, 4], 9, |t, x| t.tanh(x));
    check_op(&[3, 4], 10, |t, x| t.sigmoid(x));
    check_op(&[3, 4], 11, |t, x| t.silu(x));
    check_op(&[3, 4], 12, |t, x| {
        // Shift away from the kink at zero.
        let s = t.scale(x, 1.0)?;
        let y = t.mul(s, s)?;
        let c = t.constant(Tensor::full(&[3, 4], 0.05));
        let y = t.add(y, c)?;
        t.relu(y)
    });
    check_op(&[3, 4], 13, |t, x| t.softmax(x));
    check_op(&[3, 4], 14, |t, x| t.log_softmax(x));
    check_op(&[3, 4], 15, |t, x| {
        let g = t.constant(Tensor::new(vec![4], vec![1.0, 0.5, -0.3, 2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![4], vec![0.1, 0.0, 0.2, -0.1]).unwrap());
        t.layer_norm(x, g, b, 1e-5)
    });
    check_op(&[4], 16, |t, g| {
        let x = t.constant(other.clone());
        let b = t.constant(Tensor::zeros(&[4]));
        t.layer_norm(x, g, b, 1e-5)
    });
    check_op(&[5, 3], 17, |t, table| t.embedding(table, &[0, 4, 4, 2]));
    check_op(&[6, 3], 18, |t, x| {
        let k = t.constant(random(&[3, 3], &mut ChaCha8Rng::seed_from_u64(5)));
        let b = t.constant(Tensor::full(&[3], 0.1));
        t.causal_depthwise_conv(x, k, b)
    });
    check_op(&[3, 3], 19, |t, k| {
        let x = t.constant(random(&[6, 3], &mut ChaCha8Rng::seed_from_u64(6)));
        let b = t.constant(Tensor::zeros(&[3]));
        t.causal_depthwise_conv(x, k, b)
    });
    check_op(&[3, 4], 20, |t, x| {
        let o = t.constant(other.clone());
        let r = t.concat_rows(&[x, o, x])?;
        let c = t.concat_cols(&[r, r])?;
        let s = t.slice_rows(c, 1, 4)?;
        t.slice_cols(s, 2, 5)
    });
    check_op(&[8, 2], 21, |t, x| t.unfold_rows(x, 3, 2));
    check_op(&[2, 3], 22, |t, x| t.gather(x, vec![0, 5, 5, 2], vec![2, 2]));
    check_op(&[2, 3], 23, |t, x| {
        let m = t.mask_fill(x, &[true, false, true, true, true, false])?;
        t.softmax(m)
    });
    check_op(&[2, 3], 24, |t, a| {
        let b = t.constant(random(&[3, 3], &mut ChaCha8Rng::seed_from_u64(8)));
        t.pair_sum(a, b)
    });
    check_op(&[3, 3], 25, |t, b| {
        let a = t.constant(random(&[2, 3], &mut ChaCha8Rng::seed_from_u64(9)));
        t.pair_sum(a, b)
    });
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(1e300));
    assert!(matches!(tape.mul(x, x), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn embedding_rejects_out_of_vocabulary() {
    let mut tape = Tape::new();
    let t = tape.var(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.embedding(t, &[3]), Err(crate::Error::OutOfVocabulary { id: 3, vocab: 3 })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows >= 1);
        let x = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.var(x);
        let s = tape.softmax(v).unwrap();
        let l = tape.log_softmax(v).unwrap();
        for r in 0..rows {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(log_sum_exp(tape.value(l).row(r)).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 1..10), c in -50.0f64..50.0) {
        let n = vals.len();
        let mut tape = Tape::new();
        let a = tape.var(Tensor::new(vec![1, n], vals.clone()).unwrap());
        let b = tape.var(Tensor::new(vec![1, n], vals.iter().map(|v| v + c).collect()).unwrap());
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) <= 1e-12);
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let c = random(&[n, p], &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) / scale <= 1e-9);
    }
}
