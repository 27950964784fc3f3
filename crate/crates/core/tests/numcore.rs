use founddiff::numcore::{concat, grad_check, Rng, Tape, Tensor, DEFAULT_EPS};
use founddiff::Error;
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut rng = Rng::new(1);
    let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
    let tape = Tape::new();
    let eye = tape.constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let y = eye.matmul(tape.leaf(&x)).unwrap();
    assert_eq!(y.value(), x.values());
}

#[test]
fn matmul_shape_mismatch_reports_shapes() {
    let tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match a.matmul(b).unwrap_err() {
        Error::Shape { op, shapes } => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        e => panic!("{e}"),
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let y = tape.constant(vec![3], vec![0.0; 3]).unwrap().softmax_last_dim().unwrap();
    for v in y.value() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_rows_standardized() {
    let mut rng = Rng::new(5);
    let x = Tensor::randn(vec![4, 8], 3.0, &mut rng);
    let tape = Tape::new();
    let y = tape.leaf(&x).layer_norm(None, None, 0.0).unwrap().value();
    for row in y.chunks(8) {
        let m = row.iter().sum::<f64>() / 8.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10, "{m} {v}");
    }
}

#[test]
fn non_finite_output_is_rejected_with_op_name() {
    let tape = Tape::new();
    let x = tape.constant(vec![1], vec![1000.0]).unwrap();
    match x.exp().unwrap_err() {
        Error::NonFinite { op } => assert_eq!(op, "exp"),
        e => panic!("{e}"),
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.var(&t(&[2, 2], &[1., -2., 3., 0.5]));
    tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let xs = [0.3, -1.5, 2.0];
    let tape = Tape::new();
    let x = tape.var(&t(&[3], &xs));
    let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap(), xs.to_vec());
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.var(&t(&[2], &[1., 2.]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn backward_twice_doubles_exactly() {
    let mut rng = Rng::new(9);
    let x0 = Tensor::randn(vec![2, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let x = tape.var(&x0);
    let loss = x.silu().unwrap().softmax_last_dim().unwrap().mul(x).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    let once = x.grad().unwrap();
    tape.backward(loss).unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn mean_softmax_grad_matches_finite_differences() {
    let mut rng = Rng::new(17);
    let x = Tensor::randn(vec![5], 1.0, &mut rng);
    // mean(softmax) is constant 1/5, so weight the output to get a nontrivial gradient
    let w = Tensor::randn(vec![5], 1.0, &mut rng);
    let err = grad_check(
        |tape, v| {
            let w = tape.leaf(&w);
            v[0].softmax_last_dim()?.mul(w)?.mean()
        },
        &[x.clone()],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    let err = grad_check(|_, v| v[0].softmax_last_dim()?.mean(), &[x], DEFAULT_EPS).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn delta_kernel_conv_is_identity() {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(vec![3, 7, 5], 1.0, &mut rng);
    let mut w = vec![0.0; 3 * 3 * 9];
    for c in 0..3 {
        w[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let tape = Tape::new();
    let y = tape
        .leaf(&x)
        .conv2d(tape.constant(vec![3, 3, 3, 3], w).unwrap(), None, 1)
        .unwrap();
    assert_eq!(y.value(), x.values());
}

#[test]
fn strided_conv_matches_direct_sum() {
    let mut rng = Rng::new(4);
    let (c, h, w, o) = (2, 7, 6, 3);
    let x = Tensor::randn(vec![c, h, w], 1.0, &mut rng);
    let k = Tensor::randn(vec![o, c, 3, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let y = tape.leaf(&x).conv2d(tape.leaf(&k), None, 2).unwrap();
    assert_eq!(y.shape(), vec![o, 4, 3]);
    let yv = y.value();
    let at = |ci: usize, yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.values()[(ci * h + yy as usize) * w + xx as usize]
        }
    };
    for oc in 0..o {
        for oy in 0..4 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = k.values()[((oc * c + ci) * 3 + ky) * 3 + kx];
                            s += wv * at(ci, (oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        }
                    }
                }
                assert!((s - yv[(oc * 4 + oy) * 3 + ox]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = Rng::new(8);
    let x = Tensor::randn(vec![2, 6, 6], 1.0, &mut rng);
    let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
    let run = || {
        let tape = Tape::new();
        let y = tape.leaf(&x).conv2d(tape.leaf(&k), None, 1).unwrap();
        y.silu().unwrap().reshape(vec![3, 36]).unwrap().layer_norm(None, None, 1e-6).unwrap().value()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn concat_stacks_first_axis() {
    let tape = Tape::new();
    let a = tape.var(&t(&[1, 2], &[1., 2.]));
    let b = tape.var(&t(&[2, 2], &[3., 4., 5., 6.]));
    let c = concat(&[a, b]).unwrap();
    assert_eq!(c.shape(), vec![3, 2]);
    assert_eq!(c.value(), vec![1., 2., 3., 4., 5., 6.]);
    let w = tape.constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    tape.backward(c.mul(w).unwrap().sum().unwrap()).unwrap();
    assert_eq!(a.grad().unwrap(), vec![1., 2.]);
    assert_eq!(b.grad().unwrap(), vec![3., 4., 5., 6.]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_grad_check(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 1.0, &mut rng);
        let w = Tensor::randn(vec![m, n], 1.0, &mut rng);
        let err = grad_check(|tape, v| v[0].matmul(v[1])?.mul(tape.leaf(&w))?.sum(), &[a, b], DEFAULT_EPS).unwrap();
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn l2_normalize_rows_are_unit(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(vec![r, c], 1.0, &mut rng);
        let tape = Tape::new();
        let y = tape.leaf(&x).l2_normalize().unwrap().value();
        for row in y.chunks(c) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
