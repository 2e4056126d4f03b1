mod common;

use common::*;
use isunet::{Error, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let r = random(tape.shape(out), &mut rng(seed));
    let r = tape.leaf(r, false);
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

#[test]
fn conv2d_scales_with_pointwise_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let w = tape.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
    let b = tape.leaf(t(&[1], &[0.0]), false);
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 3, 3], 2.0));
}

#[test]
fn conv2d_identity_kernel_with_same_padding() {
    let mut r = rng(1);
    let input = random(&[1, 1, 5, 5], &mut r);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let w = tape.leaf(k, false);
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut r = rng(2);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = random(&[1, 2, 4, 4], &mut r);
        let w = random(&[3, 2, 3, 3], &mut r);
        let b = random(&[3], &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expected = naive_conv2d(&x, &w, Some(&b), stride, pad);
        assert!(max_abs_diff(tape.value(y), &expected) < 1e-6, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv2d_names_mismatched_channels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
    let w = tape.leaf(Tensor::zeros(&[2, 2, 3, 3]), false);
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    match err {
        Error::Shape { op, detail } => {
            assert_eq!(op, "conv2d");
            assert!(detail.contains("3 channels") && detail.contains("Cin = 2"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn conv_transpose_scatter_example() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
    let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
    let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
    let expected =
        naive_conv_transpose2d(&Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::full(&[1, 1, 2, 2], 1.0), None, 2, 0);
    assert_eq!(tape.value(y), &expected);
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 4, 4], 1.0));
}

#[test]
fn conv_transpose_identity_kernel() {
    let input = random(&[2, 3, 4, 4], &mut rng(3));
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let w = tape.leaf(k, false);
    let y = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let mut r = rng(4);
    for (stride, pad, h) in [(1, 1, 4), (1, 0, 3), (2, 1, 3), (2, 0, 2)] {
        let z = random(&[2, 3, h, h], &mut r);
        let w = random(&[3, 2, 3, 3], &mut r);
        let b = random(&[2], &mut r);
        let mut tape = Tape::new();
        let (zv, wv, bv) = (tape.leaf(z.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
        let y = tape.conv_transpose2d(zv, wv, Some(bv), stride, pad).unwrap();
        let expected = naive_conv_transpose2d(&z, &w, Some(&b), stride, pad);
        assert!(max_abs_diff(tape.value(y), &expected) < 1e-9, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv_and_transpose_are_adjoint() {
    let mut r = rng(5);
    for (stride, pad, h) in [(1, 1, 6), (1, 0, 5), (2, 1, 5)] {
        let x = random(&[2, 3, h, h], &mut r);
        let w = random(&[4, 3, 3, 3], &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let z = random(tape.shape(y), &mut r);
        let zv = tape.leaf(z.clone(), false);
        let xt = tape.conv_transpose2d(zv, wv, None, stride, pad).unwrap();
        let lhs = inner(tape.value(y), &z);
        let rhs = inner(&x, tape.value(xt));
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let y = tape.maxpool2d(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.leaf(Tensor::full(&[1, 2, 4, 4], 0.3), false);
    let y = tape.maxpool2d(c, 2).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 2, 2, 2], 0.3));

    let input = random(&[1, 3, 8, 8], &mut rng(6));
    let x = tape.leaf(input.clone(), false);
    let y = tape.maxpool2d(x, 2).unwrap();
    assert_eq!(tape.value(y), &naive_maxpool(&input, 2));

    let odd = tape.leaf(Tensor::zeros(&[1, 1, 5, 4]), false);
    assert!(matches!(tape.maxpool2d(odd, 2), Err(Error::Shape { .. })));
}

#[test]
fn maxpool_routes_gradient_to_argmax() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 4.0]), true);
    let y = tape.maxpool2d(x, 2).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 1, 1], &[5.0]), false);
    let y = tape.upsample_nearest(x, 2).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 5.0));

    let input = random(&[1, 2, 3, 3], &mut rng(7));
    let x = tape.leaf(input.clone(), true);
    let y = tape.upsample_nearest(x, 1).unwrap();
    assert_eq!(tape.value(y), &input);

    for factor in [2, 3] {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let y = tape.upsample_nearest(x, factor).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let expected = (factor * factor) as f64;
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == expected));
    }
}

#[test]
fn concat_and_slice() {
    let mut r = rng(8);
    let a = random(&[1, 2, 4, 4], &mut r);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), false);
    let bv = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
    let c = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
    let back = tape.slice_channels(c, 0, 2).unwrap();
    assert_eq!(tape.value(back), &a);

    let wrong = tape.leaf(Tensor::zeros(&[1, 3, 4, 2]), false);
    assert!(tape.concat_channels(av, wrong).is_err());
}

#[test]
fn concat_gradient_split_matches_finite_differences() {
    let mut r = rng(9);
    let inputs = [random(&[2, 2, 3, 3], &mut r), random(&[2, 3, 3, 3], &mut r)];
    let err = grad_check(&inputs, &|tape, v| {
        let c = tape.concat_channels(v[0], v[1]).unwrap();
        project(tape, c, 10)
    });
    assert!(err < 1e-3, "rel error {err}");
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let z = tape.leaf(t(&[1], &[0.0]), true);
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).data(), &[0.5]);
    let total = tape.sum(s);
    tape.backward(total).unwrap();
    let analytic = tape.grad(z).unwrap().data()[0];
    let h = 1e-5;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let numeric = (sig(h) - sig(-h)) / (2.0 * h);
    assert!((analytic - 0.25).abs() < 1e-12);
    assert!((numeric - 0.25).abs() < 1e-9);

    let mut tape = Tape::<f32>::new();
    let big = tape.leaf(Tensor::new(vec![2], vec![-30.0, 30.0]).unwrap(), false);
    let s = tape.sigmoid(big);
    assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn backward_examples() {
    let xv = t(&[4], &[1.0, -2.0, 3.0, 0.5]);
    let mut tape = Tape::new();
    let w = tape.leaf(t(&[4], &[0.3, 0.1, -0.2, 0.9]), true);
    let x = tape.leaf(xv.clone(), false);
    let p = tape.mul(w, x).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &xv);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &xv.map(|v| 2.0 * v));

    let err = tape.backward(p).unwrap_err();
    assert!(matches!(err, Error::NonScalarLoss(s) if s == vec![4]));
}

#[test]
fn ops_do_not_mutate_inputs_and_are_deterministic() {
    let mut r = rng(11);
    let x = random(&[2, 2, 4, 4], &mut r);
    let w = random(&[3, 2, 3, 3], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.maxpool2d(y, 2).unwrap();
        let out = tape.value(y).clone();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(xv), &x);
        assert_eq!(tape.value(wv), &w);
        (out, tape.grad(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    let mut r = rng(12);
    let conv_inputs = [random(&[2, 2, 5, 5], &mut r), random(&[3, 2, 3, 3], &mut r), random(&[3], &mut r)];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let err = grad_check(&conv_inputs, &|tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            project(tape, y, 13)
        });
        assert!(err < 1e-3, "conv2d stride {stride} pad {pad}: {err}");
    }
    let ct_inputs = [random(&[2, 3, 4, 4], &mut r), random(&[3, 2, 3, 3], &mut r), random(&[2], &mut r)];
    for (stride, pad) in [(1, 1), (2, 1)] {
        let err = grad_check(&ct_inputs, &|tape, v| {
            let y = tape.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            project(tape, y, 14)
        });
        assert!(err < 1e-3, "conv_transpose2d stride {stride} pad {pad}: {err}");
    }
    let x = [random(&[2, 2, 4, 4], &mut r)];
    let err = grad_check(&x, &|tape, v| {
        let y = tape.maxpool2d(v[0], 2).unwrap();
        project(tape, y, 15)
    });
    assert!(err < 1e-3, "maxpool {err}");
    let err = grad_check(&x, &|tape, v| {
        let y = tape.upsample_nearest(v[0], 2).unwrap();
        project(tape, y, 16)
    });
    assert!(err < 1e-3, "upsample {err}");
    let err = grad_check(&x, &|tape, v| {
        let y = tape.relu(v[0]);
        project(tape, y, 17)
    });
    assert!(err < 1e-3, "relu {err}");
    let err = grad_check(&x, &|tape, v| {
        let y = tape.sigmoid(v[0]);
        project(tape, y, 18)
    });
    assert!(err < 1e-3, "sigmoid {err}");
}
