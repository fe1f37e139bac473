use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::TensorError;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Direct six-loop convolution used as the reference.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.get(&[b, ic, iy as usize, ix as usize])
                                        * k.get(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&[3, 3], &mut rng);
    let out = tape.constant(Tensor::eye(3)).matmul(tape.constant(m.clone())).unwrap();
    assert_eq!(*out.value(), m);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[4, 5], &mut rng), random(&[5, 3], &mut rng)];
    let weights = random(&[4, 3], &mut rng);
    let report = check_gradients(&inputs, 1e-5, 1e-7, |tape, v| {
        Ok(v[0].matmul(v[1])?.mul(tape.constant(weights.clone()))?.sum())
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn bmm_broadcasts_batch_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&[2, 1, 3, 2], &mut rng), random(&[1, 4, 2, 2], &mut rng)];
    let tape = Tape::new();
    let a = tape.constant(inputs[0].clone());
    let b = tape.constant(inputs[1].clone());
    let c = a.bmm(b).unwrap();
    assert_eq!(c.shape(), vec![2, 4, 3, 2]);
    // element check against explicit product
    let expect: f64 = (0..2)
        .map(|p| inputs[0].get(&[1, 0, 2, p]) * inputs[1].get(&[0, 3, p, 1]))
        .sum();
    assert!((c.value().get(&[1, 3, 2, 1]) - expect).abs() < 1e-15);

    let report = check_gradients(&inputs, 1e-5, 1e-7, |_, v| Ok(v[0].bmm(v[1])?.square().sum())).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn conv2d_same_size_with_paper_defaults() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 28, 28]));
    let k = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
    assert_eq!(x.conv2d(k, 1, 1).unwrap().shape(), vec![1, 2, 28, 28]);
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = random(&[2, 1, 5, 4], &mut rng);
    let tape = Tape::new();
    let out = tape
        .constant(xt.clone())
        .conv2d(tape.constant(Tensor::ones(&[1, 1, 1, 1])), 1, 0)
        .unwrap();
    assert_eq!(*out.value(), xt);
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (xs, ks, stride, pad) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
        ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
        ([2, 3, 8, 8], [2, 3, 5, 5], 2, 2),
        ([1, 1, 7, 6], [2, 1, 3, 3], 2, 0),
    ] {
        let x = random(&xs, &mut rng);
        let k = random(&ks, &mut rng);
        let tape = Tape::new();
        let out = tape
            .constant(x.clone())
            .conv2d(tape.constant(k.clone()), stride, pad)
            .unwrap();
        let oracle = naive_conv(&x, &k, stride, pad);
        assert_eq!(out.shape(), oracle.shape().to_vec());
        assert!(out.value().max_abs_diff(&oracle) <= 1e-12);
    }
}

#[test]
fn conv2d_rejects_empty_output() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(x.conv2d(k, 1, 0), Err(TensorError::Config { .. })));
}

#[test]
fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&[1, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
    let report = check_gradients(&inputs, 1e-5, 1e-7, |_, v| Ok(v[0].conv2d(v[1], 2, 1)?.square().sum())).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4], &mut rng);
    let sum = tape.constant(x.clone()).add(tape.constant(Tensor::zeros(&[4]))).unwrap();
    assert_eq!(*sum.value(), x);
    assert_eq!(tape.scalar(0.0).exp().unwrap().item(), 1.0);
}

#[test]
fn elementwise_errors() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let z = tape.constant(t(&[2], &[1.0, 0.0]));
    assert_eq!(x.div(z).unwrap_err(), TensorError::DivByZero { op: "div" });
    assert!(matches!(z.ln(), Err(TensorError::Domain { op: "log", .. })));
    assert!(matches!(tape.scalar(-1.0).ln(), Err(TensorError::Domain { .. })));
    assert!(matches!(tape.scalar(1000.0).exp(), Err(TensorError::NonFinite { .. })));
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(x.add(bad), Err(TensorError::Shape { .. })));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[3, 3], &mut rng);
    let b = random(&[3, 3], &mut rng);
    let r = check_gradients(&[a.clone(), b.clone()], 1e-5, 1e-7, |_, v| Ok(v[0].mul(v[1])?.sum())).unwrap();
    assert!(r.passes(1e-6), "{r:?}");

    let pos = Tensor::from_fn(&[3, 3], |i| 0.5 + a.data()[i].abs());
    let row = random(&[3], &mut rng);
    let col = Tensor::from_fn(&[3, 1], |i| 1.5 + row.data()[i]);
    let cases: Vec<(&str, Vec<Tensor>)> = vec![
        ("add", vec![a.clone(), row.clone()]),
        ("sub", vec![a.clone(), col.clone()]),
        ("div", vec![a.clone(), col.clone()]),
        ("exp", vec![a.clone()]),
        ("ln", vec![pos.clone()]),
        ("sqrt", vec![pos.clone()]),
        ("tanh", vec![a.clone()]),
        ("logistic", vec![a.clone()]),
        ("softplus", vec![a.clone()]),
        ("squash_length", vec![pos.clone()]),
        ("scalar", vec![a.clone()]),
        ("sum_axis", vec![a.clone()]),
        ("permute", vec![random(&[2, 3, 4], &mut rng)]),
    ];
    let wp = random(&[4, 2, 3], &mut rng);
    for (name, inputs) in cases {
        let w = random(&inputs[0].shape().to_vec(), &mut rng);
        let r = check_gradients(&inputs, 1e-5, 1e-7, |tape, v| {
            let y = match name {
                "add" => v[0].add(v[1])?,
                "sub" => v[0].sub(v[1])?,
                "div" => v[0].div(v[1])?,
                "exp" => v[0].exp()?,
                "ln" => v[0].ln()?,
                "sqrt" => v[0].sqrt()?,
                "tanh" => v[0].tanh(),
                "logistic" => v[0].logistic(),
                "softplus" => v[0].softplus(),
                "squash_length" => v[0].squash_length(1e-3)?,
                "scalar" => v[0].mul_scalar(3.0).add_scalar(-1.0).neg(),
                "sum_axis" => return Ok(v[0].sum_axis(1, true)?.square().sum()),
                "permute" => return Ok(v[0].permute(&[2, 0, 1])?.mul(tape.constant(wp.clone()))?.sum()),
                _ => unreachable!(),
            };
            Ok(y.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(r.passes(1e-4), "{name}: {r:?}");
    }
}

#[test]
fn squash_length_is_the_squashed_norm() {
    let tape = Tape::new();
    let s = [3.0, 4.0];
    let v = crate::routing::squash_vec(&s, 1e-8);
    let n = tape.scalar(25.0).squash_length(1e-8).unwrap().item();
    assert!((n - (v[0] * v[0] + v[1] * v[1]).sqrt()).abs() < 1e-15);
    let zero = tape.param(Tensor::scalar(0.0));
    let y = zero.squash_length(1e-8).unwrap();
    assert_eq!(y.item(), 0.0);
    tape.backward(y).unwrap();
    assert_eq!(zero.grad().unwrap().item(), 0.0);
    assert!(tape.scalar(-1.0).squash_length(1e-8).is_err());
}

#[test]
fn permute_moves_elements() {
    let tape = Tape::new();
    let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let p = tape.constant(x.clone()).permute(&[2, 0, 1]).unwrap();
    assert_eq!(p.shape(), vec![4, 2, 3]);
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                assert_eq!(p.value().get(&[c, a, b]), x.get(&[a, b, c]));
            }
        }
    }
    assert!(tape.constant(x).permute(&[0, 0, 1]).is_err());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap();
    for v in s.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = tape.constant(t(&[3], &[1000.0, 0.0, 0.0])).softmax(0).unwrap();
    assert!((s.value().data()[0] - 1.0).abs() < 1e-12);
    assert!(s.value().all_finite());
    let s = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax(0).unwrap();
    let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
    for (v, e) in s.value().data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-15);
    }
    assert!(matches!(
        tape.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax(1),
        Err(TensorError::Axis { axis: 1, rank: 1 })
    ));
}

#[test]
fn softmax_gradient_along_middle_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 4, 3], &mut rng);
    let w = random(&[2, 4, 3], &mut rng);
    let r = check_gradients(&[x], 1e-5, 1e-7, |tape, v| Ok(v[0].softmax(1)?.mul(tape.constant(w.clone()))?.sum())).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn logistic_examples() {
    let tape = Tape::new();
    let y = tape.constant(t(&[3], &[0.0, -700.0, 1.5])).logistic();
    let v = y.value();
    assert_eq!(v.data()[0], 0.5);
    assert!(v.data()[1] >= 0.0 && v.data()[1] < 1e-300);
    assert!((v.data()[2] - 0.817_574_476_193_643_7).abs() < 1e-15);
    assert_eq!(tape.scalar(800.0).logistic().item(), 1.0);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = x.mul(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    // a second sweep accumulates
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0, 12.0]);
    tape.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert_eq!(
        tape.backward(x.mul_scalar(2.0)),
        Err(TensorError::NonScalarLoss(vec![2]))
    );
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let p = tape.param(Tensor::ones(&[2]));
    let loss = c.mul(p).unwrap().sum();
    tape.backward(loss).unwrap();
    assert!(c.grad().is_none());
    assert!(p.grad().is_some());
}

#[test]
fn gather_pads_with_zero_and_scatters_back() {
    let tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let g = x
        .gather(std::rc::Rc::new(vec![2, PAD, 0, 2]), &[4])
        .unwrap();
    assert_eq!(g.value().data(), &[3.0, 0.0, 1.0, 3.0]);
    tape.backward(g.sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 2.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(&[2, 3, 2], vals).unwrap());
            let s = x.softmax(axis).unwrap().value();
            let shape = [2usize, 3, 2];
            let (outer, n, inner): (usize, usize, usize) = (
                shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product());
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..n).map(|j| s.data()[(o * n + j) * inner + i]).sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                }
            }
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn conv_matches_oracle(seed in 0u64..1000, stride in 1usize..3, pad in 0usize..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 3, 8, 8], &mut rng);
            let k = random(&[2, 3, 3, 3], &mut rng);
            let tape = Tape::new();
            let out = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), stride, pad).unwrap();
            prop_assert!(out.value().max_abs_diff(&naive_conv(&x, &k, stride, pad)) <= 1e-12);
        }
    }
}

#[test]
fn vote_contractions_match_primitive_compositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (b, l, h, d) = (2, 3, 4, 5);
    let w = random(&[b, l, h], &mut rng);
    let v = random(&[b, l, h, d], &mut rng);
    let mu = random(&[b, h, d], &mut rng);
    let lam = Tensor::from_fn(&[b, h, d], |i| 0.5 + (i % 7) as f64 * 0.2);
    let tape = Tape::new();
    let (w, v, mu, lam) = (tape.constant(w), tape.constant(v), tape.constant(mu), tape.constant(lam));
    let mu4 = mu.reshape(&[b, 1, h, d]).unwrap();
    let lam4 = lam.reshape(&[b, 1, h, d]).unwrap();
    let w4 = w.reshape(&[b, l, h, 1]).unwrap();
    let diff = v.sub(mu4).unwrap();
    let cases = [
        (w.vote_sum(v).unwrap(), w4.mul(v).unwrap().sum_axis(1, false).unwrap()),
        (v.vote_dot(mu).unwrap(), v.mul(mu4).unwrap().sum_axis(3, false).unwrap()),
        (v.vote_sq_dist(mu, None).unwrap(), diff.square().sum_axis(3, false).unwrap()),
        (
            v.vote_sq_dist(mu, Some(lam)).unwrap(),
            diff.square().mul(lam4).unwrap().sum_axis(3, false).unwrap(),
        ),
        (
            w.vote_scatter(v, mu).unwrap(),
            w4.mul(diff.square()).unwrap().sum_axis(1, false).unwrap(),
        ),
    ];
    for (fused, plain) in cases {
        assert_eq!(fused.shape(), plain.shape());
        assert!(fused.value().max_abs_diff(&plain.value()) < 1e-13);
    }
}

#[test]
fn vote_contraction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (b, l, h, d) = (2, 3, 2, 3);
    let inputs = vec![
        random(&[b, l, h], &mut rng),
        random(&[b, l, h, d], &mut rng),
        random(&[b, h, d], &mut rng),
        Tensor::from_fn(&[b, h, d], |i| 0.5 + (i % 5) as f64 * 0.3),
    ];
    let wc = random(&[b, l, h], &mut rng);
    let wh = random(&[b, h, d], &mut rng);
    let r = check_gradients(&inputs, 1e-5, 1e-7, |tape, x| {
        let (wc, wh) = (tape.constant(wc.clone()), tape.constant(wh.clone()));
        let a = x[0].vote_sum(x[1])?.mul(wh)?.sum();
        let b2 = x[1].vote_dot(x[2])?.mul(wc)?.sum();
        let c = x[1].vote_sq_dist(x[2], Some(x[3]))?.mul(wc)?.sum();
        let e = x[1].vote_sq_dist(x[2], None)?.square().sum();
        let f = x[0].vote_scatter(x[1], x[2])?.mul(wh)?.sum();
        a.add(b2)?.add(c)?.add(e)?.add(f)
    })
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn vote_contractions_reject_mismatched_shapes() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
    let bad = tape.constant(Tensor::zeros(&[1, 3, 3]));
    assert!(matches!(bad.vote_sum(v), Err(TensorError::Shape { .. })));
    assert!(matches!(v.vote_dot(bad), Err(TensorError::Shape { .. })));
    assert!(v.vote_sq_dist(tape.constant(Tensor::zeros(&[1, 3, 4])), Some(bad)).is_err());
}
