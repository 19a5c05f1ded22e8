use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, random_tensor};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_zero_dims_and_bad_lengths() {
    assert!(Tensor::zeros(&[0, 3, 4, 4]).is_err());
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[], vec![]).is_err());
}

#[test]
fn add_two_vectors() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn mul_by_zeros_kills_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
    let z = tape.constant(Tensor::zeros(&[3]).unwrap());
    let y = tape.mul(x, z).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 3]);
    let s = tape.sum_all(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
}

#[test]
fn sub_matches_elementwise_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[3, 4, 8], -10.0, 10.0);
    let b = random_tensor(&mut rng, &[3, 4, 8], -10.0, 10.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let d = tape.sub(va, vb).unwrap();
    let out = tape.value(d).data();
    for i in 0..3 {
        for j in 0..4 {
            for k in 0..8 {
                let idx = (i * 4 + j) * 8 + k;
                assert_eq!(out[idx], a.data()[idx] - b.data()[idx]);
            }
        }
    }
}

#[test]
fn broadcast_rule_is_unit_dims_of_second_operand() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
    let row = tape.leaf(t(&[2, 1], &[10.0, 20.0]), true);
    let y = tape.add(a, row).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
    let s = tape.sum_all(y).unwrap();
    let g = tape.backward(s).unwrap();
    // broadcast gradient keeps the operand's own shape
    assert_eq!(g.get(row).unwrap().shape(), &[2, 1]);
    assert_eq!(g.get(row).unwrap().data(), &[3.0, 3.0]);

    let bad = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(tape.add(a, bad).is_err());
    let wrong = tape.constant(t(&[2, 2], &[1.0; 4]));
    assert!(tape.mul(a, wrong).is_err());
    // the first operand never broadcasts
    assert!(tape.add(row, a).is_err());
}

#[test]
fn linear_identity_and_weight_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[2]).unwrap());
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

    let xs = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape = Tape::new();
    let x = tape.constant(xs);
    let w = tape.leaf(t(&[2, 2], &[0.3, -0.1, 0.7, 0.2]), true);
    let y = tape.linear(x, w, None).unwrap();
    let s = tape.sum_all(y).unwrap();
    let g = tape.backward(s).unwrap();
    // d/dW sum(xW) = column sums of x, repeated for each output
    assert_eq!(g.get(w).unwrap().data(), &[9.0, 9.0, 12.0, 12.0]);

    let bad = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
    assert!(tape.linear(x, bad, None).is_err());
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = random_tensor(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    let mut k = vec![0.0; 3 * 3 * 3];
    for c in 0..3 {
        k[(c * 3 + c) * 3 + 1] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.constant(xs.clone());
    let w = tape.constant(t(&[3, 3, 1, 3], &k));
    let y = tape.conv2d_1xk(x, w, None).unwrap();
    assert_eq!(tape.value(y), &xs);
}

#[test]
fn conv_all_ones_kernel_by_hand() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[1, 1, 1, 3], &[1.0, 1.0, 1.0]));
    let y = tape.conv2d_1xk(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);
}

#[test]
fn conv_rejects_even_kernel_and_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 5]).unwrap());
    let even = tape.constant(Tensor::zeros(&[1, 2, 1, 2]).unwrap());
    assert!(tape.conv2d_1xk(x, even, None).is_err());
    let mism = tape.constant(Tensor::zeros(&[1, 3, 1, 3]).unwrap());
    assert!(tape.conv2d_1xk(x, mism, None).is_err());
}

/// Quadruple-loop reference convolution.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[3]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; bs * cout * h * wd];
    for n in 0..bs {
        for o in 0..cout {
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for j in 0..k {
                            let src = c as isize + j as isize - p;
                            if src < 0 || src >= wd as isize {
                                continue;
                            }
                            acc +=
                                w.data()[(o * cin + i) * k + j] * x.data()[((n * cin + i) * h + r) * wd + src as usize];
                        }
                    }
                    out[((n * cout + o) * h + r) * wd + c] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_oracle_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[2, 3, 8, 16], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 1, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d_1xk(vx, vw, Some(vb)).unwrap();
    let oracle = conv_oracle(&x, &w, &b);
    for (a, e) in tape.value(y).data().iter().zip(&oracle) {
        assert_abs_diff_eq!(*a, *e, epsilon = 1e-12);
    }
    let proj = random_tensor(&mut rng, &[2, 4, 8, 16], -1.0, 1.0);
    let rep = gradcheck::check(&[x, w, b], 1e-4, |tp, v| {
        let y = tp.conv2d_1xk(v[0], v[1], Some(v[2]))?;
        gradcheck::project(tp, y, &proj)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn batchnorm_identity_and_constant_input() {
    // per channel: zero mean, unit (biased) variance
    let xs = t(&[2, 1, 1, 2], &[1.0, -1.0, 1.0, -1.0]);
    let mut tape = Tape::new();
    let x = tape.constant(xs.clone());
    let g = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(xs.data()) {
        assert_abs_diff_eq!(*a, *e, epsilon = 1e-5);
    }
    assert_abs_diff_eq!(stats.mean[0], 0.0);
    assert_abs_diff_eq!(stats.var[0], 4.0 / 3.0, epsilon = 1e-12);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 4.2).unwrap());
    let g = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[5.0]));
    let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 1, 1], &[3.0, 10.0]));
    let g = tape.constant(t(&[2], &[2.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 1.0]));
    let y = tape.batch_norm_eval(x, g, b, &[1.0, 10.0], &[4.0, 1.0], 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 1.0]);
}

#[test]
fn activations_by_definition() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[0.0, -3.0]), true);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[0], 0.5);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data()[1], 0.0);
    let sum = tape.sum_all(r).unwrap();
    let g = tape.backward(sum).unwrap();
    assert_eq!(g.get(x).unwrap().data()[1], 0.0);

    let mut tape = Tape::new();
    let big = tape.constant(t(&[3], &[-800.0, 0.0, 800.0]));
    let s = tape.sigmoid(big);
    let v = tape.value(s).data();
    assert!(v.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[2.0, 4.0]), true);
    let m = tape.mean_axis(x, 0).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0]);
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[2.0, 4.0, 1.0]), true);
    let s = tape.sum_all(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 3]);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 3, 5, 7], 1.25).unwrap());
    let p = tape.pool_rows_mean(x).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 3, 1, 7]);
    assert!(tape.value(p).data().iter().all(|&v| v == 1.25));
    let ga = tape.global_avg(x).unwrap();
    assert_eq!(tape.value(ga).shape(), &[2, 3]);
    assert!(tape.mean_axis(x, 4).is_err());
}

#[test]
fn softmax_and_cross_entropy() {
    let mut tape = Tape::new();
    let k = 7;
    let logits = tape.constant(Tensor::full(&[1, k], 0.3).unwrap());
    let ce = tape.cross_entropy(logits, &[2]).unwrap();
    assert_abs_diff_eq!(tape.value(ce).item().unwrap(), (k as f64).ln(), epsilon = 1e-12);

    let logits = tape.constant(t(&[1, 3], &[10.0, 0.0, 0.0]));
    let ce = tape.cross_entropy(logits, &[0]).unwrap();
    // -log(e^10 / (e^10 + 2)) = log(1 + 2 e^-10)
    let expected = (1.0 + 2.0 * (-10.0f64).exp()).ln();
    assert_abs_diff_eq!(tape.value(ce).item().unwrap(), expected, epsilon = 1e-15);
    assert_abs_diff_eq!(expected, 9.08e-5, epsilon = 1e-7);
    assert!(tape.cross_entropy(logits, &[3]).is_err());

    let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]));
    let b = tape.affine(a, 1.0, 123.0);
    let (sa, sb) = (tape.softmax(a), tape.softmax(b));
    for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
        assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
    }
    for row in tape.value(sa).data().chunks(3) {
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn backward_square_and_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    let v = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(tape.backward(v).is_err());
}

#[test]
fn first_adam_step_has_closed_form() {
    let mut store = ParamStore::new();
    let id = store.register("p", Tensor::scalar(0.0), true).unwrap();
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    let mut adam = AdamState::new(1e-3);
    adam.step(&mut store);
    assert_abs_diff_eq!(store.get(id).value.data()[0], -1e-3, epsilon = 1e-10);
    assert!(store.get(id).grad.is_none());
    assert_eq!(adam.steps(), 1);
}

#[test]
fn frozen_parameters_are_constants_on_the_tape() {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::scalar(2.0), false).unwrap();
    let mut tape = Tape::new();
    let vw = tape.param(&store, w);
    let x = tape.leaf(Tensor::scalar(5.0), true);
    let y = tape.mul(x, vw).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(vw).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    store.accumulate(&tape, &g);
    assert!(store.get(w).grad.is_none());
}

#[test]
fn magnify_op_scales_rows_and_zeroes_constant_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[2.0, 4.0, 6.0, 7.0, 7.0, 7.0]));
    let m = tape.magnify(x);
    assert_eq!(tape.value(m).data(), &[0.0, 127.5, 255.0, 0.0, 0.0, 0.0]);
}

#[test]
fn select_concat_pool_upsample_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
    let s = tape.select(x, 1, &[2, 0]).unwrap();
    assert_eq!(tape.value(s).data(), &[8.0, 9.0, 10.0, 11.0, 0.0, 1.0, 2.0, 3.0]);
    assert!(tape.select(x, 1, &[3]).is_err());
    let c = tape.concat(&[x, s], 1).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 5, 4]);
    let p = tape.pool_w(x, 2).unwrap();
    assert_eq!(tape.value(p).data()[..2], [0.5, 2.5]);
    assert!(tape.pool_w(x, 3).is_err());
    let u = tape.upsample_w(p, 2).unwrap();
    assert_eq!(tape.value(u).data()[..4], [0.5, 0.5, 2.5, 2.5]);
}

#[test]
fn weights_reject_values_beyond_single_precision() {
    let t = vec![("w".to_string(), t(&[1], &[1e300]))];
    assert!(super::weights::encode(&t).is_err());
}
