use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::max_rel_error;
use super::*;
use crate::error::Error;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);

    let r = tape.constant(t(&[1, 2], &[1., 2.]));
    let col = tape.constant(t(&[2, 1], &[3., 4.]));
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(d).data(), &[11.]);

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let e = tape.matmul(a, z).unwrap();
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));

    let err = tape.matmul(a, col).and(tape.matmul(col, col)).unwrap_err();
    match err {
        Error::Dimension { detail, .. } => assert!(detail.contains("[2, 1]"), "{detail}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(zero);
    assert_eq!(tape.value(s).item().unwrap(), 0.5);
    let th = tape.tanh(zero);
    assert_eq!(tape.value(th).item().unwrap(), 0.0);
    let x = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let y = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
    assert!(matches!(tape.mul(x, y), Err(Error::Dimension { .. })));
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![0.0, 1.0, -1.0]));
    let r = tape.relu(x);
    let l = tape.sum(r);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let w = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.]);

    // zero filter: bias broadcast
    let x = tape.constant(rand_t(&[2, 5, 5], 1));
    let w0 = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b3 = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
    let y = tape.conv2d(x, w0, b3, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 3, 3]);
    for c in 0..3 {
        for i in 0..9 {
            assert_eq!(tape.value(y).data()[c * 9 + i], [0.5, -1.0, 2.0][c]);
        }
    }

    // 1x1 identity kernel
    let mut eye = Tensor::zeros(&[2, 2, 1, 1]);
    eye.data_mut()[0] = 1.0;
    eye.data_mut()[3] = 1.0;
    let eye = tape.constant(eye);
    let b0 = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d(x, eye, b0, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let big = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    let b1 = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, big, b1, 1, 0), Err(Error::Dimension { .. })));
}

#[test]
fn conv_transpose_examples() {
    let mut tape = Tape::new();
    let k = rand_t(&[1, 1, 3, 3], 4);
    let v = 1.7;
    let x = tape.constant(t(&[1, 1, 1], &[v]));
    let kv = tape.constant(k.clone());
    let y = tape.conv_transpose2d(x, kv, 3, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
    for (a, b) in tape.value(y).data().iter().zip(k.data()) {
        assert_eq!(*a, v * b);
    }

    let z = tape.constant(Tensor::zeros(&[2, 3, 3]));
    let k2 = tape.constant(rand_t(&[2, 1, 4, 4], 5));
    let y = tape.conv_transpose2d(z, k2, 2, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    assert!(matches!(tape.conv_transpose2d(x, kv, 3, 2), Err(Error::Dimension { .. })));
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    let (ci, co, h, w, k, s, p) = (3, 2, 9, 7, 4, 2, 1);
    let x = rand_t(&[ci, h, w], 11);
    let f = rand_t(&[co, ci, k, k], 12);
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let fv = tape.constant(f.clone());
    let bv = tape.constant(Tensor::zeros(&[co]));
    let y = tape.conv2d(xv, fv, bv, s, p).unwrap();
    let r = rand_t(tape.value(y).shape(), 13);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let input_grad = tape.grad(xv).unwrap().clone();

    let mut t2 = Tape::new();
    let rv = t2.constant(r);
    let fv = t2.constant(f);
    // The uncropped transposed output can overhang the original input by a
    // few rows/cols when the stride does not tile it exactly; compare the overlap.
    let up = t2.conv_transpose2d(rv, fv, s, p).unwrap();
    let upv = t2.value(up);
    let (_, uh, uw) = upv.chw().unwrap();
    let mut worst: f64 = 0.0;
    for c in 0..ci {
        for y in 0..h.min(uh) {
            for x in 0..w.min(uw) {
                worst = worst.max((upv.at3(c, y, x) - input_grad.at3(c, y, x)).abs());
            }
        }
    }
    assert!(worst < 1e-10, "max abs diff {worst}");
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let n = tape.l2_normalize(v, 1e-12).unwrap();
    assert_eq!(tape.value(n).data(), &[0.6, 0.8]);
    let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let n = tape.l2_normalize(z, 1e-8).unwrap();
    assert_eq!(tape.value(n).data(), &[0.0, 0.0]);
    let u = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 0.0]));
    let n = tape.l2_normalize(u, 1e-12).unwrap();
    assert_eq!(tape.value(n).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(rand_t(&[4, 2, 2], 1));
    let b = tape.constant(rand_t(&[3, 2, 2], 2));
    let c = tape.concat(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[7, 2, 2]);
    assert_eq!(&tape.value(c).data()[..16], tape.value(a).data());
    assert_eq!(&tape.value(c).data()[16..], tape.value(b).data());
    let e = tape.constant(Tensor::zeros(&[0, 2, 2]));
    let d = tape.concat(a, e).unwrap();
    assert_eq!(tape.value(d), tape.value(a));
    let bad = tape.constant(Tensor::zeros(&[1, 3, 2]));
    assert!(matches!(tape.concat(a, bad), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(rand_t(&[3, 2], 3));
    let unused = tape.param(rand_t(&[4], 4));
    let y = tape.scale(x, 2.0);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    assert!(tape.grad(unused).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(matches!(tape.backward(y), Err(Error::Contract { .. })));
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.5, -2.0]));
    let sq = tape.mul(x, x).unwrap();
    let both = tape.add(sq, x).unwrap();
    let l = tape.sum(both);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -3.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = rand_t(&[2, 5, 5], 21);
    let f0 = rand_t(&[3, 2, 3, 3], 22);
    let grad_of = |wa: f64, wb: f64| {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let f = tape.param(f0.clone());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, f, b, 1, 1).unwrap();
        let t1 = tape.tanh(y);
        let l1 = tape.sum(t1);
        let s2 = tape.sigmoid(y);
        let l2 = tape.sum(s2);
        let a = tape.scale(l1, wa);
        let c = tape.scale(l2, wb);
        let l = tape.add(a, c).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap().clone(), tape.grad(f).unwrap().clone())
    };
    let (gx1, gf1) = grad_of(1.0, 0.0);
    let (gx2, gf2) = grad_of(0.0, 1.0);
    let (gx, gf) = grad_of(2.5, -0.5);
    for (g, (a, b)) in [(gx, (gx1, gx2)), (gf, (gf1, gf2))] {
        for j in 0..g.len() {
            let expect = 2.5 * a.data()[j] - 0.5 * b.data()[j];
            assert!((g.data()[j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gradcheck_matmul() {
    let e = max_rel_error(&[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], 9, |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_elementwise() {
    let ins = [rand_t(&[7], 1), rand_t(&[7], 2)];
    let e = max_rel_error(&ins, 3, |t, v| t.add(v[0], v[1]).unwrap());
    assert!(e < TOL, "add {e}");
    let e = max_rel_error(&ins, 3, |t, v| t.mul(v[0], v[1]).unwrap());
    assert!(e < TOL, "mul {e}");
    let e = max_rel_error(&ins[..1], 3, |t, v| t.sigmoid(v[0]));
    assert!(e < TOL, "sigmoid {e}");
    let e = max_rel_error(&ins[..1], 3, |t, v| t.tanh(v[0]));
    assert!(e < TOL, "tanh {e}");
    let e = max_rel_error(&ins[..1], 3, |t, v| t.scale(v[0], -1.7));
    assert!(e < TOL, "scale {e}");
    // keep relu inputs away from the kink
    let away = rand_t(&[7], 5).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let e = max_rel_error(&[away], 3, |t, v| t.relu(v[0]));
    assert!(e < TOL, "relu {e}");
}

#[test]
fn gradcheck_conv2d() {
    let ins = [rand_t(&[2, 6, 5], 1), rand_t(&[3, 2, 3, 3], 2), rand_t(&[3], 3)];
    for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let e = max_rel_error(&ins, 7, |t, v| t.conv2d(v[0], v[1], v[2], s, p).unwrap());
        assert!(e < TOL, "stride {s} pad {p}: {e}");
    }
}

#[test]
fn gradcheck_conv_transpose2d() {
    let ins = [rand_t(&[2, 3, 3], 1), rand_t(&[2, 2, 4, 4], 2)];
    for (s, c) in [(2, 1), (1, 0), (3, 1)] {
        let e = max_rel_error(&ins, 7, |t, v| t.conv_transpose2d(v[0], v[1], s, c).unwrap());
        assert!(e < TOL, "stride {s} crop {c}: {e}");
    }
}

#[test]
fn gradcheck_l2_normalize() {
    let e = max_rel_error(&[rand_t(&[5], 1)], 2, |t, v| t.l2_normalize(v[0], 1e-12).unwrap());
    assert!(e < TOL, "vector {e}");
    let e = max_rel_error(&[rand_t(&[4, 3, 2], 1)], 2, |t, v| t.l2_normalize(v[0], 1e-12).unwrap());
    assert!(e < TOL, "map {e}");
}

#[test]
fn gradcheck_structural_ops() {
    let ins = [rand_t(&[2, 3, 3], 1), rand_t(&[4, 3, 3], 2), rand_t(&[5], 3), rand_t(&[4, 6], 4)];
    let e = max_rel_error(&ins, 5, |t, v| t.concat(v[0], v[1]).unwrap());
    assert!(e < TOL, "concat {e}");
    let e = max_rel_error(&ins, 5, |t, v| t.slice(v[1], 1, 2).unwrap());
    assert!(e < TOL, "slice {e}");
    let e = max_rel_error(&ins, 5, |t, v| t.tile(v[2], 3, 2).unwrap());
    assert!(e < TOL, "tile {e}");
    let e = max_rel_error(&ins, 5, |t, v| t.row(v[3], 2).unwrap());
    assert!(e < TOL, "row {e}");
    let e = max_rel_error(&ins, 5, |t, v| t.reshape(v[3], vec![2, 12]).unwrap());
    assert!(e < TOL, "reshape {e}");
}

#[test]
fn gradcheck_logistic_loss() {
    let targets: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    let e = max_rel_error(&[rand_t(&[1, 3, 4], 1).map(|v| 3.0 * v)], 2, |t, v| {
        t.logistic_loss(v[0], &targets, 3.0, 1.0, 12.0).unwrap()
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[3, 16, 16], 1));
        let f = tape.constant(rand_t(&[8, 3, 3, 3], 2));
        let b = tape.constant(rand_t(&[8], 3));
        let y = tape.conv2d(x, f, b, 2, 1).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
