use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = numel(shape);
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `sum(R ⊙ f(inputs))` for a fixed random projection `R`.
fn primitive_grad_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let project = |t: &mut Tape, out: Var| -> Var {
        let shape = t.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let r = t.constant(r);
        let p = t.mul(out, r).unwrap();
        t.sum_all(p)
    };
    let eval = |vals: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vars);
        let l = project(&mut t, out);
        t.value(l).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
    let out = f(&mut t, &vars);
    let l = project(&mut t, out);
    let grads = t.gradients(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn eval1(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x);
    let o = f(&mut t, v);
    t.value(o).clone()
}

#[test]
fn elementwise_examples() {
    let s = eval1(Tensor::scalar(0.0), |t, v| t.sigmoid(v));
    assert_eq!(s.item(), 0.5);
    let r = eval1(Tensor::from_vec(&[2], vec![-3.0, 3.0]), |t, v| t.relu(v));
    assert_eq!(r.data(), &[0.0, 3.0]);
    // 1 / (1 + e^-8)
    let oracle = 1.0 / (1.0 + (-8.0f64).exp());
    let s8 = eval1(Tensor::scalar(8.0), |t, v| t.sigmoid(v));
    assert_abs_diff_eq!(s8.item(), oracle, epsilon = 1e-15);
    assert_abs_diff_eq!(s8.item(), 0.99966465, epsilon = 1e-8);
}

#[test]
fn elementwise_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::ones(&[2]));
    let b = t.constant(Tensor::ones(&[3]));
    assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
    let z = t.constant(Tensor::from_vec(&[2], vec![1.0, 0.0]));
    assert!(matches!(t.log(z), Err(Error::Domain { .. })));
    // scalar broadcast is allowed
    let s = t.scalar(2.0);
    let m = t.mul(b, s).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn linear_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let id = t.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let zero = t.constant(Tensor::zeros(&[2]));
    let one = t.constant(Tensor::ones(&[2]));
    let y = t.linear(x, id, zero).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    let x1 = t.constant(Tensor::ones(&[2]));
    let y = t.linear(x1, id, one).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 2.0]);
    let bad = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.linear(x, bad, zero).is_err());
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (r, din, dout) = (7, 5, 3);
    let x = rand_tensor(&mut rng, &[r, din], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[din, dout], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[dout], -2.0, 2.0);
    let mut oracle = vec![0.0; r * dout];
    for i in 0..r {
        for j in 0..dout {
            let mut s = b.data()[j];
            for k in 0..din {
                s += x.data()[i * din + k] * w.data()[k * dout + j];
            }
            oracle[i * dout + j] = s;
        }
    }
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
    let y = t.linear(xv, wv, bv).unwrap();
    for (a, o) in t.value(y).data().iter().zip(&oracle) {
        assert_abs_diff_eq!(*a, *o, epsilon = 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let s = eval1(Tensor::from_vec(&[2], vec![0.0, 0.0]), |t, v| {
        t.softmax_lastdim(v).unwrap()
    });
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = eval1(Tensor::from_vec(&[2], vec![1000.0, 1000.0]), |t, v| {
        t.softmax_lastdim(v).unwrap()
    });
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = eval1(Tensor::from_vec(&[2], vec![0.0, 3f64.ln()]), |t, v| {
        t.softmax_lastdim(v).unwrap()
    });
    assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        vals in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = vals.len();
        let a = eval1(Tensor::from_vec(&[n], vals.clone()), |t, v| t.softmax_lastdim(v).unwrap());
        let b = eval1(
            Tensor::from_vec(&[n], vals.iter().map(|v| v + shift).collect()),
            |t, v| t.softmax_lastdim(v).unwrap(),
        );
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        prop_assert!(a.data().iter().all(|&p| p >= 0.0));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let ln = |x: Tensor, eps: f64| {
        let c = *x.shape().last().unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(Tensor::ones(&[c]));
        let b = t.constant(Tensor::zeros(&[c]));
        let y = t.layer_normalize(xv, g, b, eps).unwrap();
        t.value(y).clone()
    };
    assert!(ln(Tensor::full(&[5], 3.7), 1e-5)
        .data()
        .iter()
        .all(|&v| v == 0.0));
    let y = ln(Tensor::from_vec(&[2], vec![1.0, -1.0]), 1e-14);
    assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(y.data()[1], -1.0, epsilon = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = ln(rand_tensor(&mut rng, &[64], -10.0, 10.0), 1e-5);
    let mean = y.sum() / 64.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-6);
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for c in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (i * stride + dy) as isize - pad as isize;
                            let xx = (j * stride + dx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += x.get(&[c, y as usize, xx as usize]) * k.get(&[o, c, dy, dx]);
                            }
                        }
                    }
                }
                out.set(&[o, i, j], s);
            }
        }
    }
    out
}

#[test]
fn conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 4, 5], -1.0, 1.0);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let id = t.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = t.conv2d(xv, id, 1, 0).unwrap();
    assert!(t.value(y).bit_eq(&x));
    let zk = t.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let y = t.conv2d(xv, zk, 1, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let bad = t.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(t.conv2d(xv, bad, 1, 1).is_err());
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let x = rand_tensor(&mut rng, &[3, 6, 7], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let want = conv_oracle(&x, &k, stride, pad);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x), t.constant(k));
        let y = t.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(t.value(y).shape(), want.shape());
        assert!(t.value(y).max_abs_diff(&want) < 1e-12);
    }
}

fn sample_at(map: Tensor, pts: Vec<(f64, f64)>) -> Tensor {
    let n = pts.len();
    let mut t = Tape::new();
    let m = t.constant(map);
    let p = t.constant(Tensor::from_vec(
        &[n, 2],
        pts.iter().flat_map(|&(u, v)| [u, v]).collect(),
    ));
    let s = t.bilinear_sample(m, p).unwrap();
    t.value(s).clone()
}

#[test]
fn bilinear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let map = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let s = sample_at(map.clone(), vec![(2.0, 1.0), (0.0, 0.0), (3.0, 2.0)]);
    assert_eq!(s.get(&[0, 0]), map.get(&[0, 1, 2]));
    assert_eq!(s.get(&[0, 1]), map.get(&[1, 1, 2]));
    assert_eq!(s.get(&[1, 0]), map.get(&[0, 0, 0]));
    assert_eq!(s.get(&[2, 1]), map.get(&[1, 2, 3]));

    let line = Tensor::from_vec(&[1, 1, 2], vec![0.0, 2.0]);
    assert_eq!(sample_at(line, vec![(0.5, 0.0)]).data(), &[1.0]);

    let s = sample_at(
        map.clone(),
        vec![(-10.0, -10.0), (1e9, 0.0), (f64::NAN, 0.0)],
    );
    assert!(s.data().iter().all(|&v| v == 0.0));
    // half a pixel off the border: half the edge value
    let s = sample_at(map.clone(), vec![(-0.5, 0.0)]);
    assert_abs_diff_eq!(s.get(&[0, 0]), 0.5 * map.get(&[0, 0, 0]), epsilon = 1e-15);
}

proptest! {
    #[test]
    fn bilinear_is_linear_between_neighbours(
        x0 in 0usize..3, y0 in 0usize..2, f in 0.0f64..1.0, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = rand_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
        let (xf, yf) = (x0 as f64, y0 as f64);
        let s = sample_at(map.clone(), vec![(xf + f, yf), (xf, yf + f)]);
        let along_u = (1.0 - f) * map.get(&[0, y0, x0]) + f * map.get(&[0, y0, x0 + 1]);
        let along_v = (1.0 - f) * map.get(&[0, y0, x0]) + f * map.get(&[0, y0 + 1, x0]);
        prop_assert!((s.data()[0] - along_u).abs() < 1e-12);
        prop_assert!((s.data()[1] - along_v).abs() < 1e-12);
    }
}

#[test]
fn resize_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let same = eval1(x.clone(), |t, v| t.interp_resize(v, (3, 3)).unwrap());
    assert!(same.bit_eq(&x));
    let c = eval1(Tensor::full(&[1, 3, 5], 4.25), |t, v| {
        t.interp_resize(v, (7, 2)).unwrap()
    });
    assert!(c.data().iter().all(|&v| (v - 4.25).abs() < 1e-15));

    // Hand-evaluated half-pixel weights for 2 -> 4 columns:
    // dst 0 -> src -0.25 (clamped to 0), dst 1 -> 0.25, dst 2 -> 0.75, dst 3 -> 1.25 (clamped to 1).
    let x = Tensor::from_vec(&[1, 2, 2], vec![0.0, 2.0, 0.0, 2.0]);
    let y = eval1(x, |t, v| t.interp_resize(v, (2, 4)).unwrap());
    let want = [0.0, 0.5, 1.5, 2.0];
    for r in 0..2 {
        for (j, w) in want.iter().enumerate() {
            assert_abs_diff_eq!(y.get(&[0, r, j]), *w, epsilon = 1e-12);
        }
    }
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[100_000]));
    assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(t.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean = t.value(y).sum() / 100_000.0;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn backward_outer_product() {
    let mut store = ParamStore::new(0);
    store.insert(
        "w",
        Tensor::from_vec(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
    );
    store.insert("b", Tensor::zeros(&[2]));
    store.insert("unused", Tensor::ones(&[4]));
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]));
    let w = t.param(&store, "w").unwrap();
    let b = t.param(&store, "b").unwrap();
    let _ = t.param(&store, "unused").unwrap();
    let y = t.linear(x, w, b).unwrap();
    let l = t.sum_all(y);
    t.backward(l, &mut store).unwrap();
    // d/dW_ij sum_j (x W)_j = x_i
    assert_eq!(
        store.grad("w").unwrap().data(),
        &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]
    );
    assert_eq!(store.grad("b").unwrap().data(), &[1.0, 1.0]);
    assert!(store
        .grad("unused")
        .unwrap()
        .data()
        .iter()
        .all(|&g| g == 0.0));
    assert!(t.backward(y, &mut store).is_err());
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = Vec::new();
    let a = rand_tensor(&mut rng, &[2, 3], -1.5, 1.5);
    let b = rand_tensor(&mut rng, &[2, 3], 0.5, 2.0);
    let pos = rand_tensor(&mut rng, &[2, 3], 0.2, 2.0);
    worst.push((
        "add",
        primitive_grad_error(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()),
    ));
    worst.push((
        "sub",
        primitive_grad_error(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap()),
    ));
    worst.push((
        "mul",
        primitive_grad_error(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap()),
    ));
    worst.push((
        "div",
        primitive_grad_error(&[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]).unwrap()),
    ));
    worst.push((
        "scale",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7)),
    ));
    worst.push((
        "add_scalar",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 0.3)),
    ));
    worst.push((
        "exp",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.exp(v[0])),
    ));
    worst.push((
        "log",
        primitive_grad_error(std::slice::from_ref(&pos), |t, v| t.log(v[0]).unwrap()),
    ));
    worst.push((
        "relu",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.relu(v[0])),
    ));
    worst.push((
        "sigmoid",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.sigmoid(v[0])),
    ));
    worst.push((
        "tanh",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.tanh(v[0])),
    ));
    worst.push((
        "powf",
        primitive_grad_error(std::slice::from_ref(&pos), |t, v| t.powf(v[0], 2.5).unwrap()),
    ));
    worst.push((
        "clamp",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.clamp(v[0], -0.9, 0.8)),
    ));
    let row = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
    worst.push((
        "broadcast",
        primitive_grad_error(&[row], |t, v| t.broadcast_to(v[0], &[4, 3]).unwrap()),
    ));
    let cube = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    worst.push((
        "sum_axis",
        primitive_grad_error(std::slice::from_ref(&cube), |t, v| t.sum_axis(v[0], 1).unwrap()),
    ));
    worst.push((
        "permute",
        primitive_grad_error(std::slice::from_ref(&cube), |t, v| t.permute(v[0], &[2, 0, 1]).unwrap()),
    ));
    worst.push((
        "slice",
        primitive_grad_error(std::slice::from_ref(&cube), |t, v| t.slice(v[0], 2, 1, 2).unwrap()),
    ));
    worst.push((
        "concat",
        primitive_grad_error(&[cube.clone(), cube.clone()], |t, v| {
            t.concat(v, 1).unwrap()
        }),
    ));
    worst.push((
        "gather",
        primitive_grad_error(std::slice::from_ref(&a), |t, v| t.gather_last(v[0], &[2, 0]).unwrap()),
    ));
    let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    worst.push((
        "linear",
        primitive_grad_error(&[x.clone(), w, bias], |t, v| {
            t.linear(v[0], v[1], v[2]).unwrap()
        }),
    ));
    worst.push((
        "softmax",
        primitive_grad_error(std::slice::from_ref(&x), |t, v| t.softmax_lastdim(v[0]).unwrap()),
    ));
    worst.push((
        "log_softmax",
        primitive_grad_error(std::slice::from_ref(&x), |t, v| t.log_softmax_lastdim(v[0]).unwrap()),
    ));
    let g = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let bb = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    worst.push((
        "layer_norm",
        primitive_grad_error(&[x.clone(), g, bb], |t, v| {
            t.layer_normalize(v[0], v[1], v[2], 1e-5).unwrap()
        }),
    ));
    let img = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let k3 = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    worst.push((
        "conv2d",
        primitive_grad_error(&[img.clone(), k3.clone()], |t, v| {
            t.conv2d(v[0], v[1], 1, 1).unwrap()
        }),
    ));
    worst.push((
        "conv2d_s2",
        primitive_grad_error(&[img.clone(), k3], |t, v| {
            t.conv2d(v[0], v[1], 2, 1).unwrap()
        }),
    ));
    let pts = Tensor::from_vec(&[4, 2], vec![0.3, 0.6, 2.7, 3.2, -0.4, 1.5, 3.4, 4.3]);
    worst.push((
        "bilinear",
        primitive_grad_error(&[img.clone(), pts], |t, v| {
            t.bilinear_sample(v[0], v[1]).unwrap()
        }),
    ));
    worst.push((
        "resize_up",
        primitive_grad_error(std::slice::from_ref(&img), |t, v| {
            t.interp_resize(v[0], (9, 7)).unwrap()
        }),
    ));
    worst.push((
        "resize_down",
        primitive_grad_error(&[img], |t, v| t.interp_resize(v[0], (2, 3)).unwrap()),
    ));
    worst.push((
        "dropout",
        primitive_grad_error(&[x], |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            t.dropout(v[0], 0.3, true, &mut r).unwrap()
        }),
    ));
    for (name, err) in worst {
        assert!(err < 1e-6, "{name}: relative gradient error {err}");
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0));
        let k = t.constant(rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let y = t.interp_resize(y, (5, 5)).unwrap();
        let y = t.dropout(y, 0.2, true, &mut rng).unwrap();
        let y = t.tanh(y);
        t.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn real32_propagates() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(&[1], vec![0.1]).to_dtype(DType::Real32));
    let b = t.constant(Tensor::from_vec(&[1], vec![0.2]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).dtype(), DType::Real32);
    assert_eq!(t.value(c).data()[0], (0.1f32 as f64 + 0.2) as f32 as f64);
}

#[test]
fn weighted_sample_matches_composed_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, np, c) = (5, 3, 4);
    let map = rand_tensor(&mut rng, &[c, 6, 7], -1.0, 1.0);
    let pts = rand_tensor(&mut rng, &[n, np, 2], -1.5, 7.5);
    let wts = rand_tensor(&mut rng, &[n, np], 0.0, 1.0);
    let mut t = Tape::new();
    let (m, p, w) = (t.constant(map), t.constant(pts), t.constant(wts));
    let fused = t.weighted_sample(m, p, w).unwrap();
    let flat = t.reshape(p, &[n * np, 2]).unwrap();
    let s = t.bilinear_sample(m, flat).unwrap();
    let s = t.reshape(s, &[n, np, c]).unwrap();
    let w3 = t.reshape(w, &[n, np, 1]).unwrap();
    let w3 = t.broadcast_to(w3, &[n, np, c]).unwrap();
    let prod = t.mul(s, w3).unwrap();
    let composed = t.sum_axis(prod, 1).unwrap();
    assert!(t.value(fused).max_abs_diff(t.value(composed)) < 1e-12);
}

#[test]
fn weighted_sample_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let map = rand_tensor(&mut rng, &[3, 5, 4], -1.0, 1.0);
    let pts = Tensor::from_vec(
        &[2, 3, 2],
        vec![0.3, 0.6, 2.7, 3.2, -0.4, 1.5, 3.4, 4.3, 1.2, 0.1, 2.5, 2.5],
    );
    let wts = rand_tensor(&mut rng, &[2, 3], 0.1, 1.0);
    let err = primitive_grad_error(&[map, pts, wts], |t, v| {
        t.weighted_sample(v[0], v[1], v[2]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}
