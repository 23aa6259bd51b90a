use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sghf_core::gradcheck;
use sghf_core::tensor::{Tape, Tensor, Var};
use sghf_core::{Error, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, r);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    t
}

/// sum(x * w) for a fixed random w: turns any tensor into a scalar with rich gradients.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(x), &mut rng(seed ^ 0x9e37));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

/// Definition-level 3-D cross-correlation over `[C, D, H, W]` with bounds checks per tap.
fn naive_conv3d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kd, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3], k.shape()[4]);
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xat = |c: usize, z: i64, y: i64, xx: i64| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as i64 || y >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x.data()[((c * d + z as usize) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; co * od * oh * ow];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let kv = k.data()[(((o * ci + c) * kd + a) * kh + b) * kw + e];
                                    acc += kv
                                        * xat(
                                            c,
                                            (z * stride + a) as i64 - pad as i64,
                                            (y * stride + b) as i64 - pad as i64,
                                            (xx * stride + e) as i64 - pad as i64,
                                        );
                                }
                            }
                        }
                    }
                    out[((o * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (vec![co, od, oh, ow], out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_closed_forms() {
    let mut tape = Tape::new();
    let b = tape.constant(Tensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let i = tape.constant(Tensor::eye(2));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a = random(&[7, 5], &mut r);
        let b = random(&[5, 3], &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert!(max_abs_diff(tape.value(c).data(), &naive_matmul(&a, &b)) <= 1e-12);
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut r = rng(2);
    let x = random(&[1, 4, 5, 6], &mut r);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let one = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = tape.conv(vx, one, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
    assert_eq!(tape.shape(y), x.shape());

    let zero = tape.constant(Tensor::zeros(&[3, 1, 3, 3, 3]));
    let y = tape.conv(vx, zero, 1, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // 2-D identity kernel
    let x2 = random(&[2, 5, 5], &mut r);
    let v2 = tape.constant(x2.clone());
    let mut k = Tensor::zeros(&[2, 2, 1, 1]);
    k.data_mut()[0] = 1.0;
    k.data_mut()[3] = 1.0;
    let k = tape.constant(k);
    let y = tape.conv(v2, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x2.data());
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(3);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        for _ in 0..5 {
            let x = random(&[1, 4, 4, 4], &mut r);
            let k = random(&[2, 1, 3, 3, 3], &mut r);
            let (shape, expect) = naive_conv3d(&x, &k, stride, pad);
            let mut tape = Tape::new();
            let (vx, vk) = (tape.constant(x), tape.constant(k));
            let y = tape.conv(vx, vk, stride, pad).unwrap();
            assert_eq!(tape.shape(y), shape.as_slice());
            assert!(max_abs_diff(tape.value(y).data(), &expect) <= 1e-12);
        }
    }
    // multi-channel, non-cubic, batched
    let x = random(&[2, 3, 5, 6, 4], &mut r);
    let k = random(&[4, 3, 3, 2, 3], &mut r);
    let mut tape = Tape::new();
    let (vx, vk) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv(vx, vk, 2, 1).unwrap();
    for b in 0..2 {
        let xb = Tensor::new(vec![3, 5, 6, 4], x.data()[b * 360..(b + 1) * 360].to_vec()).unwrap();
        let (shape, expect) = naive_conv3d(&xb, &k, 2, 1);
        let per: usize = shape.iter().product();
        let got = &tape.value(y).data()[b * per..(b + 1) * per];
        assert!(max_abs_diff(got, &expect) <= 1e-12);
    }
}

#[test]
fn conv_rejects_rank_mismatch_and_oversized_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3, 3]));
    assert!(tape.conv(x, k, 1, 0).is_err());
    assert!(tape.conv(x, k, 1, 1).is_ok());
    let k2 = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.conv(x, k2, 1, 0).is_err());
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(vec![-4.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);
    let x = tape.constant(Tensor::vector(vec![0.0, 2f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(max_abs_diff(tape.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0]) < 1e-15);
}

#[test]
fn softmax_sums_to_one_and_ignores_shifts() {
    let mut r = rng(4);
    for axis in 0..3 {
        let x = random(&[3, 4, 5], &mut r);
        let shift = r.random_range(-50.0..50.0);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v = *v * 10.0 + shift);
        let mut scaled = x.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(scaled), tape.constant(shifted));
        let ya = tape.softmax(a, axis).unwrap();
        let yb = tape.softmax(b, axis).unwrap();
        assert!(max_abs_diff(tape.value(ya).data(), tape.value(yb).data()) <= 1e-12);
        let y = tape.value(ya);
        let (outer, len, inner) = {
            let s = y.shape();
            (s[..axis].iter().product::<usize>(), s[axis], s[axis + 1..].iter().product::<usize>())
        };
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..len).map(|j| y.data()[(o * len + j) * inner + i]).sum();
                assert!((total - 1.0).abs() <= 1e-12);
                assert!((0..len).all(|j| y.data()[(o * len + j) * inner + i] > 0.0));
            }
        }
    }
}

#[test]
fn concat_values_shapes_and_gradient_routing() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let b = tape.leaf(Tensor::vector(vec![3.0]), true);
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0]);

    let f = 6;
    let p = tape.constant(Tensor::zeros(&[1, f]));
    let q = tape.constant(Tensor::zeros(&[1, f]));
    let fused = tape.concat(&[p, q], 1).unwrap();
    assert_eq!(tape.shape(fused), &[1, 2 * f]);
    let bad = tape.constant(Tensor::zeros(&[2, f]));
    assert!(tape.concat(&[p, bad], 1).is_err());
}

#[test]
fn backward_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -1.0, 7.0]), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let unused = tape.leaf(Tensor::vector(vec![5.0]), true);
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut r = rng(5);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[2, 1, 4, 4, 4], &mut r), true);
        let k = tape.leaf(random(&[3, 1, 3, 3, 3], &mut r), true);
        let g = tape.leaf(Tensor::full(&[3], 1.2), true);
        let b = tape.leaf(Tensor::full(&[3], 0.1), true);
        let y = tape.conv(x, k, 1, 1).unwrap();
        let (y, _) = tape.batch_norm(y, g, b, 1e-5).unwrap();
        let y = tape.relu(y);
        let s = project(&mut tape, y, 11).unwrap();
        tape.backward(s).unwrap();
        [x, k, g, b].map(|v| tape.grad(v).unwrap().to_bytes())
    };
    assert_eq!(build(), build());
}

const CASES: u64 = 50;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = gradcheck::check(&inputs, H, f).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name}: max relative error {:.3e}",
        report.max_rel_error
    );
}

#[test]
fn gradients_of_elementwise_ops() {
    for seed in 0..CASES {
        let mut r = rng(100 + seed);
        let a = away_from_zero(&[3, 4], &mut r);
        let b = away_from_zero(&[3, 4], &mut r);
        assert_grad("add", vec![a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_grad("sub", vec![a.clone(), b.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_grad("mul", vec![a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_grad("scale+shift", vec![a.clone()], |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.4);
            project(t, y, seed)
        });
        assert_grad("relu", vec![a.clone()], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        });
        assert_grad("sigmoid", vec![a.clone()], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, seed)
        });
        let bias = random(&[4], &mut r);
        assert_grad("add_bias", vec![a.clone(), bias], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_grad("mean", vec![a.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        });
    }
}

#[test]
fn gradients_of_structural_ops() {
    for seed in 0..CASES {
        let mut r = rng(200 + seed);
        let a = random(&[3, 5], &mut r);
        let b = random(&[5, 2], &mut r);
        assert_grad("matmul", vec![a.clone(), b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_grad("transpose", vec![a.clone()], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, seed)
        });
        assert_grad("reshape", vec![a.clone()], |t, v| {
            let y = t.reshape(v[0], &[5, 3])?;
            project(t, y, seed)
        });
        let c = random(&[3, 2], &mut r);
        assert_grad("concat", vec![a.clone(), c], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y, seed)
        });
        assert_grad("slice", vec![a.clone()], |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            project(t, y, seed)
        });
        let axis = (seed % 2) as usize;
        assert_grad("softmax", vec![a.clone()], |t, v| {
            let y = t.softmax(v[0], axis)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_conv_and_pooling() {
    for seed in 0..CASES {
        let mut r = rng(300 + seed);
        let stride = 1 + (seed % 2) as usize;
        let pad = (seed % 3 % 2) as usize;
        let x = random(&[2, 2, 4, 5, 4], &mut r);
        let k = random(&[3, 2, 3, 3, 2], &mut r);
        assert_grad("conv3d", vec![x, k], |t, v| {
            let y = t.conv(v[0], v[1], stride, pad)?;
            project(t, y, seed)
        });
        let x = random(&[2, 5, 6], &mut r);
        let k = random(&[2, 2, 3, 3], &mut r);
        assert_grad("conv2d", vec![x, k], |t, v| {
            let y = t.conv(v[0], v[1], stride, 1)?;
            project(t, y, seed)
        });
        let x = random(&[2, 3, 2, 2, 2], &mut r);
        assert_grad("global_avg_pool", vec![x], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_normalization_and_loss() {
    for seed in 0..CASES {
        let mut r = rng(400 + seed);
        let x = random(&[4, 3, 2, 2], &mut r);
        let g = random(&[3], &mut r);
        let b = random(&[3], &mut r);
        assert_grad("batch_norm", vec![x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        });
        let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
        assert_grad("batch_norm_fixed", vec![x, g, b], |t, v| {
            let y = t.batch_norm_fixed(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, seed)
        });
        let x = random(&[3, 5], &mut r);
        let g = random(&[5], &mut r);
        let b = random(&[5], &mut r);
        assert_grad("layer_norm", vec![x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        });
        let logits = random(&[6], &mut r);
        let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        assert_grad("bce", vec![logits], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &labels)
        });
    }
}

#[test]
fn composite_graph_gradients() {
    for seed in 0..CASES {
        let mut r = rng(500 + seed);
        let x = random(&[2, 1, 3, 4, 4], &mut r);
        let k = random(&[2, 1, 3, 3, 3], &mut r);
        let g = random(&[2], &mut r);
        let w = random(&[2, 3], &mut r);
        let bias = random(&[3], &mut r);
        assert_grad("conv-bn-relu-pool-dense-softmax", vec![x, k, g, w, bias], |t, v| {
            let y = t.conv(v[0], v[1], 1, 1)?;
            let beta = t.constant(Tensor::full(&[2], 0.1));
            let (y, _) = t.batch_norm(y, v[2], beta, 1e-5)?;
            let y = t.sigmoid(y);
            let y = t.global_avg_pool(y)?;
            let y = t.matmul(y, v[3])?;
            let y = t.add_bias(y, v[4])?;
            let y = t.softmax(y, 1)?;
            project(t, y, seed)
        });
    }
}
