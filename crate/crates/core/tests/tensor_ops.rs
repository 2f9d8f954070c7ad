use mono3d::tensor::{grad_check, grad_check_params, OpKind, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Straightforward loops over every output tap.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let og = o / groups;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oc];
                    for ci in 0..cg {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, g * cg + ci, iy as usize, ix as usize]) * w.at(&[oc, ci, i, j]);
                            }
                        }
                    }
                    let off = out.offset(&[ni, oc, y, xx]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
    let y = t.conv2d(xv, wv, Some(bv), stride, pad, groups).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_sum_of_ones() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 2, 2], 1.0);
    let y = conv(&x, &w, &Tensor::zeros(&[1]), 1, 0, 1);
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 4.0));
}

#[test]
fn depthwise_identity_kernel() {
    let x = random(&[1, 4, 5, 6], 1);
    let w = Tensor::full(&[4, 1, 1, 1], 1.0);
    let y = conv(&x, &w, &Tensor::zeros(&[4]), 1, 0, 4);
    assert_eq!(y, x);
}

#[test]
fn conv_matches_direct_oracle() {
    let cases = [(1, 0, 1, 3), (2, 1, 1, 3), (1, 1, 3, 3), (2, 3, 1, 7), (2, 1, 3, 3)];
    for (seed, &(stride, pad, groups, k)) in cases.iter().enumerate() {
        let x = random(&[2, 3 * (groups.max(1)), 8, 8], seed as u64);
        let c = x.shape()[1];
        let w = random(&[6, c / groups, k, k], 100 + seed as u64);
        let b = random(&[6], 200 + seed as u64);
        let got = conv(&x, &w, &b, stride, pad, groups);
        let want = conv_oracle(&x, &w, &b, stride, pad, groups);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-10, "case {seed}");
    }
}

#[test]
fn conv_rejects_bad_groups() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 3, 4, 4]));
    let w = t.leaf(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(matches!(t.conv2d(x, w, None, 1, 1, 2), Err(TensorError::Dimension(_))));
}

#[test]
fn conv_rejects_non_finite_input() {
    let mut t = Tape::new();
    let mut xs = Tensor::zeros(&[1, 1, 3, 3]);
    xs.data_mut()[4] = f64::NAN;
    let x = t.leaf(xs);
    let w = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    assert!(matches!(t.conv2d(x, w, None, 1, 1, 1), Err(TensorError::Numeric(_))));
}

#[test]
fn matmul_small_cases() {
    let mut t = Tape::new();
    let eye = t.leaf(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let m = random(&[3, 4], 3);
    let mv = t.leaf(m.clone());
    let y = t.matmul(eye, mv).unwrap();
    assert_eq!(t.value(y).data(), m.data());

    let a = t.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.leaf(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y).data(), &[11.0]);

    let bad = t.leaf(Tensor::zeros(&[3, 1]));
    assert!(matches!(t.matmul(a, bad), Err(TensorError::Dimension(_))));
}

#[test]
fn matmul_batched_matches_loops() {
    let a = random(&[4, 5, 6], 7);
    let b = random(&[4, 6, 3], 8);
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let y = t.matmul(av, bv).unwrap();
    let got = t.value(y);
    for bi in 0..4 {
        for i in 0..5 {
            for j in 0..3 {
                let want: f64 = (0..6).map(|k| a.at(&[bi, i, k]) * b.at(&[bi, k, j])).sum();
                assert!((got.at(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
    // broadcast a 2-D right operand and a size-1 leading axis
    let w = random(&[6, 2], 9);
    let c = w.reshape(&[1, 6, 2]).unwrap();
    let wv = t.leaf(w.clone());
    let cv = t.leaf(c.clone());
    let y1 = t.matmul(av, wv).unwrap();
    let y2 = t.matmul(av, cv).unwrap();
    assert_eq!(t.shape(y1), &[4, 5, 2]);
    assert_eq!(t.value(y1).data(), t.value(y2).data());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[2, 5], 3.7));
    let y = t.softmax(x).unwrap();
    assert!(t.data(y).iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let x = t.leaf(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
    let y = t.softmax(x).unwrap();
    assert!((t.data(y)[0] - 1.0).abs() < 1e-15 && t.data(y)[1] < 1e-300);

    let r = random(&[6, 9], 11);
    let x = t.leaf(r.clone());
    let y = t.softmax(x).unwrap();
    for (row_in, row_out) in r.data().chunks(9).zip(t.data(y).chunks(9)) {
        assert!((row_out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..9 {
            for j in 0..9 {
                if row_in[i] < row_in[j] {
                    assert!(row_out[i] < row_out[j]);
                }
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let ones = t.leaf(Tensor::full(&[2], 1.0));
    let zeros = t.leaf(Tensor::zeros(&[2]));
    let x = t.leaf(Tensor::full(&[3, 2], 5.0));
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));

    let x = t.leaf(Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap());
    let y = t.layer_norm(x, ones, zeros, 1e-12).unwrap();
    assert!((t.data(y)[0] + 1.0).abs() < 1e-9 && (t.data(y)[1] - 1.0).abs() < 1e-9);

    let beta = t.leaf(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
    let x = t.leaf(random(&[4, 2], 12));
    let y = t.layer_norm(x, zeros, beta, 1e-5).unwrap();
    for row in t.data(y).chunks(2) {
        assert_eq!(row, &[0.3, -0.7]);
    }

    let g = t.leaf(Tensor::full(&[16], 1.0));
    let b = t.leaf(Tensor::zeros(&[16]));
    let x = t.leaf(random(&[5, 16], 13));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    for row in t.data(y).chunks(16) {
        assert!((row.iter().sum::<f64>() / 16.0).abs() < 1e-10);
    }
}

/// erf from its Maclaurin series; converges quickly for |x| ≤ 3.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..80 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[4], vec![0.0, 1.0, 40.0, -40.0]).unwrap());
    let y = t.gelu(x).unwrap();
    let v = t.data(y);
    assert_eq!(v[0], 0.0);
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((v[1] - phi1).abs() < 1e-14);
    assert!((v[1] - 0.8413).abs() < 1e-4);
    assert!((v[2] - 40.0).abs() < 1e-12);
    assert!(v[3].abs() < 1e-12);
}

/// Per-pixel weight table for a half-pixel-center 2→4 upsample, derived by hand:
/// destination centers map to source coordinates -0.25, 0.25, 0.75, 1.25,
/// clamped to [0, 1], giving upper-tap weights 0, 0.25, 0.75, 1.
fn bilinear_2x2_to_4x4_oracle(src: [[f64; 2]; 2]) -> [[f64; 4]; 4] {
    let wts = [0.0, 0.25, 0.75, 1.0];
    let mut out = [[0.0; 4]; 4];
    for (i, &wy) in wts.iter().enumerate() {
        for (j, &wx) in wts.iter().enumerate() {
            out[i][j] = src[0][0] * (1.0 - wy) * (1.0 - wx)
                + src[0][1] * (1.0 - wy) * wx
                + src[1][0] * wy * (1.0 - wx)
                + src[1][1] * wy * wx;
        }
    }
    out
}

#[test]
fn bilinear_examples() {
    let mut t = Tape::new();
    let r = random(&[1, 2, 5, 7], 14);
    let x = t.leaf(r.clone());
    let y = t.bilinear_resize(x, 5, 7).unwrap();
    assert_eq!(t.value(y).data(), r.data());

    let c = t.leaf(Tensor::full(&[1, 1, 3, 4], 2.5));
    let y = t.bilinear_resize(c, 7, 2).unwrap();
    assert!(t.data(y).iter().all(|&v| (v - 2.5).abs() < 1e-15));

    let x = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = t.bilinear_resize(x, 4, 4).unwrap();
    let want = bilinear_2x2_to_4x4_oracle([[0.0, 1.0], [2.0, 3.0]]);
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    assert_eq!(t.data(y), &flat[..]);
    assert_eq!(&flat[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let xs = random(&[3, 4], 15);
    let x = t.leaf(xs.clone().with_grad());
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));

    let mut t = Tape::new();
    let x = t.leaf(xs.clone().with_grad());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    for (g, v) in t.grad(x).unwrap().iter().zip(xs.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
    // second call accumulates, zero_grads resets
    t.backward(s).unwrap();
    for (g, v) in t.grad(x).unwrap().iter().zip(xs.data()) {
        assert!((g - 4.0 * v).abs() < 1e-15);
    }
    t.zero_grads();
    assert!(t.grad(x).unwrap().iter().all(|&g| g == 0.0));

    assert!(matches!(t.backward(sq), Err(TensorError::Usage(_))));
}

/// conv → layer norm (channels last) → softmax → weighted sum.
fn composite(t: &mut Tape, v: &[Var], mix: &Tensor) -> mono3d::tensor::Result<Var> {
    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
    let y = t.permute(y, &[0, 2, 3, 1])?;
    let y = t.layer_norm(y, v[3], v[4], 1e-5)?;
    let y = t.softmax(y)?;
    let m = t.constant(mix.clone());
    let y = t.mul(y, m)?;
    t.sum(y)
}

fn composite_inputs(seed: u64) -> (Vec<Tensor>, Tensor) {
    let inputs = vec![
        random(&[1, 2, 4, 4], seed),
        random(&[3, 2, 3, 3], seed + 1),
        random(&[3], seed + 2),
        random(&[3], seed + 3),
        random(&[3], seed + 4),
    ];
    (inputs, random(&[1, 4, 4, 3], seed + 5))
}

#[test]
fn composite_graph_gradients() {
    for seed in 0..20u64 {
        let (inputs, mix) = composite_inputs(seed * 10);
        let samples: Vec<(usize, usize)> =
            inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
        let r = grad_check_params(|t, v| composite(t, v, &mix), &inputs, 1e-5, &samples, None).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn fault_injection_trips_the_check() {
    let (inputs, mix) = composite_inputs(3);
    let samples: Vec<(usize, usize)> = (0..inputs[0].numel()).map(|j| (0, j)).collect();
    let r = grad_check_params(|t, v| composite(t, v, &mix), &inputs, 1e-5, &samples, Some(OpKind::Conv2d)).unwrap();
    assert!(r.max_rel_error > 1e-2);
}

/// One scalar-valued probe per differentiable op.
fn op_probe(kind: &str, t: &mut Tape, x: Var, w: &Tensor) -> mono3d::tensor::Result<Var> {
    let y = match kind {
        "exp" => t.exp(x)?,
        "log" => {
            let a = t.abs(x)?;
            let a = t.add_scalar(a, 0.5)?;
            t.log(a)?
        }
        "sqrt" => {
            let a = t.mul(x, x)?;
            let a = t.add_scalar(a, 0.3)?;
            t.sqrt(a)?
        }
        "sigmoid" => t.sigmoid(x)?,
        "gelu" => t.gelu(x)?,
        "div" => {
            let d = t.exp(x)?;
            t.div(x, d)?
        }
        "log_softmax" => t.log_softmax(x)?,
        "bilinear" => {
            let r = t.reshape(x, &[1, 1, 3, 4])?;
            let up = t.bilinear_resize(r, 5, 9)?;
            let flat = t.reshape(up, &[45])?;
            t.narrow(flat, 0, 0, 12)?
        }
        "pad_narrow" => {
            let r = t.reshape(x, &[1, 2, 2, 3])?;
            let p = t.pad2d(r, [1, 0, 2, 1])?;
            let p = t.reshape(p, &[2 * 3 * 6])?;
            t.narrow(p, 0, 10, 12)?
        }
        "concat_permute" => {
            let r = t.reshape(x, &[3, 4])?;
            let c = t.concat(&[r, r], 1)?;
            let p = t.permute(c, &[1, 0])?;
            let p = t.reshape(p, &[24])?;
            t.narrow(p, 0, 6, 12)?
        }
        "roi_align" => {
            let r = t.reshape(x, &[1, 1, 3, 4])?;
            let c = t.roi_align(r, 0, [0.3, 0.2, 3.7, 2.6], 3)?;
            let c = t.reshape(c, &[9])?;
            t.gather(c, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 0, 4, 8])?
        }
        "mean_lastdim" => {
            let r = t.reshape(x, &[3, 4])?;
            let m = t.mean_lastdim(r)?;
            let e = t.exp(m)?;
            t.concat(&[e, e, e, e], 0)?
        }
        "focal" => {
            let s = t.sigmoid(x)?;
            let gt = Tensor::from_fn(&[12], |i| if i == 5 { 1.0 } else { 0.1 * (i % 4) as f64 });
            let f = t.focal_loss(s, &gt, 2.0, 4.0)?;
            return Ok(f);
        }
        other => panic!("unknown probe {other}"),
    };
    let m = t.constant(w.clone());
    let y = t.mul(y, m)?;
    t.sum(y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..10_000) {
        let x = random(&[12], seed);
        let w = random(&[12], seed + 1);
        for kind in ["exp", "log", "sqrt", "sigmoid", "gelu", "div", "log_softmax", "bilinear",
                     "pad_narrow", "concat_permute", "roi_align", "mean_lastdim", "focal"] {
            let r = grad_check(|t, v| op_probe(kind, t, v, &w), &x, 1e-5).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        }
    }

    #[test]
    fn matmul_grads(seed in 0u64..10_000) {
        let a = random(&[2, 3, 4], seed);
        let b = random(&[4, 2], seed + 1);
        let w = random(&[2, 3, 2], seed + 2);
        let samples: Vec<_> = (0..24).map(|j| (0, j)).chain((0..8).map(|j| (1, j))).collect();
        let r = grad_check_params(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let m = t.constant(w.clone());
            let y = t.mul(y, m)?;
            t.sum(y)
        }, &[a, b], 1e-5, &samples, None).unwrap();
        prop_assert!(r.max_rel_error < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..9) {
        let mut t = Tape::new();
        let x = t.leaf(random(&[rows, cols], seed));
        let y = t.softmax(x).unwrap();
        for row in t.data(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let (inputs, mix) = composite_inputs(42);
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.into_iter().map(|x| t.leaf(x)).collect();
        let out = composite(&mut t, &vars, &mix).unwrap();
        t.value(out).item().to_bits()
    };
    assert_eq!(run(), run());
}
