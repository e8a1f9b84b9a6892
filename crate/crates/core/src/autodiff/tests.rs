use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct quadruple-loop cross-correlation.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 1.0));
}

#[test]
fn conv_full_sum_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = t.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), &[10.0]);
}

#[test]
fn conv_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let expect = naive_conv(&x, &k, stride, pad);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x), t.constant(k));
        let y = t.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(t.value(y).len(), expect.len());
        for (a, b) in t.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(t.conv2d(x, k, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn spatial_mean_examples() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(&[3, 4, 5], 7.0));
    let m = t.spatial_mean(c).unwrap();
    assert_eq!(t.value(m).data(), &[7.0, 7.0, 7.0]);
    let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let m = t.spatial_mean(x).unwrap();
    assert_eq!(t.value(m).data(), &[2.5]);
    let empty = t.constant(Tensor::zeros(&[2, 0, 3]));
    assert!(t.spatial_mean(empty).is_err());
}

#[test]
fn spatial_mean_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 6, 6]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let m = t.spatial_mean(xv).unwrap();
    for c in 0..4 {
        let mut acc = 0.0;
        for i in 0..36 {
            acc += x.data()[c * 36 + i];
        }
        assert!((t.value(m).data()[c] - acc / 36.0).abs() < 1e-12);
    }
}

#[test]
fn downsample_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(&[4, 4], 0.5));
    let d = t.downsample_avg(a, 2, 2).unwrap();
    assert_eq!(t.value(d).data(), &[0.5; 4]);
    let b = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let d = t.downsample_avg(b, 1, 1).unwrap();
    assert_eq!(t.value(d).data(), &[0.5]);
    assert!(t.downsample_avg(a, 3, 3).is_err());
}

#[test]
fn downsample_matches_block_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[8, 8]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let d = t.downsample_avg(xv, 4, 4).unwrap();
    for by in 0..4 {
        for bx in 0..4 {
            let mut acc = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    acc += x.data()[(by * 2 + dy) * 8 + bx * 2 + dx];
                }
            }
            assert!((t.value(d).data()[by * 4 + bx] - acc / 4.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_value(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0], COSINE_EPS), 1.0);
    assert_eq!(cosine_value(&[1.0, 0.0], &[0.0, 1.0], COSINE_EPS), 0.0);
    let (a, b) = ([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]);
    let expect = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
    assert!((cosine_value(&a, &b, COSINE_EPS) - expect).abs() < 1e-12);
    assert_eq!(cosine_value(&[0.0, 0.0], &[1.0, 1.0], COSINE_EPS), 0.0);

    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let y = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert!(matches!(t.cosine_similarity(x, y, COSINE_EPS), Err(Error::Dimension(_))));
}

#[test]
fn backward_linear_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = rand_tensor(&mut rng, &[3, 4]);
    let mut t = Tape::new();
    let v = t.param(p.clone());
    let s = t.sum(v);
    let g = t.backward(s).unwrap();
    assert!(g.get(v).unwrap().iter().all(|&x| x == 1.0));

    let mut t = Tape::new();
    let v = t.param(p.clone());
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    let g = t.backward(half).unwrap();
    for (a, b) in g.get(v).unwrap().iter().zip(p.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let v = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(v), Err(Error::Usage(_))));
}

#[test]
fn backward_is_repeatable_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new();
    let x = t.param(rand_tensor(&mut rng, &[1, 2, 6, 6]));
    let k = t.param(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    let y = t.conv2d(x, k, 1, 1).unwrap();
    let r = t.relu(y);
    let s = t.sigmoid(r);
    let l = t.sum(s);
    let g1 = t.backward(l).unwrap();
    let g2 = t.backward(l).unwrap();
    assert_eq!(g1.get(k), g2.get(k));
    assert_eq!(g1.get(x), g2.get(x));
}

#[test]
fn fd_check_of_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = rand_tensor(&mut rng, &[5]);
    let r = finite_difference_check(|t, v| Ok(t.sum(v[0])), &[p], 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

/// Each differentiable op, composed with a random linear read-out, checked
/// against central differences on 20 random instances.
#[test]
fn every_op_matches_finite_differences() {
    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("conv2d", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![1, 3, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            let p = t.mul(y, v[2])?;
            Ok(t.sum(p))
        }),
        ("bias_add", vec![vec![2, 3, 2, 2], vec![3], vec![2, 3, 2, 2]], |t, v| {
            let y = t.bias_add(v[0], v[1])?;
            let p = t.mul(y, v[2])?;
            Ok(t.sum(p))
        }),
        ("add_mul_affine", vec![vec![6], vec![6]], |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[1])?;
            let a = t.affine(m, -1.5, 0.25);
            Ok(t.sum(a))
        }),
        ("sigmoid", vec![vec![7], vec![7]], |t, v| {
            let s = t.sigmoid(v[0]);
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        }),
        ("relu", vec![vec![7], vec![7]], |t, v| {
            let s = t.relu(v[0]);
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        }),
        ("upsample", vec![vec![1, 2, 2, 3], vec![1, 2, 4, 6]], |t, v| {
            let u = t.upsample_nearest2x(v[0])?;
            let p = t.mul(u, v[1])?;
            Ok(t.sum(p))
        }),
        ("concat", vec![vec![1, 2, 2, 2], vec![1, 1, 2, 2], vec![1, 3, 2, 2]], |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let p = t.mul(c, v[2])?;
            Ok(t.sum(p))
        }),
        ("spatial_mean", vec![vec![3, 2, 4], vec![3]], |t, v| {
            let m = t.spatial_mean(v[0])?;
            let p = t.mul(m, v[1])?;
            Ok(t.sum(p))
        }),
        ("downsample", vec![vec![4, 6], vec![2, 3]], |t, v| {
            let d = t.downsample_avg(v[0], 2, 3)?;
            let p = t.mul(d, v[1])?;
            Ok(t.sum(p))
        }),
        ("mask_channels", vec![vec![2, 3, 3], vec![3, 3], vec![2, 3, 3]], |t, v| {
            let m = t.mask_channels(v[0], v[1])?;
            let p = t.mul(m, v[2])?;
            Ok(t.sum(p))
        }),
        ("cosine", vec![vec![5], vec![5]], |t, v| t.cosine_similarity(v[0], v[1], COSINE_EPS)),
        ("bce", vec![vec![9]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], 1e-7)
        }),
        ("dice", vec![vec![9]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.dice(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], 1.0)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, shapes, build) in cases {
        for instance in 0..20 {
            let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = finite_difference_check(build, &params, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} instance {instance}: {r:?}");
        }
    }
}

proptest! {
    #[test]
    fn cosine_bounded_and_scale_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 4),
        b in prop::collection::vec(-10.0f64..10.0, 4),
        sa in 1e-3f64..1e3,
        sb in 1e-3f64..1e3,
    ) {
        let c = cosine_value(&a, &b, COSINE_EPS);
        prop_assert!((-1.0..=1.0).contains(&c));
        let a2: Vec<f64> = a.iter().map(|v| v * sa).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * sb).collect();
        let c2 = cosine_value(&a2, &b2, COSINE_EPS);
        prop_assert!((c - c2).abs() < 1e-9);
    }

    #[test]
    fn cosine_of_positive_multiple_is_one(
        a in prop::collection::vec(0.1f64..10.0, 1..6),
        lambda in 1e-3f64..1e3,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v * lambda).collect();
        prop_assert!((cosine_value(&a, &b, COSINE_EPS) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_mean_is_linear(
        x in prop::collection::vec(-5.0f64..5.0, 12),
        c in -4.0f64..4.0,
    ) {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(vec![2, 2, 3], x).unwrap());
        let scaled = t.scale(xv, c);
        let m = t.spatial_mean(xv).unwrap();
        let ms = t.spatial_mean(scaled).unwrap();
        for (a, b) in t.value(m).data().iter().zip(t.value(ms).data()) {
            prop_assert!((c * a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn kink_margin_tracks_relu_inputs_and_bce_clamp() {
    let mut t = Tape::new();
    assert_eq!(t.kink_margin(), f64::INFINITY);
    let x = t.param(Tensor::from_vec(vec![0.5, -0.03, 2.0]));
    t.relu(x);
    assert!((t.kink_margin() - 0.03).abs() < 1e-15);
    let p = t.param(Tensor::from_vec(vec![0.5, 0.98]));
    t.bce(p, &[1.0, 0.0], 0.01).unwrap();
    assert!((t.kink_margin() - 0.01).abs() < 1e-12);
}
