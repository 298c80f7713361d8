//! Primitive forward passes against brute-force reference implementations.

use ecvit_tensor::{gelu_scalar, gradcheck, Conv2dSpec, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard normal CDF by composite Simpson quadrature of the density over
/// `[-12, x]`; shares nothing with the erf used by the engine.
fn normal_cdf_quadrature(x: f64) -> f64 {
    let lo = -12.0;
    let steps = 20_000;
    let h = (x - lo) / steps as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(lo) + pdf(x);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * pdf(lo + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn gelu_matches_quadrature_cdf() {
    let oracle = 1.0 * normal_cdf_quadrature(1.0);
    assert!((oracle - 0.841345).abs() < 5e-7, "oracle {oracle}");
    assert!((gelu_scalar(1.0f64) - oracle).abs() < 1e-9);
    for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
        assert!((gelu_scalar(x) - x * normal_cdf_quadrature(x)).abs() < 1e-9);
    }
}

#[test]
fn gelu_gradient_matches_central_difference() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.5));
    let y = tape.gelu(x);
    let loss = tape.sum_all(y);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap().item();
    let h = 1e-4;
    let numeric = (gelu_scalar(0.5 + h) - gelu_scalar(0.5 - h)) / (2.0 * h);
    assert!((analytic - numeric).abs() < 1e-8, "{analytic} vs {numeric}");
}

/// Direct six-loop grouped cross-correlation in f64.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (co, kh, kw): (usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let cg = c / groups;
    let cog = co / groups;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            let g = o / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let cin = g * cg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + cin) * h + iy as usize) * w + ix as usize]
                                    * k[((o * cg + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn grouped_conv_matches_per_group_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let k = Tensor::<f64>::uniform(vec![4, 1, 3, 3], -1.0, 1.0, &mut rng);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.cast());
    let kv = tape.constant(k.cast());
    let y = tape
        .conv2d(xv, kv, None, Conv2dSpec::new((1, 1), (0, 0), 2))
        .unwrap();
    let oracle = naive_conv(x.data(), (1, 2, 5, 5), k.data(), (4, 3, 3), (1, 1), (0, 0), 2);
    for (a, b) in tape.value(y).data().iter().zip(&oracle) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn dense_conv_matches_six_loop_oracle(
        b in 1usize..=2, c in 1usize..=4, h in 3usize..=9, w in 3usize..=9,
        co in 1usize..=4, kh in 1usize..=3, kw in 1usize..=3,
        sh in 1usize..=2, sw in 1usize..=2, ph in 0usize..=1, pw in 0usize..=1,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::uniform(vec![b, c, h, w], -1.0, 1.0, &mut rng);
        let k = Tensor::<f32>::uniform(vec![co, c, kh, kw], -1.0, 1.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        let y = tape.conv2d(xv, kv, None, Conv2dSpec::new((sh, sw), (ph, pw), 1)).unwrap();
        let oracle = naive_conv(
            &x.to_f64_vec(), (b, c, h, w), &k.to_f64_vec(), (co, kh, kw), (sh, sw), (ph, pw), 1,
        );
        prop_assert_eq!(tape.value(y).len(), oracle.len());
        for (a, o) in tape.value(y).data().iter().zip(&oracle) {
            prop_assert!((*a as f64 - o).abs() <= 1e-6 * o.abs().max(1.0), "{} vs {}", a, o);
        }
    }
}

#[test]
fn maxpool_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::uniform(vec![1, 1, 6, 6], -1.0, 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.maxpool2d(xv, (3, 3), (2, 2), (1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    for oy in 0..3 {
        for ox in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for iy in (oy * 2) as isize - 1..(oy * 2) as isize + 2 {
                for ix in (ox * 2) as isize - 1..(ox * 2) as isize + 2 {
                    if (0..6).contains(&iy) && (0..6).contains(&ix) {
                        best = best.max(x.data()[iy as usize * 6 + ix as usize]);
                    }
                }
            }
            assert_eq!(tape.value(y).data()[oy * 3 + ox], best);
        }
    }
}

#[test]
fn sequence_pool_matches_column_max_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::uniform(vec![1, 8, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.maxpool1d_seq(xv, 4, 4).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 4]);
    for g in 0..2 {
        for f in 0..4 {
            let best = (0..4)
                .map(|t| x.data()[(g * 4 + t) * 4 + f])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(tape.value(y).data()[g * 4 + f], best);
        }
    }
}

#[test]
fn softmax_matches_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f32>::uniform(vec![3, 17], -8.0, 8.0, &mut rng);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let y = tape.softmax(xv, 1).unwrap();
    for (row, yrow) in x.data().chunks(17).zip(tape.value(y).data().chunks(17)) {
        let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        let total: f32 = yrow.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for (&v, &p) in row.iter().zip(yrow) {
            assert!(p >= 0.0);
            assert!(((v as f64).exp() / denom - p as f64).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..12, axis in 0usize..2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::uniform(vec![rows, cols], -30.0, 30.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, axis).unwrap();
        let v = tape.value(y).data();
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        if axis == 1 {
            for r in v.chunks(cols) {
                prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..cols {
                let s: f32 = (0..rows).map(|r| v[r * cols + c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn finite_difference_self_test() {
    let x = Tensor::from_f64([3], &[1.5, -0.25, 0.75]).unwrap();
    let g = gradcheck::finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-7);
    }
}
