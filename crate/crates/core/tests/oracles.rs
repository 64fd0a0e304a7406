//! Closed-form and composition oracles evaluated independently of the
//! library kernels, partly in double-double arithmetic.

use dsa_core::attention::{
    self, AttentionTensors, CbamParams, SelfAttentionParams, StrideKernel,
};
use dsa_core::loss::focal_term;
use dsa_core::ops;
use dsa_core::{ConvWeights, FeatureMap, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

fn tf(v: f64) -> TwoFloat {
    TwoFloat::from(v)
}

/// Taylor series for `e^|x|` (all terms positive), inverted for negative `x`.
fn dd_exp(x: TwoFloat) -> TwoFloat {
    let a = if x.hi() < 0.0 { -x } else { x };
    let mut term = tf(1.0);
    let mut sum = tf(1.0);
    for n in 1..200 {
        term = term * a / tf(n as f64);
        sum += term;
        if term.hi() < 1e-34 * sum.hi() {
            break;
        }
    }
    if x.hi() < 0.0 {
        tf(1.0) / sum
    } else {
        sum
    }
}

/// Direct sum over kernel taps; out-of-range taps contribute nothing.
fn naive_conv(x: &FeatureMap, w: &ConvWeights, stride: usize, pad: usize) -> FeatureMap {
    let (c, h, wd) = x.dims();
    let k = w.kernel_h();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    FeatureMap::from_fn(w.out_channels(), oh, ow, |o, y, xx| {
        let mut s = w.bias()[o];
        for i in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += w.weight(o, i, ky, kx) * x.get(i, iy as usize, ix as usize);
                    }
                }
            }
        }
        s
    })
}

/// `softmax(q·kᵀ/√d)·v` in double-double, returning (output, weights).
fn dd_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> (Vec<Vec<TwoFloat>>, Vec<Vec<TwoFloat>>) {
    let n = q.len();
    let d = q[0].len();
    let scale = tf(d as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for qi in q {
        let scores: Vec<TwoFloat> = k
            .iter()
            .map(|kj| {
                let mut s = tf(0.0);
                for t in 0..d {
                    s += tf(qi[t]) * tf(kj[t]);
                }
                s / scale
            })
            .collect();
        let exps: Vec<TwoFloat> = scores.iter().map(|&s| dd_exp(s)).collect();
        let mut z = tf(0.0);
        for &e in &exps {
            z += e;
        }
        let w: Vec<TwoFloat> = exps.iter().map(|&e| e / z).collect();
        let mut row = vec![tf(0.0); d];
        for j in 0..n {
            for t in 0..d {
                row[t] += w[j] * tf(v[j][t]);
            }
        }
        out.push(row);
        weights.push(w);
    }
    (out, weights)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Plain f64 composition: tokens → attention → back to C×H×W.
fn composed_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> FeatureMap {
    let to_rows = |f: &FeatureMap| -> Vec<Vec<f64>> {
        (0..f.positions())
            .map(|p| (0..f.channels()).map(|c| f.data()[c * f.positions() + p]).collect())
            .collect()
    };
    let (out, _) = dd_attention(&to_rows(q), &to_rows(k), &to_rows(v));
    let w = q.width();
    FeatureMap::from_fn(v.channels(), q.height(), w, |c, y, x| out[y * w + x][c].hi())
}

#[test]
fn softmax_of_one_two_three() {
    let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let s = ops::softmax_rows(&m);
    let e: Vec<TwoFloat> = [1.0, 2.0, 3.0].iter().map(|&v| dd_exp(tf(v))).collect();
    let z = e[0] + e[1] + e[2];
    for i in 0..3 {
        let want = (e[i] / z).hi();
        assert!((s.get(0, i) - want).abs() <= 2e-16 * want, "{} vs {want}", s.get(0, i));
    }
}

#[test]
fn sigmoid_at_two() {
    let f = FeatureMap::filled(1, 1, 1, 2.0);
    let got = ops::sigmoid_map(&f).data()[0];
    let want = (tf(1.0) / (tf(1.0) + dd_exp(tf(-2.0)))).hi();
    assert_eq!(want, 0.880_797_077_977_882_444_059_729_141_302_4);
    assert!((got - want).abs() <= 2e-16, "{got} vs {want}");
}

#[test]
fn focal_at_half_matches_extended_precision() {
    // 0.25 · 0.5² · ln 2
    let want = (tf(0.0625) * twofloat::consts::LN_2).hi();
    assert_eq!(want, 0.043_321_698_784_996_581_838_577_007_591_136);
    let got = focal_term(0.5, true, 0.25, 2.0);
    assert!((got - want).abs() <= 2e-16 * want, "{got} vs {want}");
}

#[test]
fn cbam_single_position_is_sigmoid_of_center_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let mut w7 = ConvWeights::uniform_fan_in(1, 2, 7, &mut rng);
        w7.bias_mut()[0] = 0.0;
        let p = CbamParams::new(w7.clone(), 0.0).unwrap();
        let v = rng.random_range(-3.0..3.0);
        let f = FeatureMap::filled(1, 1, 1, v);
        let (mask, out) = attention::cbam_spatial_attention(&f, &p).unwrap();
        let s = tf(w7.weight(0, 0, 3, 3)) + tf(w7.weight(0, 1, 3, 3));
        let want = (tf(1.0) / (tf(1.0) + dd_exp(-(s * tf(v))))).hi();
        assert!((mask.data()[0] - want).abs() <= 4e-16, "{} vs {want}", mask.data()[0]);
        assert!((out.data()[0] - v * want).abs() <= 4e-16 * v.abs().max(1.0));
    }
}

#[test]
fn cbam_matches_step_by_step_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let f = FeatureMap::random_uniform(3, 5, 5, -2.0, 2.0, &mut rng);
    let mut w7 = ConvWeights::uniform_fan_in(1, 2, 7, &mut rng);
    w7.bias_mut()[0] = 0.3;
    let p = CbamParams::new(w7.clone(), 0.0).unwrap();
    let (mask, out) = attention::cbam_spatial_attention(&f, &p).unwrap();

    let pooled = FeatureMap::from_fn(2, 5, 5, |c, y, x| {
        let vals: Vec<f64> = (0..3).map(|ch| f.get(ch, y, x)).collect();
        if c == 0 {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.iter().sum::<f64>() / 3.0
        }
    });
    let logits = naive_conv(&pooled, &w7, 1, 3);
    for y in 0..5 {
        for x in 0..5 {
            let m = 1.0 / (1.0 + (-logits.get(0, y, x)).exp());
            assert!((mask.get(0, y, x) - m).abs() < 1e-14);
            for c in 0..3 {
                assert!((out.get(c, y, x) - f.get(c, y, x) * m).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn small_attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let q = Matrix::random_uniform(3, 2, -1.0, 1.0, &mut rng);
    let k = Matrix::random_uniform(3, 2, -1.0, 1.0, &mut rng);
    let v = Matrix::random_uniform(3, 2, -1.0, 1.0, &mut rng);
    let t = AttentionTensors::new(q.clone(), k.clone(), v.clone()).unwrap();
    let got = attention::scaled_dot_attention(&t).unwrap();
    let (want, _) = dd_attention(&rows(&q), &rows(&k), &rows(&v));
    for i in 0..3 {
        for j in 0..2 {
            let w = want[i][j].hi();
            assert!((got.get(i, j) - w).abs() <= 1e-14 * w.abs().max(1e-3));
        }
    }
}

/// Normwise relative error against the double-double reference.
#[test]
fn fifty_random_attention_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut worst = 0.0f64;
    let mut worst_row_sum = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=9);
        let d = rng.random_range(1..=4);
        let q = Matrix::random_uniform(n, d, -2.0, 2.0, &mut rng);
        let k = Matrix::random_uniform(n, d, -2.0, 2.0, &mut rng);
        let v = Matrix::random_uniform(n, d, -2.0, 2.0, &mut rng);
        let t = AttentionTensors::new(q.clone(), k.clone(), v.clone()).unwrap();
        let (got, weights) = attention::scaled_dot_attention_with_weights(&t).unwrap();
        let (want, want_w) = dd_attention(&rows(&q), &rows(&k), &rows(&v));
        let scale = want.iter().flatten().map(|x| x.hi().abs()).fold(0.0, f64::max).max(1e-300);
        for i in 0..n {
            for j in 0..d {
                worst = worst.max((got.get(i, j) - want[i][j].hi()).abs() / scale);
            }
            for j in 0..n {
                let e = (weights.get(i, j) - want_w[i][j].hi()).abs();
                assert!(e < 1e-14, "{e:e} {} {}", weights.get(i, j), want_w[i][j].hi());
            }
            let s: f64 = weights.row(i).iter().sum();
            worst_row_sum = worst_row_sum.max((s - 1.0).abs());
        }
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
    assert!(worst_row_sum <= 1e-12, "row sum off by {worst_row_sum:e}");
}

#[test]
fn self_attention_branch_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let f = FeatureMap::random_uniform(2, 3, 3, -1.0, 1.0, &mut rng);
    let mut p = SelfAttentionParams::init(2, None, &mut rng);
    for w in [&mut p.wq, &mut p.wk, &mut p.wv] {
        for b in w.bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let (att, _) = attention::self_attention_branch(&f, &p, false).unwrap();
    let want = composed_attention(
        &naive_conv(&f, &p.wq, 1, 0),
        &naive_conv(&f, &p.wk, 1, 0),
        &naive_conv(&f, &p.wv, 1, 0),
    );
    assert!(att.max_abs_diff(&want) < 1e-14, "{}", att.max_abs_diff(&want));
}

#[test]
fn strided_branch_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for (kernel, h, w) in [
        (StrideKernel::K1, 4, 4),
        (StrideKernel::K3, 4, 4),
        (StrideKernel::K1, 5, 3),
        (StrideKernel::K3, 3, 5),
    ] {
        let f = FeatureMap::random_uniform(2, h, w, -1.0, 1.0, &mut rng);
        let p = SelfAttentionParams::init(2, Some(kernel), &mut rng);
        let pad = kernel.size() / 2;
        let got = attention::strided_self_attention_branch(&f, &p).unwrap();
        let small = composed_attention(
            &naive_conv(&f, &p.wq, 2, pad),
            &naive_conv(&f, &p.wk, 2, pad),
            &naive_conv(&f, &p.wv, 2, pad),
        );
        assert_eq!(small.dims(), (2, h.div_ceil(2), w.div_ceil(2)));
        let want = FeatureMap::from_fn(2, h, w, |c, y, x| small.get(c, y / 2, x / 2));
        assert_eq!(got.dims(), f.dims());
        assert!(got.max_abs_diff(&want) < 1e-14);
    }
}

#[test]
fn upsample_matches_index_formula() {
    let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let up = ops::nearest_upsample(&f, 2).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(up.get(0, y, x), f.get(0, y / 2, x / 2));
        }
    }
}

#[test]
fn conv_matches_direct_sum_for_every_supported_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for (k, s, p) in [(1, 1, 0), (1, 2, 0), (3, 2, 1), (7, 1, 3)] {
        let x = FeatureMap::random_uniform(3, 5, 6, -1.0, 1.0, &mut rng);
        let mut w = ConvWeights::uniform_fan_in(2, 3, k, &mut rng);
        w.bias_mut().copy_from_slice(&[0.1, -0.2]);
        let got = ops::conv2d(&x, &w, s, p).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, s, p)) < 1e-14);
    }
}
