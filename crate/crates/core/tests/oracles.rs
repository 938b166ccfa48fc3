//! Reference-implementation oracles. Every oracle here is a deliberately
//! naive loop written from the operator definitions, independent of the
//! tape kernels it checks.

use imnet_core::inconsistency::{lccd, lccd_whole_plane};
use imnet_core::{GradTape, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_tensor<R: Rng>(rng: &mut R, shape: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

// ---------------------------------------------------------------- conv2d

fn naive_conv2d(
    input: &Tensor4<f64>,
    kernel: &Tensor4<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor4<f64> {
    let s = input.shape();
    let k = kernel.shape();
    // Kernel layout: (cout, kh, kw, cin).
    let (cout, kh, kw, cin) = (k.batch, k.height, k.width, k.channels);
    let oh = (s.height + 2 * pad - kh) / stride + 1;
    let ow = (s.width + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros(Shape4::new(s.batch, oh, ow, cout));
    for b in 0..s.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0
                                || ix < 0
                                || iy >= s.height as isize
                                || ix >= s.width as isize
                            {
                                continue;
                            }
                            for ci in 0..cin {
                                let iv =
                                    input.data()[s.index(b, iy as usize, ix as usize, ci)];
                                let kv = kernel.data()
                                    [((co * kh + ky) * kw + kx) * cin + ci];
                                acc += iv * kv;
                            }
                        }
                    }
                    let idx = out.shape().index(b, oy, ox, co);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for _ in 0..20 {
        let (b, h, w) = (
            rng.gen_range(1..3usize),
            rng.gen_range(3..9usize),
            rng.gen_range(3..9usize),
        );
        let (cin, cout) = (rng.gen_range(1..5usize), rng.gen_range(1..5usize));
        let (kside, pad) = if rng.gen_bool(0.5) { (3, 1) } else { (1, 0) };
        let input = random_tensor(&mut rng, Shape4::new(b, h, w, cin), -1.0, 1.0);
        let kernel =
            random_tensor(&mut rng, Shape4::new(cout, kside, kside, cin), -1.0, 1.0);
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let mut tape = GradTape::new();
        let i = tape.leaf(input.clone());
        let k = tape.leaf(kernel.clone());
        let bt = tape
            .leaf(Tensor4::from_vec(Shape4::new(1, 1, 1, cout), bias.clone()).unwrap());
        let got = tape.conv2d(i, k, Some(bt), 1, pad).unwrap();

        let want = naive_conv2d(&input, &kernel, &bias, 1, pad);
        assert_eq!(tape.value(got).shape(), want.shape());
        for (a, b) in tape.value(got).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn maxpool_matches_naive_loop() {
    let mut rng = ChaCha20Rng::seed_from_u64(102);
    let input = random_tensor(&mut rng, Shape4::new(2, 6, 4, 3), -1.0, 1.0);
    let mut tape = GradTape::new();
    let i = tape.leaf(input.clone());
    let got = tape.max_pool2(i).unwrap();
    let s = input.shape();
    for b in 0..2 {
        for y in 0..3 {
            for x in 0..2 {
                for c in 0..3 {
                    let want = input.data()[s.index(b, 2 * y, 2 * x, c)]
                        .max(input.data()[s.index(b, 2 * y, 2 * x + 1, c)])
                        .max(input.data()[s.index(b, 2 * y + 1, 2 * x, c)])
                        .max(input.data()[s.index(b, 2 * y + 1, 2 * x + 1, c)]);
                    let g = tape.value(got).data()[tape.value(got).shape().index(b, y, x, c)];
                    assert_eq!(g, want);
                }
            }
        }
    }
}

// ------------------------------------------------------------------ LCCD

/// Naive LCCD: per-cell, per-channel products plus the whole-vector inner
/// product as the last plane.
fn naive_lccd(fx: &Tensor4<f64>, fy: &Tensor4<f64>) -> Vec<f64> {
    let s = fx.shape();
    let c = s.channels;
    let mut out = Vec::with_capacity(s.cells() * (c + 1));
    for cell in 0..s.cells() {
        let x = &fx.data()[cell * c..(cell + 1) * c];
        let y = &fy.data()[cell * c..(cell + 1) * c];
        for ch in 0..c {
            out.push(x[ch] * y[ch]);
        }
        out.push((0..c).map(|ch| x[ch] * y[ch]).sum());
    }
    out
}

#[test]
fn lccd_matches_naive_oracle_in_64_bit() {
    let mut rng = ChaCha20Rng::seed_from_u64(103);
    for _ in 0..100 {
        let shape = Shape4::new(
            1,
            rng.gen_range(2..9usize),
            rng.gen_range(2..9usize),
            rng.gen_range(1..17usize),
        );
        let fx = random_tensor(&mut rng, shape, -2.0, 2.0);
        let fy = random_tensor(&mut rng, shape, -2.0, 2.0);
        let want = naive_lccd(&fx, &fy);

        let mut tape = GradTape::new();
        let a = tape.leaf(fx.clone());
        let b = tape.leaf(fy.clone());
        let got = lccd(&mut tape, a, b).unwrap();
        let got = tape.value(got);
        assert_eq!(
            got.shape(),
            Shape4::new(1, shape.height, shape.width, shape.channels + 1)
        );
        // The kernel accumulates channel sums in the same order as the
        // oracle, so 64-bit agreement is exact.
        assert_eq!(got.data(), &want[..]);
    }
}

#[test]
fn lccd_matches_naive_oracle_in_32_bit() {
    let mut rng = ChaCha20Rng::seed_from_u64(104);
    for _ in 0..100 {
        let shape = Shape4::new(
            1,
            rng.gen_range(2..9usize),
            rng.gen_range(2..9usize),
            rng.gen_range(1..17usize),
        );
        let fx = random_tensor(&mut rng, shape, -1.0, 1.0);
        let fy = random_tensor(&mut rng, shape, -1.0, 1.0);
        let want = naive_lccd(&fx, &fy);

        let fx32 = fx.cast::<f32>();
        let fy32 = fy.cast::<f32>();
        let mut tape = GradTape::<f32>::new();
        let a = tape.leaf(fx32);
        let b = tape.leaf(fy32);
        let got = lccd(&mut tape, a, b).unwrap();
        for (g, w) in tape.value(got).data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-6, "{g} vs {w}");
        }
    }
}

#[test]
fn lccd_whole_plane_equals_channel_sum() {
    let mut rng = ChaCha20Rng::seed_from_u64(105);
    let shape = Shape4::new(1, 4, 4, 7);
    let fx = random_tensor(&mut rng, shape, -2.0, 2.0);
    let fy = random_tensor(&mut rng, shape, -2.0, 2.0);
    let mut tape = GradTape::new();
    let a = tape.leaf(fx);
    let b = tape.leaf(fy);
    let full = lccd(&mut tape, a, b).unwrap();
    let whole = lccd_whole_plane(&mut tape, a, b).unwrap();
    let fs = tape.value(full).shape();
    for cell in 0..fs.cells() {
        let row = &tape.value(full).data()[cell * fs.channels..(cell + 1) * fs.channels];
        let sum: f64 = row[..fs.channels - 1].iter().sum();
        assert_eq!(row[fs.channels - 1], sum);
        assert_eq!(tape.value(whole).data()[cell], row[fs.channels - 1]);
    }
}

// ------------------------------------------------------------------- RGM

#[test]
fn rgm_matches_reference_formula() {
    // Reference computed through the algebraically equal but differently
    // evaluated x * sigmoid(-x) = x / (1 + e^x).
    let mut rng = ChaCha20Rng::seed_from_u64(106);
    let data: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let n = data.len();
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor4::from_vec(Shape4::new(1, 1, n, 1), data.clone()).unwrap());
    let out = tape.rgm(x).unwrap();
    for (&got, &v) in tape.value(out).data().iter().zip(&data) {
        let want = v / (1.0 + v.exp());
        assert!((got - want).abs() <= 1e-7, "rgm({v}) = {got}, want {want}");
    }
}

#[test]
fn rgm_fixed_points() {
    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(Tensor4::from_vec(Shape4::new(1, 1, 2, 1), vec![0.0, 20.0]).unwrap());
    let out = tape.rgm(x).unwrap();
    assert_eq!(tape.value(out).data()[0], 0.0);
    assert!(tape.value(out).data()[1].abs() < 1e-7);
}

// -------------------------------------------------- self-correlation

/// Naive cosine matrix: dot / (sqrt(|u|^2 |v|^2) + 1e-8), diagonal -1.
fn naive_selfcorr(features: &Tensor4<f64>) -> Vec<f64> {
    let s = features.shape();
    let (l, c) = (s.height * s.width, s.channels);
    let u = features.data();
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                out[i * l + j] = -1.0;
                continue;
            }
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for k in 0..c {
                dot += u[i * c + k] * u[j * c + k];
                ni += u[i * c + k] * u[i * c + k];
                nj += u[j * c + k] * u[j * c + k];
            }
            out[i * l + j] = dot / ((ni * nj).sqrt() + 1e-8);
        }
    }
    out
}

#[test]
fn self_correlation_matches_naive_double_loop() {
    let mut rng = ChaCha20Rng::seed_from_u64(107);
    for _ in 0..10 {
        let shape = Shape4::new(
            1,
            rng.gen_range(2..6usize),
            rng.gen_range(2..6usize),
            rng.gen_range(1..9usize),
        );
        let features = random_tensor(&mut rng, shape, -1.5, 1.5);
        let want = naive_selfcorr(&features);
        let mut tape = GradTape::new();
        let f = tape.leaf(features);
        let got = tape.self_correlation(f).unwrap();
        for (g, w) in tape.value(got).data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
        }
    }
}

// ------------------------------------------------- percentile pooling

/// Sort-then-index oracle: row sorted descending (stable over original
/// column order), channel k samples rank round(k*(L-2)/(K-1)), or rank 0
/// when K = 1.
fn naive_percentile_pool(corr: &[f64], l: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l * k);
    for i in 0..l {
        let row = &corr[i * l..(i + 1) * l];
        let mut sorted: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for kk in 0..k {
            let rank = if k == 1 {
                0
            } else {
                ((kk * (l - 2)) as f64 / (k - 1) as f64).round() as usize
            };
            out.push(sorted[rank].1);
        }
    }
    out
}

#[test]
fn percentile_pool_matches_sort_oracle_exactly() {
    let mut rng = ChaCha20Rng::seed_from_u64(108);
    for _ in 0..20 {
        let side = rng.gen_range(2..5usize);
        let l = side * side;
        let k = rng.gen_range(1..l);
        let features =
            random_tensor(&mut rng, Shape4::new(1, side, side, 4), -1.0, 1.0);
        let mut tape = GradTape::new();
        let f = tape.leaf(features);
        let corr = tape.self_correlation(f).unwrap();
        let corr_values = tape.value(corr).data().to_vec();
        let pooled = tape.percentile_pool(corr, side, side, k).unwrap();
        let want = naive_percentile_pool(&corr_values, l, k);
        assert_eq!(tape.value(pooled).data(), &want[..]);
    }
}

#[test]
fn planted_copy_tops_at_exactly_one() {
    // Distinct random cell vectors, then cells 0..4 duplicated into cells
    // 8..12 (disjoint rows of a 4x4 grid). The top pooled channel must be
    // exactly 1.0 on every duplicated cell and strictly below elsewhere.
    let mut rng = ChaCha20Rng::seed_from_u64(109);
    let (side, c) = (4usize, 6usize);
    let l = side * side;
    let mut data: Vec<f32> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for cell in 0..4 {
        for ch in 0..c {
            data[(8 + cell) * c + ch] = data[cell * c + ch];
        }
    }
    let features = Tensor4::from_vec(Shape4::new(1, side, side, c), data).unwrap();
    let mut tape = GradTape::<f32>::new();
    let f = tape.leaf(features);
    let corr = tape.self_correlation(f).unwrap();
    let pooled = tape.percentile_pool(corr, side, side, 3).unwrap();
    let v = tape.value(pooled);
    let duplicated: Vec<usize> = (0..4).chain(8..12).collect();
    for cell in 0..l {
        let top = v.data()[cell * 3];
        if duplicated.contains(&cell) {
            assert_eq!(top, 1.0, "cell {cell} should top at exactly 1.0");
        } else {
            assert!(top < 1.0, "cell {cell} tops at {top}");
        }
    }
}
