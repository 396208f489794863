use super::*;
use crate::testutil::{assert_close, assert_slices_close};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct-summation convolution, independent of the im2col path.
fn conv2d_oracle(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (b, c_in, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (c_out, _, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, c_out, oh, ow]);
    for bi in 0..b {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|bv| bv[co]).unwrap_or(0.0);
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at4(bi, ci, iy as usize, ix as usize)
                                    * weight.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    let idx = out.idx4(bi, co, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel_returns_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0));
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = conv2d(&mut tape, x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let input = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let weight = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let want = conv2d_oracle(
            &input,
            &weight,
            Some(&bias),
            stride,
            pad,
        );
        let mut tape = Tape::new();
        let xv = tape.constant(input.clone());
        let wv = tape.constant(weight.clone());
        let bv = tape.constant(Tensor::new(&[3], bias.clone()).unwrap());
        let y = conv2d(&mut tape, xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.shape(y), want.shape());
        assert_slices_close(tape.value(y).data(), want.data(), 1e-12, "conv2d");
    }
}

#[test]
fn conv2d_stride2_pad3_k7_gives_half_resolution() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 16, 16], 0.5));
    let w = tape.constant(Tensor::full(&[4, 1, 7, 7], 0.01));
    let y = conv2d(&mut tape, x, w, None, 2, 3).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 8, 8]);
}

#[test]
fn conv2d_rejects_channel_mismatch_with_dimension_report() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
    let err = conv2d(&mut tape, x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains('4'), "{msg}");
}

#[test]
fn group_norm_constant_input_is_zeroed() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 4, 3, 3], 2.7));
    let gamma = tape.constant(Tensor::full(&[4], 1.0));
    let beta = tape.constant(Tensor::full(&[4], 0.0));
    let y = group_norm(&mut tape, x, 2, gamma, beta, 1e-5).unwrap();
    for &v in tape.value(y).data() {
        assert!(v.abs() < 1e-9, "{v}");
    }
}

#[test]
fn group_norm_single_group_matches_direct_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 4]);
    let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let eps = 1e-5;

    // direct layer-wise oracle
    let n = x.numel() as f64;
    let mean: f64 = x.data().iter().sum::<f64>() / n;
    let var: f64 = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let istd = 1.0 / (var + eps).sqrt();
    let want: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / 16) % 3;
            gamma[ch] * ((v - mean) * istd) + beta[ch]
        })
        .collect();

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let gv = tape.constant(Tensor::new(&[3], gamma).unwrap());
    let bv = tape.constant(Tensor::new(&[3], beta).unwrap());
    let y = group_norm(&mut tape, xv, 1, gv, bv, eps).unwrap();
    assert_slices_close(tape.value(y).data(), &want, 1e-12, "group_norm");
}

#[test]
fn group_norm_affine_collapse_and_bad_groups() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64));
    let gamma = tape.constant(Tensor::full(&[4], 0.0));
    let beta = tape.constant(Tensor::full(&[4], 5.0));
    let y = group_norm(&mut tape, x, 4, gamma, beta, 1e-5).unwrap();
    for &v in tape.value(y).data() {
        assert_close(v, 5.0, 1e-12, "gamma=0 collapse");
    }
    let g2 = tape.constant(Tensor::full(&[4], 1.0));
    let b2 = tape.constant(Tensor::full(&[4], 0.0));
    assert!(group_norm(&mut tape, x, 3, g2, b2, 1e-5).is_err());
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = relu(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_uniform_row_and_row_sums() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.3));
    let y = softmax_lastdim(&mut tape, x).unwrap();
    for &v in tape.value(y).data() {
        assert_close(v, 0.2, 1e-12, "uniform softmax");
    }
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x2 = tape.constant(rand_tensor(&mut rng, &[7, 9]));
    let y2 = softmax_lastdim(&mut tape, x2).unwrap();
    let d = tape.value(y2).data();
    for r in 0..7 {
        let s: f64 = d[r * 9..(r + 1) * 9].iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
        assert!(d[r * 9..(r + 1) * 9].iter().all(|&v| v > 0.0));
    }
}

#[test]
fn softmax_gradient_matches_fd_tightly() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let wgt = rand_tensor(&mut rng, &[3, 4]);
    let report = check_op_gradient(
        |tape, vars| {
            let y = softmax_lastdim(tape, vars[0])?;
            let p = mul(tape, y, vars[1])?;
            sum_all(tape, p)
        },
        &[x, wgt],
        GradCheckOpts {
            h: 1e-6,
            tol: 1e-6,
            ..GradCheckOpts::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn avg_pool_identity_mean_and_oracle() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
    let y = avg_pool2d(&mut tape, x, 1).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let q = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let m = avg_pool2d(&mut tape, q, 2).unwrap();
    assert_eq!(tape.value(m).data(), &[2.5]);

    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let big = rand_tensor(&mut rng, &[1, 1, 16, 16]);
    let xv = tape.constant(big.clone());
    let p = avg_pool2d(&mut tape, xv, 8).unwrap();
    assert_eq!(tape.shape(p), &[1, 1, 2, 2]);
    // block-mean oracle
    for by in 0..2 {
        for bx in 0..2 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += big.at4(0, 0, by * 8 + y, bx * 8 + x);
                }
            }
            assert_close(
                tape.value(p).at4(0, 0, by, bx),
                acc / 64.0,
                1e-12,
                "block mean",
            );
        }
    }

    let odd = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(avg_pool2d(&mut tape, odd, 2).is_err());
}

fn identity_coords(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[1, h, w, 2], |i| {
        let pix = i / 2;
        if i % 2 == 0 {
            (pix % w) as f64
        } else {
            (pix / w) as f64
        }
    })
}

#[test]
fn bilinear_identity_grid_returns_input_exactly() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let img = rand_tensor(&mut rng, &[1, 2, 5, 6]);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let c = tape.constant(identity_coords(5, 6));
    let y = bilinear_sample(&mut tape, x, c).unwrap();
    assert_eq!(tape.value(y).data(), img.data(), "identity grid must be exact");
}

#[test]
fn bilinear_integer_shift_moves_interior_columns() {
    let img = Tensor::from_fn(&[1, 1, 4, 5], |i| (i % 5) as f64 + 10.0 * (i / 5) as f64);
    let mut coords = identity_coords(4, 5);
    for i in (0..coords.numel()).step_by(2) {
        coords.data_mut()[i] += 1.0; // sample one column to the right
    }
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let c = tape.constant(coords);
    let y = bilinear_sample(&mut tape, x, c).unwrap();
    for row in 0..4 {
        for col in 0..4 {
            assert_close(
                tape.value(y).at4(0, 0, row, col),
                img.at4(0, 0, row, col + 1),
                1e-12,
                "shifted interior",
            );
        }
    }
}

#[test]
fn bilinear_coord_gradient_matches_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let img = rand_tensor(&mut rng, &[1, 1, 6, 6]);
    let coords = Tensor::from_fn(&[1, 3, 3, 2], |_| rng.gen_range(0.0..4.0) + 0.37);
    let report = check_op_gradient(
        |tape, vars| {
            let y = bilinear_sample(tape, vars[0], vars[1])?;
            let sq = mul(tape, y, y)?;
            sum_all(tape, sq)
        },
        &[img, coords],
        GradCheckOpts {
            h: 1e-6,
            tol: 1e-5,
            ..GradCheckOpts::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn bilinear_oracle_on_random_coords() {
    // independent nested-loop bilinear evaluation
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let img = rand_tensor(&mut rng, &[1, 1, 7, 7]);
    let coords = Tensor::from_fn(&[1, 4, 4, 2], |_| rng.gen_range(-1.0..7.5));
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let c = tape.constant(coords.clone());
    let y = bilinear_sample(&mut tape, x, c).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            let cx = coords.data()[(oy * 4 + ox) * 2].clamp(0.0, 6.0);
            let cy = coords.data()[(oy * 4 + ox) * 2 + 1].clamp(0.0, 6.0);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(6);
            let y1 = (y0 + 1).min(6);
            let fx = cx - x0 as f64;
            let fy = cy - y0 as f64;
            let want = (1.0 - fy) * (1.0 - fx) * img.at4(0, 0, y0, x0)
                + (1.0 - fy) * fx * img.at4(0, 0, y0, x1)
                + fy * (1.0 - fx) * img.at4(0, 0, y1, x0)
                + fy * fx * img.at4(0, 0, y1, x1);
            assert_close(tape.value(y).at4(0, 0, oy, ox), want, 1e-10, "bilinear");
        }
    }
}

#[test]
fn forward_diff_shapes_and_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 4], |i| (i * i) as f64));
    let dy = forward_diff(&mut tape, x, Axis::Y).unwrap();
    let dx = forward_diff(&mut tape, x, Axis::X).unwrap();
    assert_eq!(tape.shape(dy), &[1, 1, 2, 4]);
    assert_eq!(tape.shape(dx), &[1, 1, 3, 3]);
    assert_close(tape.value(dx).data()[0], 1.0, 1e-12, "0->1");
    assert_close(tape.value(dy).data()[0], 16.0, 1e-12, "0->16");
}

#[test]
fn lookup_zero_flow_radius0_reads_center_taps() {
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    let (h, w) = (8usize, 8usize);
    for &(scale, hl, wl) in &[(1usize, 8usize, 8usize), (2, 4, 4), (4, 2, 2)] {
        let vol = rand_tensor(&mut rng, &[h, w, hl, wl]);
        let mut tape = Tape::new();
        let v = tape.constant(vol.clone());
        let f = tape.constant(Tensor::zeros(&[1, 2, h, w]));
        let y = lookup_corr(&mut tape, v, f, 0, scale).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, h, w]);
        // exact where p / scale is an integer grid point
        for py in (0..h).step_by(scale) {
            for px in (0..w).step_by(scale) {
                let want = vol.at4(py, px, py / scale, px / scale);
                assert_close(
                    tape.value(y).at4(0, 0, py, px),
                    want,
                    1e-12,
                    "center tap",
                );
            }
        }
    }
}

#[test]
fn lookup_constant_integer_flow_shifts_centers() {
    let mut rng = ChaCha12Rng::seed_from_u64(61);
    let (h, w) = (8usize, 8usize);
    let d = 2.0; // integer x-shift
    for &(scale, hl, wl) in &[(1usize, 8usize, 8usize), (2, 4, 4)] {
        let vol = rand_tensor(&mut rng, &[h, w, hl, wl]);
        let mut tape = Tape::new();
        let v = tape.constant(vol.clone());
        let flow = Tensor::from_fn(&[1, 2, h, w], |i| if i < h * w { d } else { 0.0 });
        let f = tape.constant(flow);
        let y = lookup_corr(&mut tape, v, f, 0, scale).unwrap();
        // direct-index oracle at pixels where (p+d)/scale is integral & in range
        for py in (0..h).step_by(scale) {
            for px in (0..w).step_by(scale) {
                let sx = (px as f64 + d) / scale as f64;
                if sx.fract() != 0.0 || sx as usize >= wl {
                    continue;
                }
                assert_close(
                    tape.value(y).at4(0, 0, py, px),
                    vol.at4(py, px, py / scale, sx as usize),
                    1e-12,
                    "shifted tap",
                );
            }
        }
    }
}

#[test]
fn lookup_channel_count_with_radius4_and_4_levels_is_324() {
    let mut tape = Tape::<f64>::new();
    let (h, w) = (4usize, 4usize);
    let mut chans = 0;
    for &(scale, hl, wl) in &[(1usize, 4usize, 4usize), (2, 2, 2), (4, 1, 1), (8, 1, 1)] {
        let v = tape.constant(Tensor::zeros(&[h, w, hl, wl]));
        let f = tape.constant(Tensor::zeros(&[1, 2, h, w]));
        let y = lookup_corr(&mut tape, v, f, 4, scale).unwrap();
        chans += tape.shape(y)[1];
    }
    assert_eq!(chans, 324);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
            let y = softmax_lastdim(&mut tape, x).unwrap();
            let d = tape.value(y).data();
            for r in 0..3 {
                let s: f64 = d[r * 4..(r + 1) * 4].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(d[r * 4..(r + 1) * 4].iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn bilinear_is_linear_in_image(
            a in proptest::collection::vec(-2.0f64..2.0, 16),
            b in proptest::collection::vec(-2.0f64..2.0, 16),
            s in -3.0f64..3.0,
        ) {
            let coords = Tensor::from_fn(&[1, 2, 2, 2], |i| 0.3 + 0.8 * (i % 3) as f64);
            let sample = |img: Vec<f64>| {
                let mut tape = Tape::<f64>::new();
                let x = tape.constant(Tensor::new(&[1, 1, 4, 4], img).unwrap());
                let c = tape.constant(coords.clone());
                let y = bilinear_sample(&mut tape, x, c).unwrap();
                tape.value(y).data().to_vec()
            };
            let combo: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| s * x + y).collect();
            let lhs = sample(combo);
            let ya = sample(a);
            let yb = sample(b);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (s * ya[i] + yb[i])).abs() < 1e-9);
            }
        }
    }
}
