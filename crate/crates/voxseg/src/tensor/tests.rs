use super::*;
use crate::gradcheck;
use crate::rng::SplitMix64;

fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Independent naive correlation: explicit zero padding, six nested loops.
fn naive_conv3d(
    x: &[f64],
    xs: &[usize],
    kernel: &[f64],
    ks: &[usize],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ci, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ks[0], ks[2]);
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * od * oh * ow];
    for c_out in 0..co {
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let zi = zo as isize * stride as isize - pad as isize + kz as isize;
                                    let yi = yo as isize * stride as isize - pad as isize + ky as isize;
                                    let xi = xo as isize * stride as isize - pad as isize + kx as isize;
                                    if zi < 0 || yi < 0 || xi < 0 {
                                        continue;
                                    }
                                    let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                    if zi >= d || yi >= h || xi >= w {
                                        continue;
                                    }
                                    let xv = x[((c_in * d + zi) * h + yi) * w + xi];
                                    let kv = kernel[(((c_out * ci + c_in) * k + kz) * k + ky) * k + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                    }
                    out[((c_out * od + zo) * oh + yo) * ow + xo] = acc + bias[c_out];
                }
            }
        }
    }
    (out, vec![co, od, oh, ow])
}

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        let denom = 1.0f64.max(e.abs());
        assert!(
            (a - e).abs() / denom <= tol,
            "component {i}: actual {a} vs expected {e}"
        );
    }
}

// ───────────────────────── conv3d ─────────────────────────

#[test]
fn conv3d_identity_kernel() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(1);
    let data = rand_vec(&mut rng, 27, -1.0, 1.0);
    let x = tape.constant(&[1, 3, 3, 3], data.clone()).unwrap();
    let k = tape.constant(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
    let b = tape.constant(&[1], vec![0.0]).unwrap();
    let y = tape.conv3d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &data[..]);
}

#[test]
fn conv3d_shape_arithmetic() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[2, 8, 8, 8], vec![0.0; 2 * 512]).unwrap();
    let k = tape.constant(&[4, 2, 3, 3, 3], vec![0.0; 4 * 2 * 27]).unwrap();
    let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
    let y = tape.conv3d(x, k, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[4, 4, 4, 4]);
}

#[test]
fn conv3d_matches_naive_oracle() {
    let mut rng = SplitMix64::new(2);
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        let xs = [2usize, 5, 4, 6];
        let ks = [3usize, 2, 3, 3, 3];
        let x = rand_vec(&mut rng, xs.iter().product(), -1.0, 1.0);
        let kd = rand_vec(&mut rng, ks.iter().product(), -1.0, 1.0);
        let bd = rand_vec(&mut rng, 3, -1.0, 1.0);
        let (expected, eshape) = naive_conv3d(&x, &xs, &kd, &ks, &bd, stride, pad);

        let mut tape: Tape<f64> = Tape::new();
        let xi = tape.constant(&xs, x).unwrap();
        let ki = tape.constant(&ks, kd).unwrap();
        let bi = tape.constant(&[3], bd).unwrap();
        let y = tape.conv3d(xi, ki, bi, stride, pad).unwrap();
        assert_eq!(tape.shape(y), &eshape[..]);
        assert_close(tape.value(y), &expected, 1e-5);
    }
}

#[test]
fn conv3d_rejects_channel_mismatch() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[2, 4, 4, 4], vec![0.0; 128]).unwrap();
    let k = tape.constant(&[4, 3, 3, 3, 3], vec![0.0; 4 * 3 * 27]).unwrap();
    let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
    let err = tape.conv3d(x, k, b, 1, 1).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
}

// ───────────────────────── conv_transpose3d ─────────────────────────

#[test]
fn conv_transpose_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(3);
    let data = rand_vec(&mut rng, 27, -1.0, 1.0);
    let x = tape.constant(&[1, 3, 3, 3], data.clone()).unwrap();
    let k = tape.constant(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
    let y = tape.conv_transpose3d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &data[..]);
}

#[test]
fn conv_transpose_shape_arithmetic() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[64, 5, 5, 5], vec![0.0; 64 * 125]).unwrap();
    let k = tape.constant(&[64, 8, 4, 4, 4], vec![0.0; 64 * 8 * 64]).unwrap();
    let y = tape.conv_transpose3d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[8, 10, 10, 10]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv3d(x), y> == <x, conv_transpose3d(y)> for matching geometry.
    // Geometry must round-trip exactly: (d + 2p - k) divisible by the stride.
    let mut rng = SplitMix64::new(4);
    for (stride, pad, k, in_dims) in [
        (1usize, 1usize, 3usize, [6usize, 5, 7]),
        (2, 1, 4, [6, 4, 8]),
        (2, 1, 2, [6, 4, 8]),
    ] {
        let (ci, co) = (2usize, 3usize);
        let out_dims: Vec<usize> =
            in_dims.iter().map(|&d| conv_out_extent(d, k, stride, pad).unwrap()).collect();
        let x = rand_vec(&mut rng, ci * in_dims.iter().product::<usize>(), -1.0, 1.0);
        let y = rand_vec(&mut rng, co * out_dims.iter().product::<usize>(), -1.0, 1.0);
        let kd = rand_vec(&mut rng, co * ci * k * k * k, -1.0, 1.0);
        // One buffer serves both: conv reads it as [C_out, C_in, k...], the
        // transposed direction as [C_in', C_out', k...] with C_in' = C_out.

        let mut tape: Tape<f64> = Tape::new();
        let xi = tape.constant(&[ci, in_dims[0], in_dims[1], in_dims[2]], x.clone()).unwrap();
        let ki = tape.constant(&[co, ci, k, k, k], kd.clone()).unwrap();
        let bi = tape.constant(&[co], vec![0.0; co]).unwrap();
        let fx = tape.conv3d(xi, ki, bi, stride, pad).unwrap();
        let lhs: f64 = tape.value(fx).iter().zip(&y).map(|(a, b)| a * b).sum();

        let yi = tape.constant(&[co, out_dims[0], out_dims[1], out_dims[2]], y).unwrap();
        let ks = tape.constant(&[co, ci, k, k, k], kd).unwrap();
        let fy = tape.conv_transpose3d(yi, ks, stride, pad).unwrap();
        assert_eq!(tape.shape(fy), &[ci, in_dims[0], in_dims[1], in_dims[2]]);
        let rhs: f64 = tape.value(fy).iter().zip(&x).map(|(a, b)| a * b).sum();

        assert!(
            (lhs - rhs).abs() / lhs.abs().max(1e-12) < 1e-10,
            "adjoint identity failed: {lhs} vs {rhs} (k={k} s={stride} p={pad})"
        );
    }
}

// ───────────────────────── batch_norm ─────────────────────────

#[test]
fn batch_norm_constant_input_is_zero() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[2, 2, 2, 2], vec![5.0; 16]).unwrap();
    let g = tape.constant(&[2], vec![1.0; 2]).unwrap();
    let b = tape.constant(&[2], vec![0.0; 2]).unwrap();
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train, 1e-5).unwrap();
    for v in tape.value(y) {
        assert!(v.abs() < 1e-9);
    }
    let stats = stats.unwrap();
    assert!((stats.mean[0] - 5.0).abs() < 1e-12);
    assert!(stats.var[0].abs() < 1e-12);
}

#[test]
fn batch_norm_normalizes_moments() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(5);
    let data = rand_vec(&mut rng, 3 * 64, -2.0, 3.0);
    let x = tape.constant(&[3, 4, 4, 4], data).unwrap();
    let g = tape.constant(&[3], vec![1.0; 3]).unwrap();
    let b = tape.constant(&[3], vec![0.0; 3]).unwrap();
    let (y, _) = tape.batch_norm(x, g, b, BnMode::Train, 1e-8).unwrap();
    let out = tape.value(y);
    for c in 0..3 {
        let ch = &out[c * 64..(c + 1) * 64];
        let mean: f64 = ch.iter().sum::<f64>() / 64.0;
        let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn batch_norm_affine_shift() {
    // gamma=2, beta=3 on normalized input: mean 3, std 2.
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(6);
    let data = rand_vec(&mut rng, 125, -1.0, 1.0);
    let x = tape.constant(&[1, 5, 5, 5], data).unwrap();
    let g = tape.constant(&[1], vec![2.0]).unwrap();
    let b = tape.constant(&[1], vec![3.0]).unwrap();
    let (y, _) = tape.batch_norm(x, g, b, BnMode::Train, 1e-10).unwrap();
    let out = tape.value(y);
    let mean: f64 = out.iter().sum::<f64>() / 125.0;
    let std: f64 = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 125.0).sqrt();
    assert!((mean - 3.0).abs() < 1e-6);
    assert!((std - 2.0).abs() < 1e-4);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[1, 1, 1, 2], vec![3.0, 7.0]).unwrap();
    let g = tape.constant(&[1], vec![1.0]).unwrap();
    let b = tape.constant(&[1], vec![0.0]).unwrap();
    let rm = [5.0];
    let rv = [4.0];
    let (y, stats) = tape
        .batch_norm(x, g, b, BnMode::Eval { running_mean: &rm, running_var: &rv }, 1e-12)
        .unwrap();
    assert!(stats.is_none());
    let out = tape.value(y);
    assert!((out[0] - (-1.0)).abs() < 1e-9);
    assert!((out[1] - 1.0).abs() < 1e-9);
}

// ───────────────────────── elementwise ─────────────────────────

#[test]
fn relu_clamps_negative() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[1], vec![0.0]).unwrap();
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y), &[0.5]);
}

#[test]
fn add_zero_is_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(7);
    let data = rand_vec(&mut rng, 10, -1.0, 1.0);
    let x = tape.constant(&[10], data.clone()).unwrap();
    let z = tape.constant(&[10], vec![0.0; 10]).unwrap();
    let y = tape.add(x, z).unwrap();
    assert_eq!(tape.value(y), &data[..]);
}

#[test]
fn elementwise_rejects_shape_mismatch() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&[2], vec![0.0; 2]).unwrap();
    let b = tape.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(tape.mul(a, b), Err(Error::ShapeMismatch { .. })));
}

// ───────────────────────── matmul ─────────────────────────

#[test]
fn matmul_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(8);
    let data = rand_vec(&mut rng, 9, -1.0, 1.0);
    let a = tape.constant(&[3, 3], data.clone()).unwrap();
    let eye = tape
        .constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let y = tape.matmul(a, eye).unwrap();
    assert_close(tape.value(y), &data, 1e-12);
}

#[test]
fn matmul_hand_case() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = tape.constant(&[2, 1], vec![5.0, 6.0]).unwrap();
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y), &[17.0, 39.0]);
}

#[test]
fn matmul_transpose_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(9);
    let ad = rand_vec(&mut rng, 12, -1.0, 1.0);
    let bd = rand_vec(&mut rng, 8, -1.0, 1.0);
    let a = tape.constant(&[3, 4], ad).unwrap();
    let b = tape.constant(&[4, 2], bd).unwrap();
    let ab = tape.matmul(a, b).unwrap();
    let ab_t = tape.transpose2d(ab).unwrap();
    let bt = tape.transpose2d(b).unwrap();
    let at = tape.transpose2d(a).unwrap();
    let bt_at = tape.matmul(bt, at).unwrap();
    assert_close(tape.value(ab_t), tape.value(bt_at).to_vec().as_slice(), 1e-12);
}

#[test]
fn matmul_rejects_dim_mismatch() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
}

// ───────────────────────── softmax ─────────────────────────

#[test]
fn softmax_uniform_gives_equal_weights() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[4], vec![0.7; 4]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y) {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(10);
    let data = rand_vec(&mut rng, 6, -2.0, 2.0);
    let shifted: Vec<f64> = data.iter().map(|v| v + 3.7).collect();
    let a = tape.constant(&[6], data).unwrap();
    let b = tape.constant(&[6], shifted).unwrap();
    let ya = tape.softmax(a, 0).unwrap();
    let yb = tape.softmax(b, 0).unwrap();
    assert_close(tape.value(ya), tape.value(yb).to_vec().as_slice(), 1e-12);
}

#[test]
fn softmax_direct_evaluation() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[2], vec![1.0, 0.0]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    let out = tape.value(y);
    assert!((out[0] - 0.7311).abs() < 1e-4);
    assert!((out[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn softmax_slices_sum_to_one_along_axis() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(11);
    let data = rand_vec(&mut rng, 3 * 4 * 5, -3.0, 3.0);
    let x = tape.constant(&[3, 4, 5], data).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    let out = tape.value(y);
    for o in 0..3 {
        for i in 0..5 {
            let mut sum = 0.0;
            for l in 0..4 {
                let v = out[(o * 4 + l) * 5 + i];
                assert!(v > 0.0 && v < 1.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

// ───────────────────────── reductions & reshape ─────────────────────────

#[test]
fn global_avg_pool_of_constant() {
    let mut tape: Tape<f64> = Tape::new();
    let mut data = vec![2.5; 27];
    data.extend(vec![-1.0; 27]);
    let x = tape.constant(&[2, 3, 3, 3], data).unwrap();
    let y = tape.global_avg_pool(x).unwrap();
    assert_close(tape.value(y), &[2.5, -1.0], 1e-12);
}

#[test]
fn concat_channels_shape() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(&[32, 2, 2, 2], vec![0.0; 32 * 8]).unwrap();
    let b = tape.constant(&[64, 2, 2, 2], vec![0.0; 64 * 8]).unwrap();
    let y = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.shape(y), &[96, 2, 2, 2]);
}

#[test]
fn reshape_round_trip() {
    let mut tape: Tape<f64> = Tape::new();
    let mut rng = SplitMix64::new(12);
    let data = rand_vec(&mut rng, 24, -1.0, 1.0);
    let x = tape.constant(&[2, 3, 4], data.clone()).unwrap();
    let y = tape.reshape(x, &[6, 4]).unwrap();
    let z = tape.reshape(y, &[2, 3, 4]).unwrap();
    assert_eq!(tape.value(z), &data[..]);
}

#[test]
fn reshape_rejects_count_change() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[4], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.reshape(x, &[5]), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn fully_connected_affine() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    let w = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = tape.constant(&[2], vec![10.0, 20.0]).unwrap();
    let y = tape.fully_connected(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[11.0, 22.0]);
}

// ───────────────────────── backward ─────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(&[5], vec![1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let mut tape: Tape<f64> = Tape::new();
    let data = vec![1.0, -2.0, 3.0, 0.5];
    let x = tape.param(&[4], data.clone()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
    assert_close(tape.grad(x).unwrap(), &expected, 1e-12);
}

#[test]
fn backward_on_non_scalar_is_rejected() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::InvalidArgument { .. })));
}

#[test]
fn backward_twice_accumulates() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn composite_graph_matches_finite_differences() {
    // loss = sum(sigmoid(conv(x)) * relu(x')) style composite over several ops.
    let mut rng = SplitMix64::new(13);
    let xs = [2usize, 4, 4, 4];
    let ks = [2usize, 2, 3, 3, 3];
    let x0 = rand_vec(&mut rng, xs.iter().product(), -1.0, 1.0);
    let k0 = rand_vec(&mut rng, ks.iter().product(), -0.5, 0.5);
    let b0 = rand_vec(&mut rng, 2, -0.1, 0.1);

    let run = |x: &[f64], k: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape: Tape<f64> = Tape::new();
        let xi = tape.param(&xs, x.to_vec()).unwrap();
        let ki = tape.param(&ks, k.to_vec()).unwrap();
        let bi = tape.param(&[2], b.to_vec()).unwrap();
        let c = tape.conv3d(xi, ki, bi, 1, 1).unwrap();
        let s = tape.sigmoid(c);
        let r = tape.relu(xi);
        let m = tape.mul(s, r).unwrap();
        let sm = tape.softmax(m, 0).unwrap();
        let prod = tape.mul(sm, m).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        (
            tape.value(loss)[0],
            tape.grad(xi).unwrap().to_vec(),
            tape.grad(ki).unwrap().to_vec(),
            tape.grad(bi).unwrap().to_vec(),
        )
    };

    let (_, gx, gk, gb) = run(&x0, &k0, &b0);
    let rep_x = gradcheck::check_all(|x| run(x, &k0, &b0).0, &x0, &gx, 1e-4, 1e-6);
    let rep_k = gradcheck::check_all(|k| run(&x0, k, &b0).0, &k0, &gk, 1e-4, 1e-6);
    let rep_b = gradcheck::check_all(|b| run(&x0, &k0, b).0, &b0, &gb, 1e-4, 1e-6);
    assert!(rep_x.max_rel_err <= 1e-4, "{rep_x:?}");
    assert!(rep_k.max_rel_err <= 1e-4, "{rep_k:?}");
    assert!(rep_b.max_rel_err <= 1e-4, "{rep_b:?}");
}

#[test]
fn deterministic_forward_bitwise() {
    let mut rng = SplitMix64::new(14);
    let data = rand_vec(&mut rng, 2 * 64, -1.0, 1.0);
    let kd = rand_vec(&mut rng, 3 * 2 * 27, -1.0, 1.0);
    let run = || {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[2, 4, 4, 4], data.clone()).unwrap();
        let k = tape.constant(&[3, 2, 3, 3, 3], kd.clone()).unwrap();
        let b = tape.constant(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = tape.conv3d(x, k, b, 1, 1).unwrap();
        let s = tape.softmax(y, 0).unwrap();
        tape.value(s).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
