mod common;

use common::{randn, rng};
use mst_core::{Grid, Tape, Tensor};
use proptest::prelude::*;

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d < tol, "max diff {d:e}");
}

fn elementwise(op: impl Fn(&mut Tape<f64>, mst_core::Var) -> mst_core::Result<mst_core::Var>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let y = op(&mut t, v).unwrap();
    t.value(y).clone()
}

#[test]
fn activations_match_closed_forms() {
    let x = randn(&mut rng(1), &[7, 9], 3.0);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
    close(&elementwise(|t, v| t.sigmoid(v), &x), &x.map(sig), 1e-12);
    close(&elementwise(|t, v| t.silu(v), &x), &x.map(|v| v * sig(v)), 1e-12);
    close(&elementwise(|t, v| t.gelu(v), &x), &x.map(gelu), 1e-12);
    close(&elementwise(|t, v| t.relu(v), &x), &x.map(|v| v.max(0.0)), 1e-12);
    close(&elementwise(|t, v| t.softplus(v), &x), &x.map(|v| (1.0 + v.exp()).ln()), 1e-12);
}

#[test]
fn arithmetic_matches_direct_loops() {
    let mut r = rng(2);
    let a = randn(&mut r, &[4, 5], 1.0);
    let b = randn(&mut r, &[4, 5], 1.0);
    let row = randn(&mut r, &[5], 1.0);
    let mut t = Tape::new();
    let (va, vb, vr) = (t.leaf(a.clone()).unwrap(), t.leaf(b.clone()).unwrap(), t.leaf(row.clone()).unwrap());
    let sum = t.add(va, vb).unwrap();
    let diff = t.sub(va, vb).unwrap();
    let prod = t.mul(va, vb).unwrap();
    let biased = t.add_row(va, vr).unwrap();
    let scaled_cols = t.mul_row(va, vr).unwrap();
    let tripled = t.scale(va, 3.0).unwrap();
    let all = t.add_n(&[va, vb, va]).unwrap();
    let expect = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(&[4, 5], f);
    close(t.value(sum), &expect(&|i| a.data()[i] + b.data()[i]), 1e-12);
    close(t.value(diff), &expect(&|i| a.data()[i] - b.data()[i]), 1e-12);
    close(t.value(prod), &expect(&|i| a.data()[i] * b.data()[i]), 1e-12);
    close(t.value(biased), &expect(&|i| a.data()[i] + row.data()[i % 5]), 1e-12);
    close(t.value(scaled_cols), &expect(&|i| a.data()[i] * row.data()[i % 5]), 1e-12);
    close(t.value(tripled), &expect(&|i| 3.0 * a.data()[i]), 1e-12);
    close(t.value(all), &expect(&|i| 2.0 * a.data()[i] + b.data()[i]), 1e-12);
}

#[test]
fn reductions_match_direct_sums() {
    let x = randn(&mut rng(3), &[6, 4], 1.0);
    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let s = t.sum(v).unwrap();
    let m0 = t.mean_axis(v, 0).unwrap();
    let m1 = t.mean_axis(v, 1).unwrap();
    let total: f64 = x.data().iter().sum();
    assert!((t.value(s).item() - total).abs() < 1e-12);
    for j in 0..4 {
        let col: f64 = (0..6).map(|i| x.at2(i, j)).sum::<f64>() / 6.0;
        assert!((t.value(m0).data()[j] - col).abs() < 1e-12);
    }
    for i in 0..6 {
        let row: f64 = (0..4).map(|j| x.at2(i, j)).sum::<f64>() / 4.0;
        assert!((t.value(m1).data()[i] - row).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_rows_matches_exp_over_sum() {
    let x = randn(&mut rng(4), &[3, 5], 2.0);
    let got = x.softmax(1).unwrap();
    for i in 0..3 {
        let z: f64 = (0..5).map(|j| x.at2(i, j).exp()).sum();
        for j in 0..5 {
            assert!((got.at2(i, j) - x.at2(i, j).exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_matches_reference_and_standardises() {
    let mut r = rng(5);
    for scale in [0.3, 1.0, 10.0] {
        let x = randn(&mut r, &[8, 24], scale).map(|v| v + 2.5);
        let mut t = Tape::new();
        let v = t.leaf(x.clone()).unwrap();
        let g = t.leaf(Tensor::full(&[24], 1.0)).unwrap();
        let b = t.leaf(Tensor::zeros(&[24])).unwrap();
        let y = t.layer_norm(v, g, b, 1e-10).unwrap();
        let y = t.value(y);
        for i in 0..8 {
            let row: Vec<f64> = (0..24).map(|j| y.at2(i, j)).collect();
            let mean = row.iter().sum::<f64>() / 24.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-10, "row {i} mean {mean:e}");
            assert!((var - 1.0).abs() < 1e-8, "row {i} var {var}");
        }
    }

    let x = randn(&mut r, &[3, 6], 1.0);
    let gamma = randn(&mut r, &[6], 1.0);
    let beta = randn(&mut r, &[6], 1.0);
    let mut t = Tape::new();
    let (v, g, b) = (t.leaf(x.clone()).unwrap(), t.leaf(gamma.clone()).unwrap(), t.leaf(beta.clone()).unwrap());
    let y = t.layer_norm(v, g, b, 1e-6).unwrap();
    let expect = Tensor::from_fn(&[3, 6], |idx| {
        let (i, j) = (idx / 6, idx % 6);
        let row: Vec<f64> = (0..6).map(|k| x.at2(i, k)).collect();
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        (row[j] - mean) / (var + 1e-6).sqrt() * gamma.data()[j] + beta.data()[j]
    });
    close(t.value(y), &expect, 1e-12);
}

/// Zero-padded 3×3 cross-correlation per grid, `w: [C_out, 9·C_in]` with
/// columns ordered `(ky, kx, c_in)`.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, grids: &[Grid]) -> Tensor<f64> {
    let cin = x.shape()[1];
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[x.shape()[0], cout]);
    let mut base = 0;
    for g in grids {
        for y in 0..g.h as i64 {
            for xx in 0..g.w as i64 {
                let row = base + (y as usize) * g.w + xx as usize;
                for o in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy < 0 || sx < 0 || sy >= g.h as i64 || sx >= g.w as i64 {
                                continue;
                            }
                            let src = base + sy as usize * g.w + sx as usize;
                            for c in 0..cin {
                                acc += w.at2(o, ((ky * 3 + kx) as usize) * cin + c) * x.at2(src, c);
                            }
                        }
                    }
                    out.data_mut()[row * cout + o] = acc;
                }
            }
        }
        base += g.len();
    }
    out
}

#[test]
fn conv3x3_matches_sliding_window() {
    let mut r = rng(6);
    let grids = [Grid::new(3, 4), Grid::new(5, 5)];
    let x = randn(&mut r, &[37, 3], 1.0);
    let w = randn(&mut r, &[4, 27], 1.0);
    let mut t = Tape::new();
    let (vx, vw) = (t.leaf(x.clone()).unwrap(), t.leaf(w.clone()).unwrap());
    let y = t.conv3x3(vx, vw, &grids).unwrap();
    close(t.value(y), &conv_reference(&x, &w, &grids), 1e-12);
}

#[test]
fn dwconv3x3_matches_per_channel_conv() {
    let mut r = rng(7);
    let grids = [Grid::new(4, 4), Grid::new(2, 6)];
    let x = randn(&mut r, &[28, 3], 1.0);
    let k = randn(&mut r, &[3, 9], 1.0);
    let mut t = Tape::new();
    let (vx, vk) = (t.leaf(x.clone()).unwrap(), t.leaf(k.clone()).unwrap());
    let y = t.dwconv3x3(vx, vk, &grids).unwrap();
    // depthwise = dense conv with a block-diagonal kernel
    let dense = Tensor::from_fn(&[3, 27], |idx| {
        let (o, col) = (idx / 27, idx % 27);
        let (tap, c) = (col / 3, col % 3);
        if c == o {
            k.at2(o, tap)
        } else {
            0.0
        }
    });
    close(t.value(y), &conv_reference(&x, &dense, &grids), 1e-12);
}

#[test]
fn transpose_and_reshape_round_trip() {
    let x = randn(&mut rng(8), &[3, 5], 1.0);
    let xt = x.transpose().unwrap();
    assert_eq!(xt.shape(), &[5, 3]);
    for i in 0..3 {
        for j in 0..5 {
            assert_eq!(xt.at2(j, i), x.at2(i, j));
        }
    }
    assert_eq!(xt.transpose().unwrap(), x);
    assert_eq!(x.reshape(&[15]).unwrap().reshape(&[3, 5]).unwrap(), x);
    assert!(x.reshape(&[4, 4]).is_err());
}

#[test]
fn backward_gradients_match_value_shapes() {
    let mut r = rng(9);
    let mut t = Tape::new();
    let a = t.leaf(randn(&mut r, &[4, 3], 1.0)).unwrap();
    let b = t.leaf(randn(&mut r, &[3, 5], 1.0)).unwrap();
    let bias = t.leaf(randn(&mut r, &[5], 1.0)).unwrap();
    let m = t.matmul(a, b).unwrap();
    let h = t.add_row(m, bias).unwrap();
    let s = t.silu(h).unwrap();
    let sm = t.softmax(s, 1).unwrap();
    let tr = t.transpose(sm).unwrap();
    let loss = t.sum(tr).unwrap();
    let grads = t.backward(loss).unwrap();
    for v in [a, b, bias, m, h, s, sm, tr, loss] {
        assert_eq!(grads.get(v).shape(), t.shape(v));
    }
}

#[test]
fn non_finite_results_are_errors() {
    let mut t = Tape::new();
    assert!(t.leaf(Tensor::new(&[1], vec![f64::NAN]).unwrap()).is_err());
    let v = t.leaf(Tensor::new(&[2], vec![1e300, 1e300]).unwrap()).unwrap();
    let err = t.mul(v, v).unwrap_err();
    assert!(matches!(err, mst_core::Error::NonFinite { op: "mul" }), "{err}");
}

proptest! {
    #[test]
    fn concat_then_split_is_identity(
        rows in prop::collection::vec(1usize..5, 1..4),
        cols in 1usize..5,
        seed in any::<u64>(),
        axis in 0usize..2,
    ) {
        let mut r = rng(seed);
        let parts: Vec<Tensor<f64>> = rows
            .iter()
            .map(|&n| if axis == 0 { randn(&mut r, &[n, cols], 1.0) } else { randn(&mut r, &[cols, n], 1.0) })
            .collect();
        let mut t = Tape::new();
        let vars: Vec<_> = parts.iter().map(|p| t.leaf(p.clone()).unwrap()).collect();
        let cat = t.concat(&vars, axis).unwrap();
        let back = t.split(cat, axis, &rows).unwrap();
        for (v, p) in back.iter().zip(&parts) {
            prop_assert_eq!(t.value(*v), p);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalised(
        data in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = data.len();
        let x = Tensor::new(&[n], data).unwrap();
        let p = x.softmax(0).unwrap();
        let q = x.map(|v| v + shift).softmax(0).unwrap();
        prop_assert!(p.max_abs_diff(&q).unwrap() < 1e-12);
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = randn(&mut r, &[m, k], 1.0);
        let b = randn(&mut r, &[k, n], 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a.at2(i, p) * b.at2(p, j)).sum();
                prop_assert!((c.at2(i, j) - e).abs() < 1e-12);
            }
        }
    }
}
