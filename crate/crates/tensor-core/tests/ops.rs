use tensor_core::{Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Straightforward nested-loop convolution used as the reference.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

fn seq(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()
}

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn scalar_kernel_conv() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 3, 3], 2.0));
}

#[test]
fn conv_matches_nested_loops() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (8, 0, 8), (1, 0, 1), (2, 0, 2)] {
        let x = t(&[2, 3, 9, 10], &seq(2 * 3 * 90, 0.1));
        let w = t(&[4, 3, k, k], &seq(4 * 3 * k * k, 0.05));
        let b = [0.1, -0.2, 0.3, 0.0];
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let bv = tape.constant(Tensor::vector(b.to_vec()));
        if 9 + 2 * pad < k {
            continue;
        }
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(tape.value(y).shape(), want.shape());
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12, "stride {stride} pad {pad} k {k}");
    }
}

/// Adjoint of `naive_conv` for the weighted loss `sum(y * r)`.
fn naive_conv_grads(x: &Tensor, w: &Tensor, r: &[f64], stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let (mut dx, mut dw, mut db) = (vec![0.0; x.numel()], vec![0.0; w.numel()], vec![0.0; o]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let g = r[((ni * o + oi) * ho + y) * wo + xx];
                    db[oi] += g;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oi * c + ci) * k + ky) * k + kx;
                                dx[xi] += w.data()[wi] * g;
                                dw[wi] += x.data()[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[test]
fn large_convs_match_nested_loops_forward_and_backward() {
    // Sizes large enough to split the lowered matrix into several blocks, with
    // output widths on both sides of the direct-kernel cutoff.
    for &(o, stride, pad, k) in &[(3, 1, 1, 3), (10, 1, 1, 3), (3, 2, 1, 3), (10, 2, 0, 2), (2, 1, 0, 5)] {
        let x = t(&[2, 2, 70, 41], &seq(2 * 2 * 70 * 41, 0.01));
        let w = t(&[o, 2, k, k], &seq(o * 2 * k * k, 0.05));
        let b: Vec<f64> = (0..o).map(|i| 0.1 * i as f64 - 0.2).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad(true));
        let wv = tape.leaf(w.clone().with_grad(true));
        let bv = tape.leaf(Tensor::vector(b.clone()).with_grad(true));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-10, "forward o {o} stride {stride} k {k}");
        let r: Vec<f64> = (0..want.numel()).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4).collect();
        let rv = tape.constant(Tensor::new(want.shape().to_vec(), r.clone()).unwrap());
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let (dx, dw, db) = naive_conv_grads(&x, &w, &r, stride, pad);
        let close = |a: &Tensor, b: &[f64]| a.data().iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-9 * (1.0 + q.abs()));
        assert!(close(grads.get(xv).unwrap(), &dx), "dx o {o} stride {stride} k {k}");
        assert!(close(grads.get(wv).unwrap(), &dw), "dw o {o} stride {stride} k {k}");
        assert!(close(grads.get(bv).unwrap(), &db), "db o {o} stride {stride} k {k}");
    }
}

#[test]
fn mean_and_sum() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 6.0]));
    let m = tape.mean(x).unwrap();
    let s = tape.sum(x);
    assert_eq!(tape.value(m).item().unwrap(), 3.0);
    assert_eq!(tape.value(s).item().unwrap(), 12.0);
}

#[test]
fn cosine_examples() {
    let cases = [
        ([1.0, 0.0], [1.0, 0.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 0.0], [-2.0, 0.0], -1.0),
    ];
    for (a, b, want) in cases {
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::vector(a.to_vec()));
        let bv = tape.constant(Tensor::vector(b.to_vec()));
        let c = tape.cosine_similarity(av, bv).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), want);
    }
}

#[test]
fn cosine_rejects_zero_norm() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let b = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.cosine_similarity(a, b), Err(TensorError::ZeroNorm { .. })));
}

#[test]
fn mse_examples() {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 2.0], &[1.0, 2.0], 0.0),
        (&[0.0, 0.0], &[1.0, 1.0], 1.0),
        (&[0.0, 2.0], &[0.0, 0.0], 2.0),
    ];
    for (x, y, want) in cases {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let yv = tape.constant(Tensor::vector(y.to_vec()));
        let l = tape.mse_loss(xv, yv).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), want);
    }
}

#[test]
fn bce_examples() {
    let ln2 = std::f64::consts::LN_2;
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::vector(vec![0.0]));
    let v = tape.bce_with_logits(l, &Tensor::vector(vec![1.0])).unwrap();
    assert!((tape.value(v).item().unwrap() - ln2).abs() < 1e-15);

    let l = tape.constant(Tensor::vector(vec![20.0]));
    let v = tape.bce_with_logits(l, &Tensor::vector(vec![1.0])).unwrap();
    assert!(tape.value(v).item().unwrap() < 1e-8);

    let l = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let v = tape.bce_with_logits(l, &Tensor::vector(vec![0.0, 1.0])).unwrap();
    assert!((tape.value(v).item().unwrap() - ln2).abs() < 1e-15);

    // Large logits stay finite.
    let l = tape.constant(Tensor::vector(vec![-800.0, 800.0]));
    let v = tape.bce_with_logits(l, &Tensor::vector(vec![1.0, 0.0])).unwrap();
    assert_eq!(tape.value(v).item().unwrap(), 800.0);
}

#[test]
fn bce_rejects_soft_targets() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::vector(vec![0.0]));
    assert!(tape.bce_with_logits(l, &Tensor::vector(vec![0.5])).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 4.0]).with_grad(true));
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]).with_grad(true));
    let z = tape.constant(Tensor::vector(vec![0.0]));
    let l = tape.mse_loss(x, z).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn leaves_off_path_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
    let unused = tape.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]).with_grad(true));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    let err = tape.linear(a, b, None).unwrap_err().to_string();
    assert!(err.contains("linear"), "{err}");
}

#[test]
fn concat_tile_and_pool() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 3, 2]);
    assert_eq!(
        tape.value(c).data(),
        &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
    );

    let p = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let tiled = tape.tile_pattern(p, 2, 2, 3, 4).unwrap();
    assert_eq!(
        tape.value(tiled).data(),
        &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 1.0, 2.0, 1.0, 2.0]
    );

    let img = tape.constant(t(&[1, 2, 1, 2], &[1.0, 3.0, -1.0, 5.0]));
    let g = tape.global_avg_pool(img).unwrap();
    assert_eq!(tape.value(g).data(), &[2.0, 2.0]);
}

#[test]
fn softmax_cross_entropy_uniform_logits() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[2, 4]));
    let v = tape.softmax_cross_entropy(l, &[0, 3]).unwrap();
    assert!((tape.value(v).item().unwrap() - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn normalize_rows_and_norm() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, -2.0]));
    let n = tape.normalize_rows(x).unwrap();
    assert_eq!(tape.value(n).data(), &[0.6, 0.8, 0.0, -1.0]);
    let v = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let l = tape.l2_norm(v).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 5.0);
}

#[test]
fn image_tensor_layout_round_trip() {
    let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 20.0).collect();
    let im = tensor_core::Image::new(2, 3, 3, data).unwrap();
    let t = im.to_tensor();
    assert_eq!(t.shape(), &[1, 3, 2, 3]);
    // channel 1, row 1, column 2 in C x H x W order
    assert_eq!(t.data()[(2 + 1) * 3 + 2], im.get(1, 2, 1));
    assert_eq!(tensor_core::Image::from_tensor(&t).unwrap(), im);
}
