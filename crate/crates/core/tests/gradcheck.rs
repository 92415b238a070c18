//! Finite-difference gradient checks for every real-valued layer.
//!
//! A 64-bit shadow implementation (naive loops, no im2col) provides the
//! forward path; central finite differences over it are the oracle. The
//! shadow's analytic backward must match the oracle to 1e-4 relative, and
//! the production f32 gradients must match the same oracle to 1e-3.
//!
//! Straight-through layers are deliberately excluded here: the STE is not
//! the true derivative and is checked against its defining formula instead
//! (see the binarize tests and the acceptance suite).

use bitgrad_core::binarize::BinarizeConfig;
use bitgrad_core::kernels::ConvGeometry;
use bitgrad_core::nn::{GraphBuilder, Mode, NodeParams};
use bitgrad_core::tensor::Tensor;
use bitgrad_core::train::init_params;

mod common;
use common::*;

#[test]
fn conv_gradients_match_finite_differences() {
    let xd = Dims4 { n: 2, c: 3, h: 5, w: 5 };
    let (f, kh, kw, stride, pad) = (4, 3, 3, 2, 1);
    let x = rands(1, xd.n * xd.c * xd.h * xd.w);
    let mut w = rands(2, f * xd.c * kh * kw);
    let mut b = rands(3, f);
    let (y0, oh, ow) = shadow_conv(&x, &xd, &w, f, kh, kw, stride, pad, &b);
    let probe = rands(4, y0.len());

    // Shadow analytic vs finite differences on the f64 path.
    let (dx, dw, db) = shadow_conv_backward(&x, &xd, &w, f, kh, kw, stride, pad, &probe);
    let fd_w = fd_grad(&mut w, &mut |wv| {
        let (y, _, _) = shadow_conv(&x, &xd, wv, f, kh, kw, stride, pad, &b);
        y.iter().zip(&probe).map(|(a, p)| a * p).sum()
    });
    check_close("conv dW", &dw, &fd_w, SHADOW_TOL);
    let fd_b = fd_grad(&mut b, &mut |bv| {
        let (y, _, _) = shadow_conv(&x, &xd, &w, f, kh, kw, stride, pad, bv);
        y.iter().zip(&probe).map(|(a, p)| a * p).sum()
    });
    check_close("conv db", &db, &fd_b, SHADOW_TOL);
    let mut xm = x.clone();
    let fd_x = fd_grad(&mut xm, &mut |xv| {
        let (y, _, _) = shadow_conv(xv, &xd, &w, f, kh, kw, stride, pad, &b);
        y.iter().zip(&probe).map(|(a, p)| a * p).sum()
    });
    check_close("conv dx", &dx, &fd_x, SHADOW_TOL);

    // Production f32 gradients against the same oracle. The probe becomes
    // the output gradient by feeding the conv into a fixed linear head.
    let mut builder = GraphBuilder::new(xd.c, xd.h, xd.w);
    let input = builder.input();
    let conv = builder.conv(input, f, ConvGeometry::new(kh, kw, stride, pad), true);
    let flat = builder.flatten(conv);
    let head = builder.dense(flat, 2, false);
    let graph = builder.finish(head, BinarizeConfig::default());
    let mut params = init_params(&graph, 1).unwrap();
    params.slots[conv] = NodeParams::Affine {
        weight: Tensor::new(
            vec![f, xd.c, kh, kw],
            w.iter().map(|&v| v as f32).collect(),
        )
        .unwrap(),
        bias: Some(Tensor::new(vec![f], b.iter().map(|&v| v as f32).collect()).unwrap()),
    };
    // Head row 0 carries the probe, row 1 is zero; labels pick class 1 so
    // dLoss/dlogit0 = p0 (nonzero) -- instead wire the probe directly:
    // use a single-output head and skip softmax by differentiating the sum.
    // Simpler: compare production conv grads against shadow grads computed
    // with the production head's actual output gradient. We reuse the
    // softmax head end to end: shadow replicates dense + softmax in f64.
    let head_w: Vec<f64> = rands(5, 2 * y0.len());
    params.slots[head] = NodeParams::Affine {
        weight: Tensor::new(
            vec![2, y0.len() / xd.n],
            head_w[..2 * y0.len() / xd.n]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        )
        .unwrap(),
        bias: None,
    };
    let batch = Tensor::new(
        vec![xd.n, xd.c, xd.h, xd.w],
        x.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let labels = [0u32, 1u32];
    let acts = graph
        .forward(&mut params, &batch, Some(&labels), Mode::Train)
        .unwrap();
    let grads = graph.backward(&params, &acts, &labels).unwrap();

    // f64 shadow of the full pipeline for the finite-difference oracle.
    let head_w64 = &head_w[..2 * y0.len() / xd.n];
    let pipeline_loss = |wv: &[f64], bv: &[f64]| -> f64 {
        let (y, _, _) = shadow_conv(&x, &xd, wv, f, kh, kw, stride, pad, bv);
        let din = y.len() / xd.n;
        let logits = shadow_dense(&y, xd.n, din, head_w64, 2, &[0.0, 0.0]);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * 2..(i + 1) * 2];
            let max = row[0].max(row[1]);
            let denom = (row[0] - max).exp() + (row[1] - max).exp();
            loss -= (row[label as usize] - max) - denom.ln();
        }
        loss / labels.len() as f64
    };
    let fd_w32 = fd_grad(&mut w, &mut |wv| pipeline_loss(wv, &b));
    let got_w = grads.slots[conv].weight.as_ref().unwrap();
    for (i, (g, fd)) in got_w.data().iter().zip(&fd_w32).enumerate() {
        let err = rel_err(*g as f64, *fd);
        assert!(err < F32_TOL, "production conv dW[{i}]: {g} vs {fd} ({err:.2e})");
    }
    let fd_b32 = fd_grad(&mut b, &mut |bv| pipeline_loss(&w, bv));
    let got_b = grads.slots[conv].bias.as_ref().unwrap();
    for (i, (g, fd)) in got_b.data().iter().zip(&fd_b32).enumerate() {
        let err = rel_err(*g as f64, *fd);
        assert!(err < F32_TOL, "production conv db[{i}]: {g} vs {fd} ({err:.2e})");
    }
    assert_eq!(oh, 3);
    assert_eq!(ow, 3);
}

#[test]
fn dense_gradients_match_finite_differences() {
    let (n, din, dout) = (4, 6, 3);
    let x = rands(11, n * din);
    let mut w = rands(12, dout * din);
    let mut b = rands(13, dout);
    let y = shadow_dense(&x, n, din, &w, dout, &b);
    let probe = rands(14, y.len());

    let (dx, dw, db) = shadow_dense_backward(&x, n, din, &w, dout, &probe);
    let fd_w = fd_grad(&mut w, &mut |wv| {
        shadow_dense(&x, n, din, wv, dout, &b)
            .iter()
            .zip(&probe)
            .map(|(a, p)| a * p)
            .sum()
    });
    check_close("dense dW", &dw, &fd_w, SHADOW_TOL);
    let fd_b = fd_grad(&mut b, &mut |bv| {
        shadow_dense(&x, n, din, &w, dout, bv)
            .iter()
            .zip(&probe)
            .map(|(a, p)| a * p)
            .sum()
    });
    check_close("dense db", &db, &fd_b, SHADOW_TOL);
    let mut xm = x.clone();
    let fd_x = fd_grad(&mut xm, &mut |xv| {
        shadow_dense(xv, n, din, &w, dout, &b)
            .iter()
            .zip(&probe)
            .map(|(a, p)| a * p)
            .sum()
    });
    check_close("dense dx", &dx, &fd_x, SHADOW_TOL);

    // Production path through a softmax head.
    let mut builder = GraphBuilder::new(1, 1, din);
    let input = builder.input();
    let flat = builder.flatten(input);
    let dense = builder.dense(flat, dout, true);
    let graph = builder.finish(dense, BinarizeConfig::default());
    let mut params = init_params(&graph, 2).unwrap();
    params.slots[dense] = NodeParams::Affine {
        weight: Tensor::new(vec![dout, din], w.iter().map(|&v| v as f32).collect()).unwrap(),
        bias: Some(Tensor::new(vec![dout], b.iter().map(|&v| v as f32).collect()).unwrap()),
    };
    let batch = Tensor::new(vec![n, 1, 1, din], x.iter().map(|&v| v as f32).collect()).unwrap();
    let labels: Vec<u32> = (0..n as u32).map(|i| i % dout as u32).collect();
    let acts = graph
        .forward(&mut params, &batch, Some(&labels), Mode::Train)
        .unwrap();
    let grads = graph.backward(&params, &acts, &labels).unwrap();
    let softmax_loss = |wv: &[f64], bv: &[f64]| -> f64 {
        let logits = shadow_dense(&x, n, din, wv, dout, bv);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * dout..(i + 1) * dout];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss -= (row[label as usize] - max) - denom.ln();
        }
        loss / n as f64
    };
    let fd_w32 = fd_grad(&mut w, &mut |wv| softmax_loss(wv, &b));
    let got = grads.slots[dense].weight.as_ref().unwrap();
    for (i, (g, fd)) in got.data().iter().zip(&fd_w32).enumerate() {
        let err = rel_err(*g as f64, *fd);
        assert!(err < F32_TOL, "production dense dW[{i}]: {g} vs {fd} ({err:.2e})");
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let (n, c, spatial) = (4, 3, 4);
    let x = rands(21, n * c * spatial);
    let mut gamma = rands(22, c).iter().map(|v| v + 1.0).collect::<Vec<_>>();
    let mut beta = rands(23, c);
    let eps = 1e-5;
    let y = shadow_bn(&x, n, c, spatial, &gamma, &beta, eps);
    let probe = rands(24, y.len());

    let (dx, dgamma, dbeta) = shadow_bn_backward(&x, n, c, spatial, &gamma, eps, &probe);
    let fd_gamma = fd_grad(&mut gamma, &mut |gv| {
        shadow_bn(&x, n, c, spatial, gv, &beta, eps)
            .iter()
            .zip(&probe)
            .map(|(a, p)| a * p)
            .sum()
    });
    check_close("bn dgamma", &dgamma, &fd_gamma, SHADOW_TOL);
    let fd_beta = fd_grad(&mut beta, &mut |bv| {
        shadow_bn(&x, n, c, spatial, &gamma, bv, eps)
            .iter()
            .zip(&probe)
            .map(|(a, p)| a * p)
            .sum()
    });
    check_close("bn dbeta", &dbeta, &fd_beta, SHADOW_TOL);
    let mut xm = x.clone();
    let fd_x = fd_grad(&mut xm, &mut |xv| {
        shadow_bn(xv, n, c, spatial, &gamma, &beta, eps)
            .iter()
            .zip(&probe)
            .map(|(a, p)| a * p)
            .sum()
    });
    check_close("bn dx", &dx, &fd_x, SHADOW_TOL);

    // Production BN on the same 4-sample batch via the public functions.
    let xt = Tensor::new(
        vec![n, c, 2, 2],
        x.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let slot = NodeParams::BatchNorm {
        gamma: Tensor::new(vec![c], gamma.iter().map(|&v| v as f32).collect()).unwrap(),
        beta: Tensor::new(vec![c], beta.iter().map(|&v| v as f32).collect()).unwrap(),
        running_mean: Tensor::zeros(vec![c]),
        running_var: Tensor::filled(vec![c], 1.0),
    };
    let cfg = bitgrad_core::nn::BatchNormConfig::default();
    let dy = Tensor::new(
        vec![n, c, 2, 2],
        probe.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let (pdx, pdgamma, pdbeta) =
        bitgrad_core::nn::batchnorm_backward(&xt, &slot, &cfg, &dy).unwrap();
    for (i, (g, fd)) in pdx.data().iter().zip(&fd_x).enumerate() {
        let err = rel_err(*g as f64, *fd);
        assert!(err < F32_TOL, "production bn dx[{i}]: {g} vs {fd} ({err:.2e})");
    }
    for (g, fd) in pdgamma.data().iter().zip(&fd_gamma) {
        assert!(rel_err(*g as f64, *fd) < F32_TOL);
    }
    for (g, fd) in pdbeta.data().iter().zip(&fd_beta) {
        assert!(rel_err(*g as f64, *fd) < F32_TOL);
    }
}

#[test]
fn avg_pool_gradients_match_finite_differences() {
    let d = Dims4 { n: 2, c: 2, h: 4, w: 4 };
    let mut x = rands(31, d.n * d.c * d.h * d.w);
    let (y, oh, ow) = shadow_avg_pool(&x, &d, 2, 2);
    let probe = rands(32, y.len());
    let dx = shadow_avg_pool_backward(&d, 2, 2, &probe);
    let fd_x = fd_grad(&mut x, &mut |xv| {
        let (y, _, _) = shadow_avg_pool(xv, &d, 2, 2);
        y.iter().zip(&probe).map(|(a, p)| a * p).sum()
    });
    check_close("avgpool dx", &dx, &fd_x, SHADOW_TOL);

    // Production backward routes the same values.
    let xt = Tensor::new(
        vec![d.n, d.c, d.h, d.w],
        x.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let dyt = Tensor::new(
        vec![d.n, d.c, oh, ow],
        probe.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let pdx = bitgrad_core::nn::avg_pool_backward(&xt, 2, 2, &dyt).unwrap();
    for (g, fd) in pdx.data().iter().zip(&fd_x) {
        assert!(rel_err(*g as f64, *fd) < F32_TOL);
    }
}

#[test]
fn max_pool_gradient_matches_finite_differences() {
    // Away from ties, the max is locally linear; finite differences agree
    // with the argmax-routed gradient.
    let d = Dims4 { n: 1, c: 2, h: 4, w: 4 };
    let mut x: Vec<f64> = rands(41, d.n * d.c * d.h * d.w)
        .iter()
        .enumerate()
        .map(|(i, v)| v + (i % 7) as f64 * 0.37)
        .collect();
    let probe = rands(42, d.n * d.c * 4);
    let loss = |xv: &[f64]| -> f64 {
        let mut total = 0.0;
        let mut oi = 0;
        for nc in 0..d.n * d.c {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            best = best
                                .max(xv[nc * 16 + (oy * 2 + ky) * 4 + ox * 2 + kx]);
                        }
                    }
                    total += best * probe[oi];
                    oi += 1;
                }
            }
        }
        total
    };
    let fd_x = fd_grad(&mut x, &mut |xv| loss(xv));
    let xt = Tensor::new(
        vec![d.n, d.c, d.h, d.w],
        x.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let dyt = Tensor::new(
        vec![d.n, d.c, 2, 2],
        probe.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let pdx = bitgrad_core::nn::max_pool_backward(&xt, 2, 2, 0, &dyt).unwrap();
    for (i, (g, fd)) in pdx.data().iter().zip(&fd_x).enumerate() {
        let err = rel_err(*g as f64, *fd);
        assert!(err < F32_TOL, "maxpool dx[{i}]: {g} vs {fd} ({err:.2e})");
    }
}
