//! Shared f64 shadow implementations and finite-difference helpers used by
//! the gradient-check and acceptance suites.

#![allow(dead_code)]

pub const FD_STEP: f64 = 1e-3;
pub const SHADOW_TOL: f64 = 1e-4;
pub const F32_TOL: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

// ---------------------------------------------------------------------------
// f64 shadow layers (independent route: direct loops, no lowering)

pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

pub fn shadow_conv(
    x: &[f64],
    xd: &Dims4,
    weight: &[f64],
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let oh = (xd.h + 2 * pad - kh) / stride + 1;
    let ow = (xd.w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; xd.n * f * oh * ow];
    for n in 0..xd.n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fo];
                    for c in 0..xd.c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= xd.h as isize || ix < 0 || ix >= xd.w as isize
                                {
                                    continue;
                                }
                                let xv = x[((n * xd.c + c) * xd.h + iy as usize) * xd.w
                                    + ix as usize];
                                let wv = weight[((fo * xd.c + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub fn shadow_conv_backward(
    x: &[f64],
    xd: &Dims4,
    weight: &[f64],
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = (xd.h + 2 * pad - kh) / stride + 1;
    let ow = (xd.w + 2 * pad - kw) / stride + 1;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; f];
    for n in 0..xd.n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[((n * f + fo) * oh + oy) * ow + ox];
                    db[fo] += g;
                    for c in 0..xd.c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= xd.h as isize || ix < 0 || ix >= xd.w as isize
                                {
                                    continue;
                                }
                                let xi = ((n * xd.c + c) * xd.h + iy as usize) * xd.w
                                    + ix as usize;
                                let wi = ((fo * xd.c + c) * kh + ky) * kw + kx;
                                dx[xi] += g * weight[wi];
                                dw[wi] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn shadow_bn(x: &[f64], n: usize, c: usize, spatial: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let m = (n * spatial) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for i in 0..n {
            for s in 0..spatial {
                mean += x[(i * c + ch) * spatial + s];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for i in 0..n {
            for s in 0..spatial {
                let d = x[(i * c + ch) * spatial + s] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            for s in 0..spatial {
                let idx = (i * c + ch) * spatial + s;
                out[idx] = (x[idx] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub fn shadow_bn_backward(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[f64],
    eps: f64,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for i in 0..n {
            for s in 0..spatial {
                mean += x[(i * c + ch) * spatial + s];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for i in 0..n {
            for s in 0..spatial {
                let d = x[(i * c + ch) * spatial + s] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..n {
            for s in 0..spatial {
                let idx = (i * c + ch) * spatial + s;
                let xhat = (x[idx] - mean) * inv;
                sum_dy += dy[idx];
                sum_dy_xhat += dy[idx] * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        for i in 0..n {
            for s in 0..spatial {
                let idx = (i * c + ch) * spatial + s;
                let xhat = (x[idx] - mean) * inv;
                dx[idx] = gamma[ch] * inv * (dy[idx] - sum_dy / m - xhat * sum_dy_xhat / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn shadow_avg_pool(x: &[f64], d: &Dims4, k: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let oh = (d.h - k) / stride + 1;
    let ow = (d.w - k) / stride + 1;
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; d.n * d.c * oh * ow];
    for nc in 0..d.n * d.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x[nc * d.h * d.w + (oy * stride + ky) * d.w + ox * stride + kx];
                    }
                }
                out[(nc * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    (out, oh, ow)
}

pub fn shadow_avg_pool_backward(d: &Dims4, k: usize, stride: usize, dy: &[f64]) -> Vec<f64> {
    let oh = (d.h - k) / stride + 1;
    let ow = (d.w - k) / stride + 1;
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    for nc in 0..d.n * d.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(nc * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        dx[nc * d.h * d.w + (oy * stride + ky) * d.w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn shadow_dense(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut acc = b[o];
            for j in 0..din {
                acc += x[i * din + j] * w[o * din + j];
            }
            out[i * dout + o] = acc;
        }
    }
    out
}

pub fn shadow_dense_backward(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for i in 0..n {
        for o in 0..dout {
            let g = dy[i * dout + o];
            db[o] += g;
            for j in 0..din {
                dx[i * din + j] += g * w[o * din + j];
                dw[o * din + j] += g * x[i * din + j];
            }
        }
    }
    (dx, dw, db)
}

// Deterministic pseudo-random f64s in (-0.5, 0.5).
pub fn rands(seed: u64, count: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    (0..count)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
        .collect()
}

pub fn check_close(name: &str, analytic: &[f64], fd: &[f64], tol: f64) {
    assert_eq!(analytic.len(), fd.len());
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        let err = rel_err(*a, *f);
        assert!(
            err < tol,
            "{name}[{i}]: analytic {a} vs finite-diff {f} (rel {err:.2e} > {tol:.0e})"
        );
    }
}

/// Central finite differences of `loss` w.r.t. a parameter vector.
pub fn fd_grad(params: &mut [f64], loss: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let hi = loss(params);
        params[i] = orig - FD_STEP;
        let lo = loss(params);
        params[i] = orig;
        out[i] = (hi - lo) / (2.0 * FD_STEP);
    }
    out
}

