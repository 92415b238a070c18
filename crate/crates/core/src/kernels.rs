//! The two equivalent compute paths for binary layers.
//!
//! Training semantics: +-1 float GEMM. Deployment semantics: xnor/popcount
//! over bit-packed operands. For +-1 operands of logical length n,
//!
//! ```text
//! x . w = 2 * bitcount(xnor(x', w')) - n        (explicit offset)
//! (x . w + n) / 2 = bitcount(xnor(x', w'))      (learned offset)
//! ```
//!
//! where x', w' replace {-1,+1} with {0,1}. Both identities hold bit-exactly
//! in integer arithmetic, so the packed path reproduces the float path with
//! zero tolerance. Convolution is lowered onto the same GEMMs via im2col.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{BitTensor, PadRole, Tensor};

/// Extents of a GEMM: output is m x n_dim, k is the reduction length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmProblem {
    pub m: usize,
    pub n_dim: usize,
    pub k: usize,
}

/// Whether the packed path applies the (x2, -n) adjustment itself or leaves
/// it to downstream learned parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetMode {
    /// Output = 2 * bitcount - n, equal to the +-1 float dot product.
    Explicit,
    /// Output = bitcount = (x . w + n) / 2; the affine correction is folded
    /// into downstream parameters.
    Learned,
}

/// Convolution geometry shared by the float and packed paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { kh, kw, stride, pad }
    }

    /// Output spatial extents (floor semantics; positions that do not fit a
    /// full stride step are dropped, as in common CNN frameworks).
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::InvalidGeometry(format!("{self:?}")));
        }
        let he = h + 2 * self.pad;
        let we = w + 2 * self.pad;
        if he < self.kh || we < self.kw {
            return Err(Error::InvalidGeometry(format!(
                "kernel {}x{} larger than padded input {he}x{we}",
                self.kh, self.kw
            )));
        }
        let oh = (he - self.kh) / self.stride + 1;
        let ow = (we - self.kw) / self.stride + 1;
        Ok((oh, ow))
    }
}

/// Standard real matrix product: a (m x k) . b (k x n) -> m x n.
pub fn float_gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.matrix_dims()?;
    let (kb, n) = b.matrix_dims()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "gemm inner extents: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    gemm_nn_into(a.data(), b.data(), m, ka, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// a (m x k) . b^T where b is stored n x k (both reductions contiguous).
pub fn gemm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.matrix_dims()?;
    let (n, kb) = b.matrix_dims()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "gemm_nt reduction extents: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    gemm_nt_into(a.data(), b.data(), m, ka, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// a^T (k x m -> m x k transposed) . b (k x n): a is stored k x m.
pub fn gemm_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = a.matrix_dims()?;
    let (kb, n) = b.matrix_dims()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "gemm_tn reduction extents: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    gemm_tn_into(a.data(), b.data(), m, ka, n, &mut out);
    Tensor::new(vec![m, n], out)
}

// Row-parallel kernels. Each output row is produced by one task scanning the
// reduction in a fixed sequential order, so results are bit-identical for any
// thread count.

pub(crate) fn gemm_nn_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

pub(crate) fn gemm_nt_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

// Eight partial sums break the add dependency chain so the compiler can
// vectorize; the lane layout is fixed, so results do not depend on thread
// count.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let chunks = a.len() / 8;
    let mut acc = [0.0f32; 8];
    for c in 0..chunks {
        let av = &a[c * 8..c * 8 + 8];
        let bv = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

pub(crate) fn gemm_tn_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        row.fill(0.0);
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// xnor/popcount GEMM over packed operands.
///
/// `a` holds m input rows, `b` holds n_dim weight rows (filter per row,
/// reduction contiguous); both must share the logical length `k_logical`.
/// Popcounts accumulate per 64-bit word into 32-bit integers, which cannot
/// overflow below k = 2^25.
pub fn xnor_gemm(
    a: &BitTensor,
    b: &BitTensor,
    mode: OffsetMode,
    k_logical: usize,
) -> Result<Tensor> {
    if a.cols() != k_logical || b.cols() != k_logical {
        return Err(Error::LengthMismatch {
            lhs: a.cols(),
            rhs: b.cols(),
        });
    }
    debug_assert_eq!(a.role(), PadRole::Input);
    debug_assert_eq!(b.role(), PadRole::Weight);
    let m = a.rows();
    let n = b.rows();
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_words = a.row_words(i);
        for (j, o) in row.iter_mut().enumerate() {
            let b_words = b.row_words(j);
            let mut cnt: u32 = 0;
            for (aw, bw) in a_words.iter().zip(b_words) {
                cnt += (!(aw ^ bw)).count_ones();
            }
            *o = match mode {
                OffsetMode::Explicit => (2 * cnt as i64 - k_logical as i64) as f32,
                OffsetMode::Learned => cnt as f32,
            };
        }
    });
    Tensor::new(vec![m, n], out)
}

/// Lower a N,C,H,W input to a (N*oh*ow) x (C*kh*kw) matrix of receptive
/// fields (channel-major within a row). Out-of-bounds positions are filled
/// with `pad_value`: 0.0 for real inputs, +1.0 for binary inputs (the packed
/// domain has no zero, and both compute paths must pad identically).
pub fn im2col(input: &Tensor, geom: ConvGeometry, pad_value: f32) -> Result<Tensor> {
    let shape = input.nchw()?;
    let (oh, ow) = geom.out_dims(shape.h, shape.w)?;
    let k = shape.c * geom.kh * geom.kw;
    let rows = shape.n * oh * ow;
    let mut out = vec![0.0f32; rows * k];
    let data = input.data();
    let (h, w, c) = (shape.h, shape.w, shape.c);
    out.par_chunks_mut(k).enumerate().for_each(|(r, row)| {
        let n = r / (oh * ow);
        let oy = (r / ow) % oh;
        let ox = r % ow;
        let iy0 = (oy * geom.stride) as isize - geom.pad as isize;
        let ix0 = (ox * geom.stride) as isize - geom.pad as isize;
        let mut col = 0;
        for ch in 0..c {
            let plane = &data[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
            for ky in 0..geom.kh {
                let iy = iy0 + ky as isize;
                for kx in 0..geom.kw {
                    let ix = ix0 + kx as isize;
                    row[col] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        plane[iy as usize * w + ix as usize]
                    } else {
                        pad_value
                    };
                    col += 1;
                }
            }
        }
    });
    Tensor::new(vec![rows, k], out)
}

/// Scatter-add of column gradients back to input layout (adjoint of im2col;
/// padded positions are dropped).
pub fn col2im(
    dcols: &Tensor,
    input_shape: crate::tensor::Shape,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let (oh, ow) = geom.out_dims(input_shape.h, input_shape.w)?;
    let k = input_shape.c * geom.kh * geom.kw;
    let (rows, kc) = dcols.matrix_dims()?;
    if rows != input_shape.n * oh * ow || kc != k {
        return Err(Error::ShapeMismatch(format!(
            "col2im: got {rows}x{kc}, expected {}x{k}",
            input_shape.n * oh * ow
        )));
    }
    let mut out = vec![0.0f32; input_shape.count()];
    let (h, w, c) = (input_shape.h, input_shape.w, input_shape.c);
    let dc = dcols.data();
    for r in 0..rows {
        let n = r / (oh * ow);
        let oy = (r / ow) % oh;
        let ox = r % ow;
        let iy0 = (oy * geom.stride) as isize - geom.pad as isize;
        let ix0 = (ox * geom.stride) as isize - geom.pad as isize;
        let row = &dc[r * k..(r + 1) * k];
        let mut col = 0;
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for ky in 0..geom.kh {
                let iy = iy0 + ky as isize;
                for kx in 0..geom.kw {
                    let ix = ix0 + kx as isize;
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        out[base + iy as usize * w + ix as usize] += row[col];
                    }
                    col += 1;
                }
            }
        }
    }
    Tensor::from_nchw(input_shape, out)
}

/// Permute a (N*oh*ow) x F GEMM output into N,F,oh,ow layout.
pub fn rows_to_nchw(rows: &Tensor, n: usize, oh: usize, ow: usize) -> Result<Tensor> {
    let (r, f) = rows.matrix_dims()?;
    if r != n * oh * ow {
        return Err(Error::ShapeMismatch(format!(
            "rows_to_nchw: {r} rows vs {n}*{oh}*{ow}"
        )));
    }
    let src = rows.data();
    let mut out = vec![0.0f32; r * f];
    for i in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let row = &src[((i * oh + y) * ow + x) * f..((i * oh + y) * ow + x + 1) * f];
                for (ch, &v) in row.iter().enumerate() {
                    out[((i * f + ch) * oh + y) * ow + x] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out)
}

/// Inverse of [`rows_to_nchw`]: N,F,oh,ow -> (N*oh*ow) x F.
pub fn nchw_to_rows(t: &Tensor) -> Result<Tensor> {
    let s = t.nchw()?;
    let src = t.data();
    let mut out = vec![0.0f32; s.count()];
    let (f, oh, ow) = (s.c, s.h, s.w);
    for i in 0..s.n {
        for ch in 0..f {
            for y in 0..oh {
                for x in 0..ow {
                    out[((i * oh + y) * ow + x) * f + ch] = src[((i * f + ch) * oh + y) * ow + x];
                }
            }
        }
    }
    Tensor::new(vec![s.n * oh * ow, f], out)
}

/// Real convolution via im2col + GEMM. `weights` is F,C,kh,kw.
pub fn conv2d(input: &Tensor, weights: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let in_shape = input.nchw()?;
    let w_shape = weights.nchw()?;
    if w_shape.c != in_shape.c || w_shape.h != geom.kh || w_shape.w != geom.kw {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {:?} vs input channels {} and kernel {}x{}",
            weights.shape(),
            in_shape.c,
            geom.kh,
            geom.kw
        )));
    }
    let (oh, ow) = geom.out_dims(in_shape.h, in_shape.w)?;
    let cols = im2col(input, geom, 0.0)?;
    let k = w_shape.c * w_shape.h * w_shape.w;
    let w_mat = weights.clone().reshape(vec![w_shape.n, k])?;
    let out_rows = gemm_nt(&cols, &w_mat)?;
    rows_to_nchw(&out_rows, in_shape.n, oh, ow)
}

/// Binary convolution over packed weights: sign-domain input (exact +-1)
/// convolved with bit-packed weights via xnor/popcount. Spatial padding maps
/// to +1 before packing. In `Explicit` mode the output is bit-exactly the
/// float convolution of the same +-1 operands.
pub fn binary_conv_packed(
    input: &Tensor,
    weights: &BitTensor,
    geom: ConvGeometry,
    mode: OffsetMode,
) -> Result<Tensor> {
    let in_shape = input.nchw()?;
    if let Some(&v) = input.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::NonBinaryValue(v));
    }
    let k = weights.cols();
    if k != in_shape.c * geom.kh * geom.kw {
        return Err(Error::InvalidGeometry(format!(
            "packed weights expect k={}, geometry gives {}",
            k,
            in_shape.c * geom.kh * geom.kw
        )));
    }
    let (oh, ow) = geom.out_dims(in_shape.h, in_shape.w)?;
    let cols = im2col(input, geom, 1.0)?;
    let packed = BitTensor::pack(&cols, PadRole::Input)?;
    let out_rows = xnor_gemm(&packed, weights, mode, k)?;
    rows_to_nchw(&out_rows, in_shape.n, oh, ow)
}
