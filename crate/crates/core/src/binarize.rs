//! Sign activation, its two backward rules, and scaling factors.
//!
//! Forward is always `sign` (with sign(0) = +1, negative zero included).
//! Backward is a straight-through estimator with gradient canceling outside
//! `|r_i| <= t_clip`, either as a plain indicator or with the triangular
//! approxsign factor. Scaling factors are analytic functions of the real
//! latent weights (or the input), recomputed every forward pass rather than
//! learned.

use crate::error::{Error, Result};
use crate::kernels::{im2col, ConvGeometry};
use crate::tensor::Tensor;

/// Which straight-through rule the backward pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardRule {
    /// Pass the gradient where |r_i| <= t_clip, zero elsewhere.
    SteSign,
    /// Same indicator, times the triangular factor 2 - 2|r_i|.
    ApproxSign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarizeConfig {
    pub backward: BackwardRule,
    pub clip_threshold: f32,
}

impl BinarizeConfig {
    pub fn new(backward: BackwardRule, clip_threshold: f32) -> Result<Self> {
        if clip_threshold <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "clip threshold must be positive, got {clip_threshold}"
            )));
        }
        Ok(BinarizeConfig {
            backward,
            clip_threshold,
        })
    }

    /// Per-element backward factor for input value `r`.
    pub fn factor(&self, r: f32) -> f32 {
        if r.abs() > self.clip_threshold {
            return 0.0;
        }
        match self.backward {
            BackwardRule::SteSign => 1.0,
            BackwardRule::ApproxSign => {
                if r >= 0.0 {
                    2.0 - 2.0 * r
                } else {
                    2.0 + 2.0 * r
                }
            }
        }
    }
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        BinarizeConfig {
            backward: BackwardRule::SteSign,
            clip_threshold: 1.0,
        }
    }
}

/// Which scaling factor (if any) multiplies a binary convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    None,
    /// Per weight filter f: (1/n) * sum |w_f| (Rastegari et al.).
    WeightPerChannel,
    /// One scalar over all weight filters (Zhou et al.).
    WeightScalar,
    /// Per output position: mean |x| over the receptive field (the K map).
    InputK,
}

/// Elementwise sign with sign(0) = +1. -0.0 compares >= 0 and maps to +1.
pub fn sign_forward(r: &Tensor) -> Tensor {
    r.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Straight-through backward: grad through the indicator (and approxsign
/// factor when configured). Gradients are canceled wherever |r_i| > t_clip.
pub fn ste_backward(r: &Tensor, grad_out: &Tensor, cfg: &BinarizeConfig) -> Result<Tensor> {
    if r.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            r.shape(),
            grad_out.shape()
        )));
    }
    let data = r
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&ri, &g)| g * cfg.factor(ri))
        .collect();
    Tensor::new(r.shape().to_vec(), data)
}

/// Analytic weight scaling factors. `w` is filters x k. WeightPerChannel
/// returns one factor per filter (shape filters x 1); WeightScalar returns a
/// single value (shape 1).
pub fn weight_scale(w: &Tensor, mode: ScalingMode) -> Result<Tensor> {
    match mode {
        ScalingMode::WeightPerChannel => w.abs_mean_axis(1),
        ScalingMode::WeightScalar => Ok(Tensor::scalar(w.abs_mean())),
        _ => Err(Error::InvalidConfig(format!(
            "weight_scale expects a weight scaling mode, got {mode:?}"
        ))),
    }
}

/// The K map: per output position, the mean of |x| over the receptive field
/// across channels. Computed as the channel-mean of |x| convolved with a
/// uniform kh x kw kernel (zero padded, matching the real conv padding).
/// Output shape is N,1,oh,ow.
pub fn input_scale_k(x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let s = x.nchw()?;
    let abs_mean = x.map(f32::abs).mean_axis(1)?; // N,1,H,W
    let (oh, ow) = geom.out_dims(s.h, s.w)?;
    let cols = im2col(&abs_mean, geom, 0.0)?;
    let (rows, k) = cols.matrix_dims()?;
    let inv = 1.0 / k as f32;
    let mut out = vec![0.0f32; rows];
    for r in 0..rows {
        out[r] = cols.data()[r * k..(r + 1) * k].iter().sum::<f32>() * inv;
    }
    Tensor::new(vec![s.n, 1, oh, ow], out)
}

/// Multiply a conv output (N,F,oh,ow) by the active scales: a per-filter
/// factor broadcast over the channel axis and/or a K map broadcast over
/// channels. Either argument may be `None`.
pub fn scaled_binary_output(
    conv_out: &Tensor,
    per_filter: Option<&Tensor>,
    k_map: Option<&Tensor>,
) -> Result<Tensor> {
    let s = conv_out.nchw()?;
    let mut out = conv_out.clone();
    if let Some(alpha) = per_filter {
        if alpha.len() != s.c {
            return Err(Error::ShapeMismatch(format!(
                "per-filter scale has {} entries for {} channels",
                alpha.len(),
                s.c
            )));
        }
        let data = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let a = alpha.data()[c];
                let base = (n * s.c + c) * s.h * s.w;
                for v in &mut data[base..base + s.h * s.w] {
                    *v *= a;
                }
            }
        }
    }
    if let Some(k) = k_map {
        let ks = k.nchw()?;
        if ks.n != s.n || ks.c != 1 || ks.h != s.h || ks.w != s.w {
            return Err(Error::ShapeMismatch(format!(
                "K map {:?} does not broadcast over {:?}",
                k.shape(),
                conv_out.shape()
            )));
        }
        let data = out.data_mut();
        for n in 0..s.n {
            let plane = &k.data()[n * s.h * s.w..(n + 1) * s.h * s.w];
            for c in 0..s.c {
                let base = (n * s.c + c) * s.h * s.w;
                for (v, &kk) in data[base..base + s.h * s.w].iter_mut().zip(plane) {
                    *v *= kk;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn row(values: &[f32]) -> Tensor {
        Tensor::new(vec![1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn sign_zero_and_negative_zero_are_plus_one() {
        let t = Tensor::new(vec![4], vec![0.0, -0.3, 2.5, -0.0]).unwrap();
        assert_eq!(sign_forward(&t).data(), &[1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn ste_sign_passes_inside_clip_and_cancels_outside() {
        let cfg = BinarizeConfig::default();
        let r = row(&[0.5, 1.5, -1.0, -2.0]);
        let g = row(&[1.0, 1.0, 1.0, 1.0]);
        let out = ste_backward(&r, &g, &cfg).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn approxsign_factors_match_hand_values() {
        let cfg = BinarizeConfig::new(BackwardRule::ApproxSign, 1.0).unwrap();
        assert_eq!(cfg.factor(0.0), 2.0);
        assert_eq!(cfg.factor(0.5), 1.0);
        assert_eq!(cfg.factor(-0.25), 1.5);
        assert_eq!(cfg.factor(1.2), 0.0);
    }

    #[test]
    fn ste_never_increases_gradient_magnitude() {
        let cfg = BinarizeConfig::default();
        let mut rng = StdRng::seed_from_u64(17);
        let r = row(&(0..256).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        let g = row(&(0..256).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let out = ste_backward(&r, &g, &cfg).unwrap();
        for ((o, gi), ri) in out.data().iter().zip(g.data()).zip(r.data()) {
            assert!(o.abs() <= gi.abs());
            if ri.abs() > 1.0 {
                assert_eq!(*o, 0.0);
            }
        }
    }

    #[test]
    fn approxsign_factor_shape_and_integral() {
        let cfg = BinarizeConfig::new(BackwardRule::ApproxSign, 1.0).unwrap();
        // Peak of 2 at zero, reaching 0 at the clip boundary.
        assert_eq!(cfg.factor(1.0), 0.0);
        assert_eq!(cfg.factor(-1.0), 0.0);
        // Midpoint-rule quadrature over [-1, 1]; both backward rules
        // approximate the same unit jump, so the integral is 2.
        let steps = 20_000;
        let dx = 2.0 / steps as f64;
        let mut integral = 0.0f64;
        for i in 0..steps {
            let x = -1.0 + (i as f64 + 0.5) * dx;
            integral += cfg.factor(x as f32) as f64 * dx;
        }
        assert!((integral - 2.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn weight_scale_hand_arithmetic() {
        let w = row(&[0.5, -1.5, 1.0, -1.0]);
        let s = weight_scale(&w, ScalingMode::WeightPerChannel).unwrap();
        assert_eq!(s.data(), &[1.0]);

        let zero = row(&[0.0, 0.0]);
        assert_eq!(
            weight_scale(&zero, ScalingMode::WeightPerChannel).unwrap().data(),
            &[0.0]
        );

        let two = Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let s = weight_scale(&two, ScalingMode::WeightScalar).unwrap();
        assert_eq!(s.data(), &[2.0]);
        let per = weight_scale(&two, ScalingMode::WeightPerChannel).unwrap();
        assert_eq!(per.data(), &[1.0, 3.0]);
    }

    #[test]
    fn input_scale_k_constant_input() {
        let x = Tensor::filled(vec![1, 3, 5, 5], -2.0);
        let k = input_scale_k(&x, ConvGeometry::new(3, 3, 1, 0)).unwrap();
        assert_eq!(k.shape(), &[1, 1, 3, 3]);
        for v in k.data() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn input_scale_k_one_by_one_is_channel_mean() {
        let x = Tensor::from_nchw(
            Shape::new(1, 2, 2, 2),
            vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0, 7.0, -8.0],
        )
        .unwrap();
        let k = input_scale_k(&x, ConvGeometry::new(1, 1, 1, 0)).unwrap();
        assert_eq!(k.shape(), &[1, 1, 2, 2]);
        assert_eq!(k.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn input_scale_k_matches_receptive_field_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        let x = Tensor::from_nchw(
            Shape::new(2, 3, 6, 6),
            (0..2 * 3 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let geom = ConvGeometry::new(3, 3, 1, 1);
        let k = input_scale_k(&x, geom).unwrap();
        let s = x.nchw().unwrap();
        let (oh, ow) = geom.out_dims(s.h, s.w).unwrap();
        for n in 0..s.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    // Brute-force mean of |x| over channels and window,
                    // zero outside the image.
                    let mut acc = 0.0f32;
                    for c in 0..s.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy + ky) as isize - 1;
                                let ix = (ox + kx) as isize - 1;
                                if iy >= 0 && iy < 6 && ix >= 0 && ix < 6 {
                                    acc += x.data()
                                        [((n * 3 + c) * 6 + iy as usize) * 6 + ix as usize]
                                        .abs();
                                }
                            }
                        }
                    }
                    let want = acc / (3.0 * 9.0);
                    let got = k.data()[(n * oh + oy) * ow + ox];
                    assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn scaled_output_identity_and_per_channel() {
        let y = Tensor::from_nchw(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let unit = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(scaled_binary_output(&y, Some(&unit), None).unwrap(), y);
        let alpha = Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let out = scaled_binary_output(&y, Some(&alpha), None).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 9.0, 12.0]);
        let bad = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
        assert!(scaled_binary_output(&y, Some(&bad), None).is_err());
    }
}
