use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::StereoSample;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Ranges of the random photometric and geometric augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale: [f64; 2],
    pub flip_probability: f64,
    /// Per-channel gain drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Per-channel offset drawn from `± brightness`.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: [0.67, 1.5],
            flip_probability: 0.5,
            contrast: 0.1,
            brightness: 0.1,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub y0: usize,
    pub x0: usize,
    pub flip: bool,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl AugmentParams {
    /// No-op parameters for an image already at crop size.
    pub fn identity() -> Self {
        Self { scale: 1.0, y0: 0, x0: 0, flip: false, gain: [1.0; 3], bias: [0.0; 3] }
    }

    /// Draws parameters for an `h×w` sample cropped to `crop`. The lower end of the scale
    /// range is raised when needed so the crop always fits.
    pub fn sample(rng: &mut impl Rng, cfg: &AugmentConfig, (h, w): (usize, usize), crop: (usize, usize)) -> Result<Self> {
        if !cfg.enabled {
            if (h, w) != crop {
                return Err(invalid(format!("augmentation disabled but sample {h}×{w} differs from crop {crop:?}")));
            }
            return Ok(Self::identity());
        }
        let lo = cfg.scale[0].max(crop.0 as f64 / h as f64).max(crop.1 as f64 / w as f64);
        let hi = cfg.scale[1];
        if lo > hi {
            return Err(invalid(format!("crop {crop:?} does not fit a {h}×{w} sample scaled by at most {hi}")));
        }
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (sh, sw) = scaled_size((h, w), scale);
        let (sh, sw) = (sh.max(crop.0), sw.max(crop.1));
        let y0 = rng.gen_range(0..=sh - crop.0);
        let x0 = rng.gen_range(0..=sw - crop.1);
        let flip = rng.gen::<f64>() < cfg.flip_probability;
        let mut gain = [1.0; 3];
        let mut bias = [0.0; 3];
        for c in 0..3 {
            if cfg.contrast > 0.0 {
                gain[c] = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
            }
            if cfg.brightness > 0.0 {
                bias[c] = rng.gen_range(-cfg.brightness..=cfg.brightness);
            }
        }
        Ok(Self { scale, y0, x0, flip, gain, bias })
    }
}

fn scaled_size((h, w): (usize, usize), s: f64) -> (usize, usize) {
    (((h as f64) * s).round().max(1.0) as usize, ((w as f64) * s).round().max(1.0) as usize)
}

fn resize_nearest<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, h0, w0) = t.dims4()?;
    Ok(Tensor::from_fn(vec![n, c, h, w], |i| {
        let x = i % w;
        let y = i / w % h;
        let nc = i / (w * h);
        let sx = (((x as f64 + 0.5) * w0 as f64 / w as f64) as usize).min(w0 - 1);
        let sy = (((y as f64 + 0.5) * h0 as f64 / h as f64) as usize).min(h0 - 1);
        t.data()[(nc * h0 + sy) * w0 + sx]
    }))
}

fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, (h, w): (usize, usize)) -> Result<Tensor<T>> {
    t.narrow(2, y0, h)?.narrow(3, x0, w)
}

fn jitter<T: Scalar>(img: &Tensor<T>, gain: &[f64; 3], bias: &[f64; 3]) -> Result<Tensor<T>> {
    let (_, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(invalid("colour jitter expects three channels"));
    }
    let hw = h * w;
    Ok(Tensor::from_fn(img.shape().to_vec(), |i| {
        let ch = i / hw % 3;
        let v = img.data()[i];
        if gain[ch] == 1.0 && bias[ch] == 0.0 {
            v
        } else {
            (T::lit(gain[ch]) * v + T::lit(bias[ch])).max(T::zero()).min(T::one())
        }
    }))
}

/// Rescales both views and the ground truth (disparities scale with the width), crops, optionally
/// mirrors with the views swapped, and applies the same colour jitter to both views.
pub fn augment<T: Scalar>(sample: &StereoSample<T>, p: &AugmentParams, crop_size: (usize, usize)) -> Result<StereoSample<T>> {
    let (_, _, h, w) = sample.left.dims4()?;
    let mut s = sample.clone();
    if p.scale != 1.0 {
        let (sh, sw) = scaled_size((h, w), p.scale);
        let k = T::lit(sw as f64 / w as f64);
        s.left = sample.left.resize_bilinear(sh, sw)?;
        s.right = sample.right.resize_bilinear(sh, sw)?;
        s.disparity = resize_nearest(&sample.disparity, sh, sw)?.map(|d| d * k);
        s.disparity_right = resize_nearest(&sample.disparity_right, sh, sw)?.map(|d| d * k);
        s.validity = resize_nearest(&sample.validity, sh, sw)?;
    }
    let (_, _, sh, sw) = s.left.dims4()?;
    if crop_size.0 + p.y0 > sh || crop_size.1 + p.x0 > sw {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_size:?} at ({}, {}) exceeds the scaled {sh}×{sw} image",
            p.y0, p.x0
        )));
    }
    if (sh, sw) != crop_size {
        for t in [&mut s.left, &mut s.right, &mut s.disparity, &mut s.disparity_right, &mut s.validity] {
            *t = crop(t, p.y0, p.x0, crop_size)?;
        }
    }
    if p.flip {
        s = s.mirrored();
    }
    s.left = jitter(&s.left, &p.gain, &p.bias)?;
    s.right = jitter(&s.right, &p.gain, &p.bias)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneConfig, SceneSpec};
    use crate::CameraRig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(d: f64) -> StereoSample<f64> {
        let spec = SceneSpec { height: 16, width: 32, ground_top: d, ground_bottom: d, boxes: vec![], texture_seed: 4 };
        generate(&spec, CameraRig::default(), (1.0, 24.0)).unwrap()
    }

    #[test]
    fn identity_parameters() {
        let s = sample(3.0);
        assert_eq!(augment(&s, &AugmentParams::identity(), (16, 32)).unwrap(), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let cfg = SceneConfig { height: 16, width: 32, ..Default::default() };
        let s: StereoSample<f64> = generate(&cfg.sample_spec(3), cfg.rig().unwrap(), (1.0, 24.0)).unwrap();
        let p = AugmentParams { flip: true, ..AugmentParams::identity() };
        let once = augment(&s, &p, (16, 32)).unwrap();
        assert_eq!(once.left, s.right.flip_w());
        assert_eq!(augment(&once, &p, (16, 32)).unwrap(), s);
    }

    #[test]
    fn scaling_scales_disparity() {
        let s = sample(4.0);
        let p = AugmentParams { scale: 1.5, ..AugmentParams::identity() };
        let out = augment(&s, &p, (16, 32)).unwrap();
        assert!(out.disparity.data().iter().all(|&d| d == 6.0));
        assert_eq!(out.left.shape(), &[1, 3, 16, 32]);
    }

    #[test]
    fn oversized_crop_fails() {
        let s = sample(2.0);
        let p = AugmentParams { scale: 0.67, ..AugmentParams::identity() };
        assert!(augment(&s, &p, (16, 32)).is_err());
        let cfg = AugmentConfig { scale: [0.5, 0.9], ..Default::default() };
        assert!(AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(0), &cfg, (16, 32), (16, 32)).is_err());
    }

    #[test]
    fn random_draws_fit_and_preserve_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sample(2.0);
        let cfg = AugmentConfig::default();
        for _ in 0..20 {
            let p = AugmentParams::sample(&mut rng, &cfg, (16, 32), (16, 32)).unwrap();
            assert!(p.scale >= 1.0 && p.scale <= 1.5);
            let out = augment(&s, &p, (16, 32)).unwrap();
            assert!(out.left.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.disparity.data().iter().all(|&d| (2.0..=3.0 + 1e-9).contains(&d)));
        }
    }
}
