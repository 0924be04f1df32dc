//! Training-time augmentation: random scale, crop/pad, horizontal flip,
//! photometric distortion, normalization. Masks are only ever resampled
//! with nearest neighbour.

use rand::Rng;

use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::Tensor;

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

pub fn normalize(image: &Tensor<f32>, n: &Normalization) -> Tensor<f32> {
    Tensor::from_fn(image.dims(), |[b, c, y, x]| (image.get([b, c, y, x]) - n.mean[c]) / n.std[c])
}

pub fn denormalize(image: &Tensor<f32>, n: &Normalization) -> Tensor<f32> {
    Tensor::from_fn(image.dims(), |[b, c, y, x]| image.get([b, c, y, x]) * n.std[c] + n.mean[c])
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale_range: (f64, f64),
    /// `(height, width)` of the output.
    pub crop: (usize, usize),
    pub hflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Probability of applying each distortion factor.
    pub distort_prob: f64,
    pub normalization: Normalization,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale_range: (0.5, 2.0),
            crop: (400, 400),
            hflip_prob: 0.5,
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            distort_prob: 0.5,
            normalization: Normalization::default(),
        }
    }
}

impl AugmentParams {
    /// Normalization only.
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentParams {
            scale_range: (1.0, 1.0),
            crop: (height, width),
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..AugmentParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range [{lo}, {hi}] must satisfy 0 < min <= max")));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        for (name, v) in [
            ("hflip_prob", self.hflip_prob),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("distort_prob", self.distort_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

fn nearest_resize(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let src = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, out_h, mask.height);
        for x in 0..out_w {
            data.push(mask.get(sy, src(x, out_w, mask.width)));
        }
    }
    Mask {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Zero-pads bottom/right up to `(h, w)`, then cuts the window at `(oy, ox)`.
fn pad_crop(s: &Sample, h: usize, w: usize, oy: usize, ox: usize) -> Sample {
    let image = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let (sy, sx) = (y + oy, x + ox);
        if sy < s.height() && sx < s.width() {
            s.image.get([0, c, sy, sx])
        } else {
            0.0
        }
    });
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y + oy, x + ox);
            data.push(if sy < s.height() && sx < s.width() { s.mask.get(sy, sx) } else { 0 });
        }
    }
    Sample {
        image,
        mask: Mask {
            height: h,
            width: w,
            data,
        },
    }
}

pub fn hflip(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    let image = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| s.image.get([0, c, y, w - 1 - x]));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(s.mask.get(y, w - 1 - x));
        }
    }
    Sample {
        image,
        mask: Mask {
            height: h,
            width: w,
            data,
        },
    }
}

fn gray(image: &Tensor<f32>, y: usize, x: usize) -> f32 {
    0.299 * image.get([0, 0, y, x]) + 0.587 * image.get([0, 1, y, x]) + 0.114 * image.get([0, 2, y, x])
}

fn factor<R: Rng + ?Sized>(rng: &mut R, strength: f64, prob: f64) -> Option<f32> {
    let apply = rng.random::<f64>() < prob;
    let f = 1.0 - strength + 2.0 * strength * rng.random::<f64>();
    (apply && strength > 0.0).then_some(f as f32)
}

/// Brightness scaling, contrast about the mean grey level, saturation about
/// the per-pixel grey level; each with its own coin flip.
fn distort<R: Rng + ?Sized>(image: &mut Tensor<f32>, p: &AugmentParams, rng: &mut R) {
    let [_, _, h, w] = image.dims();
    let b = factor(rng, p.brightness, p.distort_prob);
    let c = factor(rng, p.contrast, p.distort_prob);
    let s = factor(rng, p.saturation, p.distort_prob);
    if let Some(f) = b {
        *image = image.map(|v| (v * f).clamp(0.0, 1.0));
    }
    if let Some(f) = c {
        let mean = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| gray(image, y, x)).sum::<f32>()
            / (h * w) as f32;
        *image = image.map(|v| ((v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if let Some(f) = s {
        let src = image.clone();
        *image = Tensor::from_fn(src.dims(), |[n, ch, y, x]| {
            let g = gray(&src, y, x);
            ((src.get([n, ch, y, x]) - g) * f + g).clamp(0.0, 1.0)
        });
    }
}

/// Applies the full pipeline. `sample.image` must be in `[0, 1]`; the result
/// is normalized.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, p: &AugmentParams, rng: &mut R) -> Sample {
    let (lo, hi) = p.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (h0, w0) = (sample.height(), sample.width());
    let sh = ((h0 as f64 * scale).round() as usize).max(1);
    let sw = ((w0 as f64 * scale).round() as usize).max(1);
    let scaled = if (sh, sw) == (h0, w0) {
        sample.clone()
    } else {
        Sample {
            image: bilinear_resize(&sample.image, sh, sw),
            mask: nearest_resize(&sample.mask, sh, sw),
        }
    };
    let (ch, cw) = p.crop;
    let oy = rng.random_range(0..=sh.saturating_sub(ch));
    let ox = rng.random_range(0..=sw.saturating_sub(cw));
    let mut out = if (sh, sw, oy, ox) == (ch, cw, 0, 0) {
        scaled
    } else {
        pad_crop(&scaled, ch, cw, oy, ox)
    };
    if rng.random::<f64>() < p.hflip_prob {
        out = hflip(&out);
    }
    distort(&mut out.image, p, rng);
    out.image = normalize(&out.image, &p.normalization);
    out
}
