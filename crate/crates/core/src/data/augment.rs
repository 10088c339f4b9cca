use acnet_numeric::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, Sample};
use crate::error::{AcnetError, Result};

/// Resize the shorter side, crop a square window, maybe flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub resize_shorter: usize,
    pub crop: usize,
    pub hflip_prob: f64,
}

impl AugmentPolicy {
    pub const FULL: AugmentPolicy = AugmentPolicy {
        resize_shorter: 512,
        crop: 448,
        hflip_prob: 0.5,
    };
    pub const DESK: AugmentPolicy = AugmentPolicy {
        resize_shorter: 36,
        crop: 32,
        hflip_prob: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize_shorter {
            return Err(AcnetError::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize_shorter
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(AcnetError::Config(format!("flip probability {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::DESK
    }
}

/// `(height, width)` after scaling the shorter side to `shorter`, keeping
/// the aspect ratio (longer side rounded to the nearest pixel).
pub fn resized_extent(h: usize, w: usize, shorter: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((long * shorter) as f64 / short as f64).round() as usize;
    if h <= w {
        (shorter, scale(w, h))
    } else {
        (scale(h, w), shorter)
    }
}

/// Bilinear resampling of `[C, H, W]` with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let &[c, h, w] = image.shape() else {
        panic!("resize_bilinear expects [C, H, W], got {:?}", image.shape());
    };
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let d = image.data();
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, rem) = (i / (out_h * out_w), i % (out_h * out_w));
        let (y0, y1, fy) = ys[rem / out_w];
        let (x0, x1, fx) = xs[rem % out_w];
        let at = |y: usize, x: usize| d[(ch * h + y) * w + x];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let &[c, h, w] = image.shape() else { unreachable!() };
    debug_assert!(top + size <= h && left + size <= w);
    let d = image.data();
    Tensor::from_fn(&[c, size, size], |i| {
        let (ch, rem) = (i / (size * size), i % (size * size));
        d[(ch * h + top + rem / size) * w + left + rem % size]
    })
}

/// Mirrors `[C, H, W]` left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let &[c, h, w] = image.shape() else {
        panic!("flip_horizontal expects [C, H, W], got {:?}", image.shape());
    };
    let d = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    })
}

struct Geometry {
    resized: (usize, usize),
    top: usize,
    left: usize,
    flip: bool,
}

fn apply(sample: &Sample, policy: &AugmentPolicy, geometry: impl FnOnce(usize, usize) -> Geometry) -> Result<Sample> {
    policy.validate()?;
    let &[_, h, w] = sample.image.shape() else {
        return Err(AcnetError::Input(format!("image must be [C, H, W], got {:?}", sample.image.shape())));
    };
    let (rh, rw) = resized_extent(h, w, policy.resize_shorter);
    if rh < policy.crop || rw < policy.crop {
        return Err(AcnetError::Config(format!("{rh}×{rw} image cannot hold a {0}×{0} crop", policy.crop)));
    }
    let g = geometry(rh, rw);
    let resized = resize_bilinear(&sample.image, g.resized.0, g.resized.1);
    let mut image = crop(&resized, g.top, g.left, policy.crop);
    if g.flip {
        image = flip_horizontal(&image);
    }
    let size = policy.crop as f64;
    let glyph = sample.glyph.map(|b| {
        let (sy, sx) = (rh as f64 / h as f64, rw as f64 / w as f64);
        let mut out = BBox {
            top: (b.top * sy - g.top as f64).clamp(0.0, size),
            bottom: (b.bottom * sy - g.top as f64).clamp(0.0, size),
            left: (b.left * sx - g.left as f64).clamp(0.0, size),
            right: (b.right * sx - g.left as f64).clamp(0.0, size),
        };
        if g.flip {
            (out.left, out.right) = (size - out.right, size - out.left);
        }
        out
    });
    Ok(Sample {
        image,
        label: sample.label,
        id: sample.id.clone(),
        glyph,
    })
}

/// Training transform: resize, uniformly random crop window, random flip.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, policy: &AugmentPolicy, rng: &mut R) -> Result<Sample> {
    apply(sample, policy, |rh, rw| {
        let top = rng.random_range(0..=rh - policy.crop);
        let left = rng.random_range(0..=rw - policy.crop);
        let flip = rng.random::<f64>() < policy.hflip_prob;
        Geometry {
            resized: (rh, rw),
            top,
            left,
            flip,
        }
    })
}

/// Evaluation transform: resize and center crop, no flip.
pub fn eval_transform(sample: &Sample, policy: &AugmentPolicy) -> Result<Sample> {
    apply(sample, policy, |rh, rw| Geometry {
        resized: (rh, rw),
        top: (rh - policy.crop) / 2,
        left: (rw - policy.crop) / 2,
        flip: false,
    })
}
