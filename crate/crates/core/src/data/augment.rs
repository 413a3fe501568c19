//! Paired photometric and geometric augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{binarize, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ranges are symmetric: a jitter of `0.2` draws a factor in `[0.8, 1.2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub rotate_max_deg: f64,
    /// Side of the random crop relative to the image, before resizing back.
    pub crop_fraction: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_max_deg: 15.0,
            crop_fraction: 0.9,
            brightness: 0.2,
            saturation: 0.2,
            contrast: 0.2,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every sample untouched.
    pub fn identity() -> Self {
        Self {
            rotate_max_deg: 0.0,
            crop_fraction: 1.0,
            brightness: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            hflip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("augmentation: {msg}")));
        if !(self.rotate_max_deg >= 0.0 && self.rotate_max_deg <= 180.0) {
            return bad("rotate_max_deg must be in [0, 180]");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must be in (0, 1]");
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("saturation", self.saturation),
            ("contrast", self.contrast),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} jitter must be in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must be in [0, 1]");
        }
        Ok(())
    }
}

/// Planar `[C, H, W]` buffer helper.
struct Planes<'a> {
    data: &'a [f64],
    h: usize,
    w: usize,
}

impl Planes<'_> {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Bilinear sample at continuous pixel coordinates with edge replication.
    fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(c, y0, x0) + (self.at(c, y0, x1) - self.at(c, y0, x0)) * fx;
        let bottom = self.at(c, y1, x0) + (self.at(c, y1, x1) - self.at(c, y1, x0)) * fx;
        top + (bottom - top) * fy
    }

    /// Nearest sample; `None` outside the raster.
    fn nearest(&self, c: usize, y: f64, x: f64) -> Option<f64> {
        let (yi, xi) = (y.round(), x.round());
        (yi >= 0.0 && xi >= 0.0 && (yi as usize) < self.h && (xi as usize) < self.w)
            .then(|| self.at(c, yi as usize, xi as usize))
    }
}

/// Resamples every output pixel `(y, x)` from source coordinates `map(y, x)`.
fn resample(t: &Tensor, map: impl Fn(f64, f64) -> (f64, f64), nearest_zero_fill: bool) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = Planes {
        data: t.data(),
        h,
        w,
    };
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = map(y as f64, x as f64);
        if nearest_zero_fill {
            src.nearest(ch, sy, sx).unwrap_or(0.0)
        } else {
            src.bilinear(ch, sy, sx)
        }
    })
}

/// Rotation about the image centre; bilinear with edge replication, or nearest
/// with zero fill for masks.
fn rotate(t: &Tensor, angle: f64, nearest_zero_fill: bool) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let (s, c) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let source = move |y: f64, x: f64| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + s * dx + c * dy, cx + c * dx - s * dy)
    };
    resample(t, source, nearest_zero_fill)
}

fn hflip(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    Tensor::from_fn(t.shape(), |i| {
        let (row, x) = (i / w, i % w);
        t.data()[row * w + (w - 1 - x)]
    })
    .reshape(&[t.shape()[0], h, w])
    .expect("same shape")
}

fn luma(img: &Tensor, px: usize, plane: usize) -> f64 {
    let d = img.data();
    0.299 * d[px] + 0.587 * d[plane + px] + 0.114 * d[2 * plane + px]
}

fn jitter(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        1.0
    } else {
        1.0 + rng.random_range(-range..=range)
    }
}

/// Augments one sample. Randomness is keyed by `(cfg.seed, index)` only, so the
/// result does not depend on the order in which samples are processed.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5_5a5a_0f0f_f0f0);
    rng.set_stream(index as u64);
    let (h, w) = sample.size();
    let plane = h * w;
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    // Photometric, image only.
    let brightness = jitter(&mut rng, cfg.brightness);
    let contrast = jitter(&mut rng, cfg.contrast);
    let saturation = jitter(&mut rng, cfg.saturation);
    if brightness != 1.0 {
        image = image.map(|v| (v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = (0..plane).map(|px| luma(&image, px, plane)).sum::<f64>() / plane as f64;
        image = image.map(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 {
        let grey: Vec<f64> = (0..plane).map(|px| luma(&image, px, plane)).collect();
        let d = image.data_mut();
        for (i, v) in d.iter_mut().enumerate() {
            let g = grey[i % plane];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }

    // Geometric, shared by image and mask.
    if cfg.rotate_max_deg > 0.0 {
        let angle = rng
            .random_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg)
            .to_radians();
        image = rotate(&image, angle, false);
        mask = rotate(&mask, angle, true);
    }
    if cfg.crop_fraction < 1.0 {
        let (ch, cw) = (
            (h as f64 * cfg.crop_fraction).round().max(1.0),
            (w as f64 * cfg.crop_fraction).round().max(1.0),
        );
        let oy = rng.random_range(0.0..=h as f64 - ch).floor();
        let ox = rng.random_range(0.0..=w as f64 - cw).floor();
        let (sy, sx) = (ch / h as f64, cw / w as f64);
        let source = move |y: f64, x: f64| (oy + (y + 0.5) * sy - 0.5, ox + (x + 0.5) * sx - 0.5);
        image = resample(&image, source, false);
        mask = resample(&mask, source, true);
    }
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        image = hflip(&image);
        mask = hflip(&mask);
    }

    Sample {
        image,
        mask: binarize(&mask),
        id: sample.id.clone(),
    }
}
