//! Samples, dataset directories, synthetic data and augmentation.

mod augment;
pub mod netpbm;
mod synth;

use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentConfig};
pub use synth::{synth_dataset, synth_sample, MAX_FOREGROUND, MIN_FOREGROUND};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use netpbm::{Kind, Raster};

/// One image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

/// Masks are foreground where the stored value is at least one half.
pub fn binarize(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

fn raster_to_tensor(r: &Raster) -> Tensor {
    let c = r.kind.channels();
    let (h, w) = (r.height, r.width);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, px) = (i / (h * w), i % (h * w));
        f64::from(r.pixels[px * c + ch]) / 255.0
    })
}

fn tensor_to_raster(t: &Tensor, kind: Kind) -> Result<Raster> {
    let c = kind.channels();
    let (h, w) = match t.shape() {
        [ch, h, w] | [1, ch, h, w] if *ch == c => (*h, *w),
        s => {
            return Err(Error::Config(format!(
                "cannot store tensor of shape {s:?} as a {c}-channel image"
            )))
        }
    };
    let mut pixels = vec![0u8; c * h * w];
    for (i, v) in t.data().iter().enumerate() {
        let (ch, px) = (i / (h * w), i % (h * w));
        pixels[px * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(Raster {
        kind,
        width: w,
        height: h,
        pixels,
    })
}

/// RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(raster_to_tensor(&netpbm::read(path, Kind::Rgb)?))
}

/// Greyscale map as `[1, H, W]` in `[0, 1]`, not binarized.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    Ok(raster_to_tensor(&netpbm::read(path, Kind::Gray)?))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    netpbm::write(path, &tensor_to_raster(image, Kind::Rgb)?)
}

/// Writes a `[1, H, W]` (or `[1, 1, H, W]`) map quantized to 8 bits.
pub fn save_gray(path: &Path, map: &Tensor) -> Result<()> {
    netpbm::write(path, &tensor_to_raster(map, Kind::Gray)?)
}

pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_image(image_path)?;
    let mask = binarize(&load_gray(mask_path)?);
    let dims = |t: &Tensor| (t.shape()[1], t.shape()[2]);
    if dims(&image) != dims(&mask) {
        return Err(Error::DimensionMismatch {
            image: image_path.to_path_buf(),
            mask: mask_path.to_path_buf(),
            image_dims: dims(&image),
            mask_dims: dims(&mask),
        });
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample { image, mask, id })
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.ppm"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}.pgm"))
}

/// Writes `images/<id>.ppm` and `masks/<id>.pgm` under `dir`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d)
            .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    save_image(&image_path(dir, &sample.id), &sample.image)?;
    save_gray(&mask_path(dir, &sample.id), &sample.mask)
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes every sample plus `manifest.txt`, one id per line in the given order.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    samples.iter().try_for_each(|s| save_sample(dir, s))?;
    let manifest: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Sample ids found under `dir/images`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let entries = std::fs::read_dir(&images)
        .map_err(|e| Error::io(format!("listing {}", images.display()), e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", images.display()), e))?
            .path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Ids from `manifest.txt` when present, otherwise the sorted image listing.
pub fn dataset_ids(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => list_ids(dir),
        Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
    }
}

/// Loads every sample of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ids = dataset_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::Config(format!(
            "no images found in {}",
            dir.join("images").display()
        )));
    }
    ids.iter()
        .map(|id| load_sample(&image_path(dir, id), &mask_path(dir, id)))
        .collect()
}

/// Stacks samples into `[N, 3, H, W]` images and `[N, 1, H, W]` masks.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    let (h, w) = samples.first().map(|s| s.size()).unwrap_or((0, 0));
    let n = samples.len();
    Ok((
        Tensor::stack(&images)?.reshape(&[n, 3, h, w])?,
        Tensor::stack(&masks)?.reshape(&[n, 1, h, w])?,
    ))
}
