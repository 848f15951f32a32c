//! Dataset synthesis and ingestion: deterministic noisy/clean pairs.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::io::pgm;
use crate::rng::seeded_rng;
use crate::tensor::RealTensor;

/// One clean/noisy pair, (H, W) tensors in [0, 1] pixel units (the noisy
/// side may exceed the range; it is left unclamped so the noise statistics
/// stay exact).
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub clean: RealTensor,
    pub noisy: RealTensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

/// Piecewise-smooth synthetic image: a soft background gradient with random
/// disks and rectangles at distinct intensities.
pub fn synthetic_image(size: usize, rng: &mut impl Rng) -> RealTensor {
    let n = size as f64;
    let mut img = RealTensor::zeros(&[size, size]);
    // background gradient with a random direction
    let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (ang.cos(), ang.sin());
    let base: f64 = rng.gen_range(0.25..0.5);
    let span: f64 = rng.gen_range(0.05..0.2);
    for y in 0..size {
        for x in 0..size {
            let t = (gx * x as f64 + gy * y as f64) / n;
            img.data_mut()[y * size + x] = base + span * t;
        }
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let value: f64 = rng.gen_range(0.1..0.9);
        if rng.gen_bool(0.5) {
            let cy: f64 = rng.gen_range(0.0..n);
            let cx: f64 = rng.gen_range(0.0..n);
            let r: f64 = rng.gen_range(n / 12.0..n / 4.0);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if d2 < r * r {
                        img.data_mut()[y * size + x] = value;
                    }
                }
            }
        } else {
            let y0 = rng.gen_range(0..size);
            let x0 = rng.gen_range(0..size);
            let hh = rng.gen_range(size / 8..size / 2);
            let ww = rng.gen_range(size / 8..size / 2);
            for y in y0..(y0 + hh).min(size) {
                for x in x0..(x0 + ww).min(size) {
                    img.data_mut()[y * size + x] = value;
                }
            }
        }
    }
    img
}

/// Additive Gaussian noise field with std `sigma`.
pub fn gaussian_noise(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> RealTensor {
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if sigma > 0.0 { normal.sample(rng) } else { 0.0 })
        .collect();
    RealTensor::from_vec(shape, data).expect("noise shape")
}

fn add_noise(clean: &RealTensor, sigma: f64, rng: &mut impl Rng) -> ImagePair {
    let noise = gaussian_noise(clean.shape(), sigma, rng);
    ImagePair {
        noisy: clean.add(&noise).expect("matching shapes"),
        clean: clean.clone(),
    }
}

fn load_directory(dir: &Path, size: usize, count: usize) -> Result<Vec<RealTensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .pgm images in {}",
            dir.display()
        )));
    }
    if paths.len() < count {
        return Err(Error::Data(format!(
            "{} images in {}, need {count}",
            paths.len(),
            dir.display()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for path in paths.iter().take(count) {
        let img = pgm::load_pgm(path)?;
        if img.height < size || img.width < size {
            return Err(Error::Data(format!(
                "{}: {}x{} is smaller than the configured extent {size}",
                path.display(),
                img.height,
                img.width
            )));
        }
        // centered crop to the configured power-of-two extent
        let y0 = (img.height - size) / 2;
        let x0 = (img.width - size) / 2;
        let mut out = RealTensor::zeros(&[size, size]);
        for y in 0..size {
            for x in 0..size {
                out.data_mut()[y * size + x] =
                    img.pixels.data()[(y0 + y) * img.width + x0 + x];
            }
        }
        images.push(out);
    }
    Ok(images)
}

/// Build the deterministic train/val split for a config. Synthetic images
/// are generated when no dataset directory is configured; noise fields are
/// seeded per image, so the dataset is identical across runs of the same
/// (config, seed).
pub fn make_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let total = cfg.train_images + cfg.val_images;
    let cleans: Vec<RealTensor> = match &cfg.dataset {
        Some(dir) => load_directory(dir, cfg.image_size, total)?,
        None => (0..total)
            .map(|i| {
                let mut rng = seeded_rng(cfg.seed, &format!("synthetic-image-{i}"));
                synthetic_image(cfg.image_size, &mut rng)
            })
            .collect(),
    };
    let used_train = ((cfg.train_images as f64 * cfg.data_fraction).ceil() as usize)
        .clamp(1, cfg.train_images);
    let mut train = Vec::with_capacity(used_train);
    for (i, clean) in cleans.iter().take(used_train).enumerate() {
        let mut rng = seeded_rng(cfg.seed, &format!("noise-train-{i}"));
        train.push(add_noise(clean, cfg.sigma, &mut rng));
    }
    let mut val = Vec::with_capacity(cfg.val_images);
    for (i, clean) in cleans.iter().skip(cfg.train_images).enumerate() {
        let mut rng = seeded_rng(cfg.seed, &format!("noise-val-{i}"));
        val.push(add_noise(clean, cfg.sigma, &mut rng));
    }
    Ok(Dataset { train, val })
}

/// Cut non-overlapping square tiles out of an image.
pub fn tiles(image: &RealTensor, tile: usize) -> Vec<RealTensor> {
    let (h, w) = image.hw().expect("image rank");
    let mut out = Vec::new();
    for ty in 0..h / tile {
        for tx in 0..w / tile {
            let mut t = RealTensor::zeros(&[tile, tile]);
            for y in 0..tile {
                for x in 0..tile {
                    t.data_mut()[y * tile + x] =
                        image.data()[(ty * tile + y) * w + tx * tile + x];
                }
            }
            out.push(t);
        }
    }
    out
}
