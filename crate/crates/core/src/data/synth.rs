//! Deterministic synthetic scenes whose classes differ only in small local
//! motifs stamped over a shared cluttered background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Dataset, LabelSet, Provenance, Sample};
use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub motif_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            images_per_class: 75,
            image_size: 48,
            motif_size: 12,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!(
                "synth: need >= 2 classes, got {}",
                self.classes
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::invalid("synth: images_per_class must be >= 1"));
        }
        if self.motif_size < 2 || self.motif_size >= self.image_size {
            return Err(Error::invalid(format!(
                "synth: motif_size {} must be in [2, image_size {})",
                self.motif_size, self.image_size
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::invalid(format!(
                "synth: noise_level {} must be >= 0",
                self.noise_level
            )));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("class_{class:02}")
    }
}

/// The exact patch stamped for `class`: an oriented grating with a
/// class-specific orientation, spatial frequency and tint.
pub fn motif_template(cfg: &SynthConfig, class: usize) -> Image {
    let n = cfg.motif_size;
    let angle = PI * class as f64 / cfg.classes as f64;
    let cycles = 1.5 + (class % 2) as f64;
    let hue = 2.0 * PI * class as f64 / cfg.classes as f64;
    let tint = [
        0.8 + 0.2 * hue.cos(),
        0.8 + 0.2 * (hue - 2.0 * PI / 3.0).cos(),
        0.8 + 0.2 * (hue + 2.0 * PI / 3.0).cos(),
    ];
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = Image::filled(n, n, 3, 0.0);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 - (n - 1) as f64 / 2.0, y as f64 - (n - 1) as f64 / 2.0);
            let wave = 0.5 + 0.5 * (2.0 * PI * cycles * (u * ca + v * sa) / n as f64).sin();
            for (c, t) in tint.iter().enumerate() {
                img.set(x, y, c, 0.1 + 0.8 * wave * t);
            }
        }
    }
    img
}

fn paint_background(img: &mut Image, rng: &mut impl Rng) {
    let size = img.width();
    let base: f64 = rng.random_range(0.3..0.6);
    let (gx, gy): (f64, f64) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    for y in 0..size {
        for x in 0..size {
            let v = base + gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
            for c in 0..3 {
                img.set(x, y, c, v);
            }
        }
    }
    // clutter: random flat rectangles and thin strokes shared by all classes
    for _ in 0..rng.random_range(4..8) {
        let w = rng.random_range(2..=size / 3);
        let h = rng.random_range(2..=size / 3);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for (c, &v) in color.iter().enumerate() {
                    img.set(x, y, c, 0.5 * img.get(x, y, c) + 0.5 * v);
                }
            }
        }
    }
    for _ in 0..rng.random_range(2..5) {
        let horizontal: bool = rng.random();
        let at = rng.random_range(0..size);
        let (from, len) = (rng.random_range(0..size / 2), rng.random_range(size / 4..size / 2));
        let v: f64 = rng.random();
        for t in from..(from + len).min(size) {
            let (x, y) = if horizontal { (t, at) } else { (at, t) };
            for c in 0..3 {
                img.set(x, y, c, v);
            }
        }
    }
}

fn stamp(img: &mut Image, motif: &Image, x0: usize, y0: usize) {
    for y in 0..motif.height() {
        for x in 0..motif.width() {
            for c in 0..3 {
                img.set(x0 + x, y0 + y, c, motif.get(x, y, c));
            }
        }
    }
}

/// Generates `classes * images_per_class` images. The result is a pure
/// function of `cfg`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(format!("synth noise: {e}")))?;
    let motifs: Vec<Image> = (0..cfg.classes).map(|c| motif_template(cfg, c)).collect();
    let labels = LabelSet::new((0..cfg.classes).map(|c| cfg.class_name(c)).collect())?;
    let size = cfg.image_size;
    let mut items = Vec::with_capacity(cfg.classes * cfg.images_per_class);
    for (class, motif) in motifs.iter().enumerate() {
        for i in 0..cfg.images_per_class {
            let mut img = Image::filled(size, size, 3, 0.0);
            paint_background(&mut img, &mut rng);
            for _ in 0..rng.random_range(2..=4) {
                let x0 = rng.random_range(0..=size - cfg.motif_size);
                let y0 = rng.random_range(0..=size - cfg.motif_size);
                stamp(&mut img, motif, x0, y0);
            }
            if cfg.noise_level > 0.0 {
                for y in 0..size {
                    for x in 0..size {
                        for c in 0..3 {
                            let v = img.get(x, y, c) + noise.sample(&mut rng);
                            img.set(x, y, c, v);
                        }
                    }
                }
            }
            items.push(Sample {
                image: img,
                label: class,
                path: format!("{}/{i:04}.ppm", cfg.class_name(class)),
            });
        }
    }
    Dataset::new(items, labels, Provenance::Synthetic(cfg.clone()))
}
