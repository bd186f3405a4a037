//! Deterministic multi-label shape dataset with ground-truth boxes.
//!
//! Class `k` is a fixed shape. Each label is drawn independently; every
//! present shape is painted at a random position and size with intensity
//! `shape_intensity`, overlapping shapes keep the brighter value, Gaussian
//! noise is added everywhere, and pixels are clamped to `[0, 1]` and
//! quantized to the 8-bit grid (so an in-memory dataset equals its on-disk
//! PGM copy exactly).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::write_manifest;
use super::{pgm, BoundingBox, Dataset, GrayImage, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

pub const SHAPE_NAMES: [&str; 6] = ["disk", "square", "cross", "hbar", "diagonal", "ring"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
    HorizontalBar,
    DiagonalStripe,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Cross,
        ShapeKind::HorizontalBar,
        ShapeKind::DiagonalStripe,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        SHAPE_NAMES[self as usize]
    }

    /// Box extent `(w, h)` for a nominal size `s` on an `image`-wide canvas.
    fn extent(self, s: usize, image: usize) -> (usize, usize) {
        match self {
            ShapeKind::HorizontalBar => ((2 * s).min(image), (s / 3).max(2)),
            _ => (s, s),
        }
    }

    /// Whether local pixel `(u, v)` of a `w×h` box is covered.
    fn covers(self, u: usize, v: usize, w: usize, h: usize) -> bool {
        let (cu, cv) = (u as f64 + 0.5, v as f64 + 0.5);
        let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
        let r2 = (cu - hw).powi(2) + (cv - hh).powi(2);
        let thickness = (w as f64 / 3.0).max(2.0);
        match self {
            ShapeKind::Disk => r2 <= hw * hw,
            ShapeKind::Square | ShapeKind::HorizontalBar => true,
            ShapeKind::Cross => (cu - hw).abs() <= thickness / 2.0 || (cv - hh).abs() <= thickness / 2.0,
            ShapeKind::DiagonalStripe => {
                let t = (w as f64 / 4.0).max(2.0);
                (cu - cv).abs() / std::f64::consts::SQRT_2 <= t / 2.0
            }
            ShapeKind::Ring => {
                let inner = 0.55 * hw;
                r2 <= hw * hw && r2 >= inner * inner
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Per-class Bernoulli probability; a single entry applies to every class.
    pub label_probability: Vec<f64>,
    pub noise_sigma: f64,
    pub shape_intensity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_classes: 4,
            image_size: 64,
            label_probability: vec![0.35],
            noise_sigma: 0.1,
            shape_intensity: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::config(format!(
                "num_classes must be in 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size must be at least 16"));
        }
        if self.label_probability.len() != 1 && self.label_probability.len() != self.num_classes {
            return Err(Error::config("label_probability needs one entry or one per class"));
        }
        if let Some(p) = self.label_probability.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::config(format!("label probability {p} outside (0, 1]")));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.shape_intensity) {
            return Err(Error::config("noise_sigma must be >= 0 and shape_intensity in [0, 1]"));
        }
        Ok(())
    }

    fn probability(&self, class: usize) -> f64 {
        if self.label_probability.len() == 1 {
            self.label_probability[0]
        } else {
            self.label_probability[class]
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

fn render_sample(spec: &SyntheticSpec, index: usize, rng: &mut Rng) -> Sample {
    let size = spec.image_size;
    let labels: Vec<u8> = (0..spec.num_classes)
        .map(|k| u8::from(rng.random::<f64>() < spec.probability(k)))
        .collect();
    let mut canvas = vec![0.0f64; size * size];
    let mut boxes = Vec::new();
    let (smin, smax) = (size / 8, size / 4);
    for (k, _) in labels.iter().enumerate().filter(|(_, l)| **l == 1) {
        let shape = ShapeKind::ALL[k];
        let s = rng.random_range(smin..=smax);
        let (w, h) = shape.extent(s, size);
        let x = rng.random_range(0..=size - w);
        let y = rng.random_range(0..=size - h);
        for v in 0..h {
            for u in 0..w {
                if shape.covers(u, v, w, h) {
                    let px = &mut canvas[(y + v) * size + x + u];
                    *px = px.max(spec.shape_intensity);
                }
            }
        }
        boxes.push(BoundingBox { x, y, w, h, label: k });
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let pixels = canvas
        .into_iter()
        .map(|v| f64::from(pgm::quantize(v + noise.sample(rng))) / 255.0)
        .collect();
    Sample {
        id: format!("s{index:05}"),
        image: GrayImage::new(size, size, pixels).expect("square canvas"),
        labels,
        boxes,
    }
}

/// Builds the dataset in memory. Sample `i` depends only on `(spec, seed, i)`.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.num_samples)
        .map(|i| render_sample(spec, i, &mut rng::stream(seed, Stream::Synthetic, i as u64)))
        .collect();
    Ok(Dataset {
        class_names: spec.class_names(),
        samples,
    })
}

/// Writes `images/<id>.pgm` plus the CSV manifest under `dir` and returns the
/// dataset.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let dataset = synthesize(spec, seed)?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in &dataset.samples {
        pgm::write_pgm(&s.image, images.join(format!("{}.pgm", s.id)))?;
    }
    write_manifest(&dataset, dir)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_samples: n,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize(&small(20), 4).unwrap();
        let b = synthesize(&small(20), 4).unwrap();
        let c = synthesize(&small(20), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn certain_labels_give_every_shape() {
        let spec = SyntheticSpec {
            num_samples: 10,
            num_classes: 6,
            label_probability: vec![1.0],
            ..SyntheticSpec::default()
        };
        let ds = synthesize(&spec, 0).unwrap();
        for s in &ds.samples {
            assert_eq!(s.labels, vec![1; 6]);
            assert_eq!(s.boxes.len(), 6);
            for (k, b) in s.boxes.iter().enumerate() {
                assert_eq!(b.label, k);
                assert!(b.fits(64, 64));
            }
        }
    }

    #[test]
    fn every_positive_label_has_one_box() {
        let ds = synthesize(&small(200), 1).unwrap();
        for s in &ds.samples {
            let positives: Vec<usize> = (0..4).filter(|&k| s.labels[k] == 1).collect();
            let boxed: Vec<usize> = s.boxes.iter().map(|b| b.label).collect();
            assert_eq!(positives, boxed);
            assert!(s.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn shapes_are_painted_inside_their_boxes() {
        let spec = SyntheticSpec {
            num_samples: 30,
            noise_sigma: 0.0,
            label_probability: vec![0.5],
            ..SyntheticSpec::default()
        };
        let ds = synthesize(&spec, 2).unwrap();
        for s in &ds.samples {
            for (i, &v) in s.image.pixels.iter().enumerate() {
                let (x, y) = (i % 64, i / 64);
                if v > 0.0 {
                    assert!(s.boxes.iter().any(|b| b.contains(x, y)));
                }
            }
            for b in &s.boxes {
                let bright = (b.y..b.y + b.h)
                    .flat_map(|y| (b.x..b.x + b.w).map(move |x| (x, y)))
                    .filter(|&(x, y)| s.image.get(x, y) > 0.5)
                    .count();
                assert!(bright > 0);
            }
        }
    }

    #[test]
    fn rejects_too_many_classes() {
        let spec = SyntheticSpec {
            num_classes: 7,
            ..SyntheticSpec::default()
        };
        assert!(matches!(synthesize(&spec, 0), Err(Error::Config(_))));
    }
}
