//! Images, labels, bounding boxes and batching.

mod manifest;
mod pgm;
mod synthetic;

pub use manifest::{load_dataset, load_manifest, write_manifest, Manifest, ManifestRecord, MANIFEST_FILE};
pub use pgm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, quantize, read_pgm, write_pgm, write_ppm};
pub use synthetic::{generate_synthetic, synthesize, ShapeKind, SyntheticSpec, SHAPE_NAMES};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Single-channel image with row-major pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Axis-aligned box in input-pixel units; covers columns `x..x+w` and rows
/// `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub label: usize,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub labels: Vec<u8>,
    pub boxes: Vec<BoundingBox>,
}

/// In-memory labelled dataset. Column order of `class_names` is the class
/// index order used everywhere else.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Side length of the (square) images, taken from the first sample.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.width)
    }

    /// Images as `B×3×H×W` (channels replicated) and labels as `B×C`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let first = indices
            .first()
            .map(|&i| &self.samples[i].image)
            .ok_or_else(|| Error::config("empty batch"))?;
        let (w, h) = (first.width, first.height);
        let c = self.num_classes();
        let mut images = Vec::with_capacity(indices.len() * 3 * w * h);
        let mut labels = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::config(format!("sample index {i} out of range")))?;
            if s.image.width != w || s.image.height != h {
                return Err(Error::shape(format!("sample {} has a different image size", s.id)));
            }
            for _ in 0..3 {
                images.extend_from_slice(&s.image.pixels);
            }
            labels.extend(s.labels.iter().map(|&l| f64::from(l)));
        }
        Ok((
            Tensor::new([indices.len(), 3, h, w], images)?,
            Tensor::new([indices.len(), c], labels)?,
        ))
    }

    /// Samples carrying at least one box, taken from `indices` in order.
    pub fn annotated(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|&i| !self.samples[i].boxes.is_empty())
            .collect()
    }
}

/// Copies a grayscale image into all three channels: `H×W → 3×H×W`.
pub fn replicate_channels(image: &GrayImage) -> Tensor {
    let mut data = Vec::with_capacity(3 * image.pixels.len());
    for _ in 0..3 {
        data.extend_from_slice(&image.pixels);
    }
    Tensor::new([3, image.height, image.width], data).expect("sizes agree")
}

/// Disjoint train/validation index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle of `0..n`, then the first `floor(n·fraction)` indices
/// become the training set.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::config("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n_train = (n as f64 * fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::config(format!(
            "splitting {n} samples at {fraction} leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split, 0));
    let val = order.split_off(n_train);
    Ok(Split { train: order, val })
}

pub fn split_dataset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    split_indices(dataset.len(), fraction, seed)
}

/// Per-epoch shuffled batches over `indices`; the last batch may be short.
pub fn batch_iter(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, Stream::Batch, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
