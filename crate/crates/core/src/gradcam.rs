//! Grad-CAM heatmaps and their comparison with ground-truth boxes.
//!
//! For class `c` with pre-sigmoid logit `y^c` and tap activations `A^k`
//! (`K` maps of `m×n`):
//!
//! ```text
//! weight_k = (1 / (m·n)) · Σ_ij ∂y^c / ∂A^k_ij
//! L^c      = ReLU(Σ_k weight_k · A^k)
//! ```
//!
//! `L^c` is resized to the input resolution with bilinear interpolation
//! (align-corners false) and divided by its maximum.

use std::path::Path;

use crate::data::{quantize, write_pgm, write_ppm, BoundingBox, Dataset, GrayImage};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::nn::Model;
use crate::tensor::{sigmoid, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamResult {
    pub class_index: usize,
    pub weights: Vec<f64>,
    /// `L^c` at tap resolution.
    pub raw_map: GrayImage,
    /// Upsampled and normalized to `[0, 1]`, at input resolution.
    pub heatmap: GrayImage,
    /// Pre-sigmoid logit of `class_index`.
    pub score: f64,
}

/// Tap activations `1×K×m×n` for a single `3×H×W` image.
pub fn tap_activations(model: &Model, image: &Tensor) -> Result<Tensor> {
    let batch = as_batch(image)?;
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, false)?;
    let tap = model.forward_to_tap(&mut tape, &batch, &params)?;
    tape.tensor(tap)
}

/// `y^c` computed from given tap activations.
pub fn class_score_from_tap(model: &Model, tap: &Tensor, class_index: usize) -> Result<f64> {
    check_class(model, class_index)?;
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, false)?;
    let a = tape.constant(tap)?;
    let logits = model.forward_from_tap(&mut tape, a, &params)?;
    Ok(tape.value(logits)?[class_index])
}

/// Grad-CAM starting from tap activations `1×K×m×n`; `target` is the output
/// size of the heatmap.
pub fn gradcam_from_tap(model: &Model, tap: &Tensor, class_index: usize, target: (usize, usize)) -> Result<GradCamResult> {
    check_class(model, class_index)?;
    let &[1, k, m, n] = tap.shape() else {
        return Err(Error::shape(format!("tap activations must be 1×K×m×n, got {:?}", tap.shape())));
    };
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, false)?;
    let a = tape.leaf(tap)?;
    let logits = model.forward_from_tap(&mut tape, a, &params)?;
    let mut onehot = Tensor::zeros([1, model.num_classes()]);
    onehot.data_mut()[class_index] = 1.0;
    let mask = tape.constant(&onehot)?;
    let picked = tape.mul(logits, mask)?;
    let y = tape.sum_all(picked)?;
    let score = tape.item(y)?;
    tape.backward(y)?;
    let grad = tape.grad(a)?.ok_or_else(|| Error::contract("tap received no gradient"))?;

    let area = m * n;
    let weights: Vec<f64> = grad.chunks_exact(area).map(|g| g.iter().sum::<f64>() / area as f64).collect();
    let mut raw = vec![0.0; area];
    for (w, plane) in weights.iter().zip(tap.data().chunks_exact(area)) {
        for (r, &v) in raw.iter_mut().zip(plane) {
            *r += w * v;
        }
    }
    debug_assert_eq!(weights.len(), k);
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let raw_map = GrayImage::new(n, m, raw)?;
    let heatmap = normalize_heatmap(&upsample_bilinear(&raw_map, target.0, target.1)?)?;
    Ok(GradCamResult {
        class_index,
        weights,
        raw_map,
        heatmap,
        score,
    })
}

/// Grad-CAM for one `3×H×W` image.
pub fn gradcam(model: &Model, image: &Tensor, class_index: usize) -> Result<GradCamResult> {
    check_class(model, class_index)?;
    let tap = tap_activations(model, image)?;
    let s = image.shape();
    gradcam_from_tap(model, &tap, class_index, (s[1], s[2]))
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [3, h, w] => Tensor::new([1, 3, *h, *w], image.data().to_vec()),
        [1, 3, _, _] => Ok(image.clone()),
        other => Err(Error::shape(format!("expected a 3×H×W image, got {other:?}"))),
    }
}

fn check_class(model: &Model, class_index: usize) -> Result<()> {
    if class_index >= model.num_classes() {
        return Err(Error::domain(format!(
            "class {class_index} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

/// Bilinear resize to `height×width` with align-corners false: output pixel
/// `i` samples the source at `(i + 0.5)·(src / dst) − 0.5`, clamped to the
/// valid range.
pub fn upsample_bilinear(map: &GrayImage, height: usize, width: usize) -> Result<GrayImage> {
    if height == 0 || width == 0 {
        return Err(Error::domain("upsample target must be non-empty"));
    }
    if map.width == 0 || map.height == 0 {
        return Err(Error::domain("cannot upsample an empty map"));
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(height, map.height);
    let cols = axis(width, map.width);
    let mut out = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx;
            let bottom = map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage::new(width, height, out)
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn normalize_heatmap(map: &GrayImage) -> Result<GrayImage> {
    if map.pixels.iter().any(|v| *v < 0.0 || v.is_nan()) {
        return Err(Error::contract("heatmap values must be non-negative"));
    }
    let max = map.pixels.iter().copied().fold(0.0, f64::max);
    let pixels = if max > 0.0 {
        map.pixels.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; map.pixels.len()]
    };
    GrayImage::new(map.width, map.height, pixels)
}

/// Location of the maximum (first in row-major order on ties).
pub fn peak(map: &GrayImage) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.pixels.iter().enumerate() {
        if v > map.pixels[best] {
            best = i;
        }
    }
    (best % map.width, best / map.width)
}

/// Whether the heatmap's peak falls inside `bbox`, plus the peak `(x, y)`.
pub fn peak_in_box(heatmap: &GrayImage, bbox: &BoundingBox) -> (bool, (usize, usize)) {
    let (x, y) = peak(heatmap);
    (bbox.contains(x, y), (x, y))
}

/// 4-stop linear colormap: blue → cyan → yellow → red at 0, 1/3, 2/3, 1.
pub fn jet(v: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let s = v.clamp(0.0, 1.0) * 3.0;
    let i = (s.floor() as usize).min(2);
    let f = s - i as f64;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

#[derive(Clone, Copy, Debug)]
pub enum ExportMode<'a> {
    Gray,
    /// Colormapped heatmap blended half and half with the grayscale image.
    JetOverlay(&'a GrayImage),
}

/// RGB bytes of the jet overlay.
pub fn overlay_rgb(heatmap: &GrayImage, image: &GrayImage) -> Result<Vec<u8>> {
    if (heatmap.width, heatmap.height) != (image.width, image.height) {
        return Err(Error::shape("heatmap and image sizes differ"));
    }
    Ok(heatmap
        .pixels
        .iter()
        .zip(&image.pixels)
        .flat_map(|(&h, &g)| jet(h).map(|c| quantize(0.5 * c + 0.5 * g)))
        .collect())
}

/// Writes a PGM (gray) or PPM (jet overlay).
pub fn export_heatmap(heatmap: &GrayImage, path: impl AsRef<Path>, mode: ExportMode<'_>) -> Result<()> {
    match mode {
        ExportMode::Gray => write_pgm(heatmap, path),
        ExportMode::JetOverlay(image) => {
            let rgb = overlay_rgb(heatmap, image)?;
            write_ppm(heatmap.width, heatmap.height, &rgb, path)
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalizationReport {
    /// Correctly classified (sample, boxed positive label) pairs examined.
    pub evaluated: usize,
    pub peak_in_box: usize,
    pub rate: Option<f64>,
}

/// Peak-in-box rate over every (sample, box) pair in `indices` whose label
/// the model predicts positive at `DEFAULT_THRESHOLD`.
pub fn localization_rate(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<LocalizationReport> {
    let (mut evaluated, mut hits) = (0, 0);
    for &i in indices {
        let s = &dataset.samples[i];
        if s.boxes.is_empty() {
            continue;
        }
        let image = crate::data::replicate_channels(&s.image);
        let tap = tap_activations(model, &image)?;
        for b in &s.boxes {
            let cam = gradcam_from_tap(model, &tap, b.label, (s.image.height, s.image.width))?;
            if sigmoid(cam.score) < DEFAULT_THRESHOLD {
                continue;
            }
            evaluated += 1;
            if peak_in_box(&cam.heatmap, b).0 {
                hits += 1;
            }
        }
    }
    Ok(LocalizationReport {
        evaluated,
        peak_in_box: hits,
        rate: (evaluated > 0).then(|| hits as f64 / evaluated as f64),
    })
}
