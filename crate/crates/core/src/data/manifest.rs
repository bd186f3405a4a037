//! CSV dataset manifest.
//!
//! ```text
//! id,path,<class_0>,...,<class_{C-1}>,box_label,box_x,box_y,box_w,box_h
//! ```
//!
//! Paths are relative to the manifest's directory. A sample with several
//! boxes occupies several consecutive rows sharing `id`, `path` and labels;
//! a sample without boxes has one row with the five box fields empty.
//! `box_label` is a class index.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{pgm, BoundingBox, Dataset, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const BOX_COLUMNS: [&str; 5] = ["box_label", "box_x", "box_y", "box_w", "box_h"];

/// One sample as listed in a manifest; the image is not read yet.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Resolved against the manifest directory.
    pub path: PathBuf,
    pub labels: Vec<u8>,
    pub boxes: Vec<BoundingBox>,
    /// 1-based CSV line of the sample's first row.
    pub line: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Reads every image and validates boxes against image bounds.
    pub fn load_images(&self) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if !r.path.is_file() {
                return Err(Error::Data(format!(
                    "line {}: image for sample {} not found at {}",
                    r.line,
                    r.id,
                    r.path.display()
                )));
            }
            let image = pgm::read_pgm(&r.path)?;
            if let Some(b) = r.boxes.iter().find(|b| !b.fits(image.width, image.height)) {
                return Err(Error::Data(format!(
                    "line {}: box {b:?} of sample {} exceeds the {}×{} image",
                    r.line, r.id, image.width, image.height
                )));
            }
            samples.push(Sample {
                id: r.id.clone(),
                image,
                labels: r.labels.clone(),
                boxes: r.boxes.clone(),
            });
        }
        Ok(Dataset {
            class_names: self.class_names.clone(),
            samples,
        })
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses a manifest file (or a directory containing `manifest.csv`).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = manifest_path(path.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Parses and then reads all images.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    load_manifest(path)?.load_images()
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 2 + 1 + BOX_COLUMNS.len() || cols[0] != "id" || cols[1] != "path" {
        return Err(parse_err(1, "header must be id,path,<classes...>,box_label,box_x,box_y,box_w,box_h"));
    }
    let n_classes = cols.len() - 2 - BOX_COLUMNS.len();
    if cols[2 + n_classes..] != BOX_COLUMNS {
        return Err(parse_err(1, "header must end with box_label,box_x,box_y,box_w,box_h"));
    }
    let class_names: Vec<String> = cols[2..2 + n_classes].iter().map(|s| s.to_string()).collect();

    let mut records: Vec<ManifestRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty id"));
        }
        let labels = (0..n_classes)
            .map(|k| match &row[2 + k] {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(parse_err(line, format!("label {} must be 0 or 1, got {other:?}", class_names[k]))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let bfields: Vec<&str> = (0..5).map(|i| &row[2 + n_classes + i]).collect();
        let bbox = if bfields.iter().all(|f| f.is_empty()) {
            None
        } else {
            let mut v = [0usize; 5];
            for (slot, (field, name)) in v.iter_mut().zip(bfields.iter().zip(BOX_COLUMNS)) {
                *slot = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("{name} must be a non-negative integer, got {field:?}")))?;
            }
            let [label, x, y, w, h] = v;
            if label >= n_classes {
                return Err(parse_err(line, format!("box_label {label} is not a class index")));
            }
            if w == 0 || h == 0 {
                return Err(parse_err(line, "box width and height must be positive"));
            }
            Some(BoundingBox { x, y, w, h, label })
        };
        let path = base.join(&row[1]);
        match by_id.get(&id) {
            Some(&i) => {
                let rec = &mut records[i];
                if rec.labels != labels || rec.path != path {
                    return Err(parse_err(line, format!("rows for sample {id} disagree on path or labels")));
                }
                match bbox {
                    Some(b) => rec.boxes.push(b),
                    None => return Err(parse_err(line, format!("repeated row for sample {id} has no box"))),
                }
            }
            None => {
                by_id.insert(id.clone(), records.len());
                records.push(ManifestRecord {
                    id,
                    path,
                    labels,
                    boxes: bbox.into_iter().collect(),
                    line,
                });
            }
        }
    }
    Ok(Manifest { class_names, records })
}

/// Writes `dir/manifest.csv` pointing at `images/<id>.pgm`.
pub fn write_manifest(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "path".to_string()];
    header.extend(dataset.class_names.iter().cloned());
    header.extend(BOX_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let mut prefix = vec![s.id.clone(), format!("images/{}.pgm", s.id)];
        prefix.extend(s.labels.iter().map(u8::to_string));
        if s.boxes.is_empty() {
            let mut row = prefix.clone();
            row.extend(std::iter::repeat_n(String::new(), 5));
            w.write_record(&row).map_err(csv_err)?;
        }
        for b in &s.boxes {
            let mut row = prefix.clone();
            row.extend([b.label, b.x, b.y, b.w, b.h].map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
