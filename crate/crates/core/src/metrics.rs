//! Multi-label AUC, accuracy and F1, and the teacher/student quadrant table.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 64;

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from average ranks in
/// `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] != 0).count();
        pos_rank_sum += avg * group_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScores {
    pub accuracy: Vec<f64>,
    pub f1: Vec<f64>,
}

/// Thresholded per-label accuracy and F1 (`0` when `2TP + FP + FN = 0`).
pub fn accuracy_f1(probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<LabelScores> {
    if probs.shape() != labels.shape() || probs.rank() != 2 {
        return Err(Error::shape(format!(
            "probabilities {:?} and labels {:?} must both be B×C",
            probs.shape(),
            labels.shape()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let mut accuracy = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    for k in 0..c {
        let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..b {
            let pred = probs.data()[i * c + k] >= threshold;
            let truth = labels.data()[i * c + k] >= 0.5;
            match (pred, truth) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        accuracy.push((tp + tn) as f64 / b as f64);
        let denom = 2 * tp + fp + fn_;
        f1.push(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 });
    }
    Ok(LabelScores { accuracy, f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    /// Absent when the split holds a single class for this label.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<LabelMetrics>,
    /// Mean over labels with a defined AUC.
    pub mean_auc: Option<f64>,
    pub mean_accuracy: f64,
    pub mean_f1: f64,
    pub threshold: f64,
    pub num_samples: usize,
}

impl EvalReport {
    /// Builds the report from `B×C` probabilities and labels.
    pub fn from_predictions(class_names: &[String], probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<Self> {
        let scores = accuracy_f1(probs, labels, threshold)?;
        let (b, c) = (probs.shape()[0], probs.shape()[1]);
        if class_names.len() != c {
            return Err(Error::shape(format!("{} class names for {c} columns", class_names.len())));
        }
        let mut rows = Vec::with_capacity(c);
        for k in 0..c {
            let s: Vec<f64> = (0..b).map(|i| probs.data()[i * c + k]).collect();
            let y: Vec<u8> = (0..b).map(|i| u8::from(labels.data()[i * c + k] >= 0.5)).collect();
            let a = match auc(&s, &y) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(why)) => {
                    log::warn!("label {}: {why}; excluded from mean AUC", class_names[k]);
                    None
                }
                Err(e) => return Err(e),
            };
            rows.push(LabelMetrics {
                label: class_names[k].clone(),
                auc: a,
                accuracy: scores.accuracy[k],
                f1: scores.f1[k],
            });
        }
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            mean_auc: (!defined.is_empty()).then(|| mean(&defined)),
            mean_accuracy: mean(&scores.accuracy),
            mean_f1: mean(&scores.f1),
            labels: rows,
            threshold,
            num_samples: b,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-label rows `label,auc,accuracy,f1`; an absent AUC is an empty field.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["label", "auc", "accuracy", "f1"]).map_err(err)?;
        for r in &self.labels {
            w.write_record([
                r.label.clone(),
                r.auc.map(|a| a.to_string()).unwrap_or_default(),
                r.accuracy.to_string(),
                r.f1.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Logits for the given samples, in order, as an `N×C` tensor.
pub fn predict_logits(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let c = model.num_classes();
    let mut out = Vec::with_capacity(indices.len() * c);
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = dataset.batch(chunk)?;
        out.extend_from_slice(model.predict_logits(&images)?.data());
    }
    Tensor::new([indices.len(), c], out)
}

/// Labels of the given samples as an `N×C` tensor of 0/1.
pub fn label_matrix(dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let c = dataset.num_classes();
    let data = indices
        .iter()
        .flat_map(|&i| dataset.samples[i].labels.iter().map(|&l| f64::from(l)))
        .collect();
    Tensor::new([indices.len(), c], data)
}

/// Evaluates `model` on the samples at `indices` (typically the validation
/// split).
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize], threshold: f64) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::config(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let logits = predict_logits(model, dataset, indices)?;
    let probs = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|&z| sigmoid(z)).collect())?;
    EvalReport::from_predictions(&dataset.class_names, &probs, &label_matrix(dataset, indices)?, threshold)
}

/// One sample paired with the class whose prediction is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantItem {
    pub sample: usize,
    pub class: usize,
}

/// One item per (sample, box) among `indices`; the box label is the class of
/// interest. A sample without boxes is a data error.
pub fn class_of_interest_items(dataset: &Dataset, indices: &[usize]) -> Result<Vec<QuadrantItem>> {
    let mut items = Vec::new();
    for &i in indices {
        let s = &dataset.samples[i];
        if s.boxes.is_empty() {
            return Err(Error::Data(format!("sample {} has no class-of-interest annotation", s.id)));
        }
        items.extend(s.boxes.iter().map(|b| QuadrantItem { sample: i, class: b.label }));
    }
    Ok(items)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantCell {
    pub teacher_correct: bool,
    pub student_correct: bool,
    pub count: usize,
    pub percent: f64,
}

/// Row order: Correct/Correct, Correct/Incorrect, Incorrect/Correct,
/// Incorrect/Incorrect (teacher first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantTable {
    pub cells: [QuadrantCell; 4],
    pub num_samples: usize,
}

impl QuadrantTable {
    /// Tallies paired correctness flags.
    pub fn tally(teacher: &[bool], student: &[bool]) -> Result<Self> {
        if teacher.len() != student.len() {
            return Err(Error::shape("teacher and student outcome lists differ in length"));
        }
        let n = teacher.len();
        let mut counts = [0usize; 4];
        for (&t, &s) in teacher.iter().zip(student) {
            counts[usize::from(!t) * 2 + usize::from(!s)] += 1;
        }
        let cells = std::array::from_fn(|i| QuadrantCell {
            teacher_correct: i < 2,
            student_correct: i % 2 == 0,
            count: counts[i],
            percent: if n == 0 { 0.0 } else { 100.0 * counts[i] as f64 / n as f64 },
        });
        Ok(Self { cells, num_samples: n })
    }

    pub fn count(&self, teacher_correct: bool, student_correct: bool) -> usize {
        self.cells[usize::from(!teacher_correct) * 2 + usize::from(!student_correct)].count
    }

    /// Share of teacher-correct items the student also gets right.
    pub fn transfer_rate(&self) -> Option<f64> {
        let cc = self.cells[0].count as f64;
        let ci = self.cells[1].count as f64;
        (cc + ci > 0.0).then(|| cc / (cc + ci))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for QuadrantTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let word = |c: bool| if c { "Correct" } else { "Incorrect" };
        writeln!(f, "{:<10} {:<10} {:>7} {:>8}", "Teacher", "Student", "Count", "Percent")?;
        for c in &self.cells {
            writeln!(
                f,
                "{:<10} {:<10} {:>7} {:>8.1}",
                word(c.teacher_correct),
                word(c.student_correct),
                c.count,
                c.percent
            )?;
        }
        write!(f, "{} items", self.num_samples)
    }
}

/// Judges teacher and student on each item: a model is correct iff
/// `p_class ≥ threshold` equals the ground truth for that class.
pub fn quadrant_analysis(
    teacher: &Model,
    student: &Model,
    dataset: &Dataset,
    items: &[QuadrantItem],
    threshold: f64,
) -> Result<QuadrantTable> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let c = dataset.num_classes();
    if teacher.num_classes() != c || student.num_classes() != c {
        return Err(Error::config("teacher, student and dataset must share the class count"));
    }
    if let Some(it) = items.iter().find(|it| it.sample >= dataset.len() || it.class >= c) {
        return Err(Error::Data(format!("quadrant item {it:?} is out of range")));
    }
    let indices: Vec<usize> = items.iter().map(|it| it.sample).collect();
    let outcomes = |m: &Model| -> Result<Vec<bool>> {
        let logits = predict_logits(m, dataset, &indices)?;
        Ok(items
            .iter()
            .enumerate()
            .map(|(row, it)| {
                let pred = sigmoid(logits.data()[row * c + it.class]) >= threshold;
                pred == (dataset.samples[it.sample].labels[it.class] == 1)
            })
            .collect())
    };
    QuadrantTable::tally(&outcomes(teacher)?, &outcomes(student)?)
}
