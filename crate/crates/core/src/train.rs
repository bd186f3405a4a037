//! Baseline training and teacher→student distillation.
//!
//! Both loops shuffle the training split once per epoch, run one AdamW step
//! per batch and evaluate on the validation split after every epoch. The
//! final-epoch model is returned; validation is reported, never used for
//! selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, split_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{self, EvalReport, DEFAULT_THRESHOLD};
use crate::nn::Model;
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::tensor::{sigmoid, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub loss: LossConfig,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub opt_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            learning_rate: opt.learning_rate,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            split_fraction: 0.8,
            loss: LossConfig::default(),
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            opt_eps: opt.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config("split_fraction must lie in (0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate and weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.opt_eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and opt_eps must be positive"));
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.opt_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when no label has both classes in the validation split.
    pub val_mean_auc: Option<f64>,
}

/// Loss components of one optimizer step. For baseline training `soft` is 0
/// and `total == hard`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub hard: f64,
    pub soft: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub config: TrainConfig,
    #[serde(skip)]
    pub steps: Vec<StepLoss>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub split: Split,
}

/// Trains `model` on focal BCE alone.
pub fn train_baseline(model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, dataset, cfg, None)
}

/// Trains `student` on the distillation loss against the frozen `teacher`.
///
/// The teacher is only read. Its logits are computed once per sample with
/// no tape; as its parameters never change this equals a fresh teacher
/// forward per batch.
pub fn distill(teacher: &Model, student: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::config(format!(
            "teacher predicts {} classes but student {}",
            teacher.num_classes(),
            student.num_classes()
        )));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let logits = metrics::predict_logits(teacher, dataset, &all)?;
    run(student, dataset, cfg, Some(&logits))
}

/// Teacher logits of the samples at `indices`, gathered from the per-sample
/// cache.
fn gather(cache: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let c = cache.shape()[1];
    let data = indices
        .iter()
        .flat_map(|&i| cache.data()[i * c..(i + 1) * c].iter().copied())
        .collect();
    Tensor::new([indices.len(), c], data)
}

struct BatchLoss {
    total: f64,
    hard: f64,
    soft: f64,
}

/// Builds the training objective on `tape`; returns the root and its parts.
fn objective(
    tape: &mut Tape,
    model: &Model,
    images: &Tensor,
    labels: &Tensor,
    teacher_logits: Option<&Tensor>,
    cfg: &LossConfig,
) -> Result<(crate::nn::Forward, crate::tensor::Var, BatchLoss)> {
    let fwd = model.forward(tape, images, true)?;
    let p = losses::probabilities(tape, fwd.logits, cfg.eps)?;
    let (root, parts) = match teacher_logits {
        None => {
            let hard = losses::fbce(tape, p, labels, cfg.gamma)?;
            let h = tape.item(hard)?;
            (hard, BatchLoss { total: h, hard: h, soft: 0.0 })
        }
        Some(t) => {
            let kd = losses::kd_total(tape, p, fwd.logits, t, labels, cfg)?;
            let parts = BatchLoss {
                total: tape.item(kd.total)?,
                hard: tape.item(kd.hard)?,
                soft: tape.item(kd.soft)?,
            };
            (kd.total, parts)
        }
    };
    Ok((fwd, root, parts))
}

fn run(mut model: Model, dataset: &Dataset, cfg: &TrainConfig, teacher: Option<&Tensor>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::config(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let start = Instant::now();
    let split = split_dataset(dataset, cfg.split_fraction, cfg.seed)?;
    let opt = cfg.optimizer();
    let mut state = OptimizerState::new(model.params());
    let mut tape = Tape::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        let batches = batch_iter(&split.train, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut weighted = 0.0;
        for (b, indices) in batches.iter().enumerate() {
            let (images, labels) = dataset.batch(indices)?;
            let t_logits = teacher.map(|t| gather(t, indices)).transpose()?;
            tape.reset();
            let (fwd, root, parts) = objective(&mut tape, &model, &images, &labels, t_logits.as_ref(), &cfg.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {b}"),
                });
            }
            tape.backward(root)?;
            model.store_grads(&tape, &fwd)?;
            adamw_step(model.params_mut(), &mut state, &opt)?;
            weighted += parts.total * indices.len() as f64;
            steps.push(StepLoss {
                epoch,
                batch: b,
                total: parts.total,
                hard: parts.hard,
                soft: parts.soft,
            });
        }
        let train_loss = weighted / split.train.len() as f64;
        let (val_loss, eval) = validate(&model, dataset, &split.val, teacher, cfg)?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val mean AUC {}",
            eval.mean_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_mean_auc: eval.mean_auc,
        });
    }
    for p in model.params_mut() {
        p.tensor.clear_grad();
    }
    Ok(TrainOutcome {
        model,
        report: TrainReport {
            epochs,
            wall_seconds: start.elapsed().as_secs_f64(),
            config: cfg.clone(),
            steps,
        },
        split,
    })
}

/// Validation loss and report from a single forward pass over `indices`.
fn validate(model: &Model, dataset: &Dataset, indices: &[usize], teacher: Option<&Tensor>, cfg: &TrainConfig) -> Result<(f64, EvalReport)> {
    let logits = metrics::predict_logits(model, dataset, indices)?;
    let labels = metrics::label_matrix(dataset, indices)?;
    let mut tape = Tape::new();
    let z = tape.constant(&logits)?;
    let p = losses::probabilities(&mut tape, z, cfg.loss.eps)?;
    let loss = match teacher {
        None => losses::fbce(&mut tape, p, &labels, cfg.loss.gamma)?,
        Some(t) => losses::kd_total(&mut tape, p, z, &gather(t, indices)?, &labels, &cfg.loss)?.total,
    };
    let val_loss = tape.item(loss)?;
    if !val_loss.is_finite() {
        return Err(Error::NonFinite {
            context: "validation loss".into(),
        });
    }
    let probs = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|&v| sigmoid(v)).collect())?;
    let report = EvalReport::from_predictions(&dataset.class_names, &probs, &labels, DEFAULT_THRESHOLD)?;
    Ok((val_loss, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::nn::ModelPreset;

    fn tiny_data(n: usize) -> Dataset {
        synthesize(
            &SyntheticSpec {
                num_samples: n,
                image_size: 16,
                ..SyntheticSpec::default()
            },
            0,
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = tiny_data(20);
        let m = Model::build(ModelPreset::TinyStudent, 4, 16, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(1)
        };
        let out = train_baseline(m.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.model.param_bytes(), m.param_bytes());
        assert_eq!(out.report.epochs.len(), 1);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let ds = tiny_data(24);
        let m = Model::build(ModelPreset::TinyStudent, 4, 16, 3).unwrap();
        let a = train_baseline(m.clone(), &ds, &quick(2)).unwrap();
        let b = train_baseline(m, &ds, &quick(2)).unwrap();
        assert_eq!(a.report.steps, b.report.steps);
        assert_eq!(a.report.epochs, b.report.epochs);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn distill_keeps_teacher_and_accounts_components() {
        let ds = tiny_data(24);
        let teacher = Model::build(ModelPreset::TinyTeacher, 4, 16, 1).unwrap();
        let before = teacher.param_bytes();
        let student = Model::build(ModelPreset::TinyStudent, 4, 16, 2).unwrap();
        let cfg = quick(2);
        let out = distill(&teacher, student, &ds, &cfg).unwrap();
        assert_eq!(teacher.param_bytes(), before);
        let a = cfg.loss.alpha;
        for s in &out.report.steps {
            assert!((s.total - (a * s.hard + (1.0 - a) * s.soft)).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_teacher_gives_zero_initial_soft_loss() {
        let ds = tiny_data(16);
        let m = Model::build(ModelPreset::TinyStudent, 4, 16, 5).unwrap();
        let cfg = TrainConfig {
            loss: LossConfig {
                alpha: 0.0,
                ..LossConfig::default()
            },
            ..quick(1)
        };
        let out = distill(&m, m.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.report.steps[0].soft, 0.0);
        assert_eq!(out.report.steps[0].total, 0.0);
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let ds = tiny_data(16);
        let teacher = Model::build(ModelPreset::TinyTeacher, 3, 16, 1).unwrap();
        let student = Model::build(ModelPreset::TinyStudent, 4, 16, 2).unwrap();
        assert!(matches!(distill(&teacher, student, &ds, &quick(1)), Err(Error::Config(_))));
    }

    #[test]
    fn report_json_has_documented_keys() {
        let ds = tiny_data(16);
        let m = Model::build(ModelPreset::TinyStudent, 4, 16, 0).unwrap();
        let out = train_baseline(m, &ds, &quick(1)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.report.to_json().unwrap()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["config", "epochs", "wall_seconds"]);
        let e = &v["epochs"][0];
        for k in ["epoch", "train_loss", "val_loss", "val_mean_auc"] {
            assert!(e.get(k).is_some(), "{k}");
        }
    }
}
