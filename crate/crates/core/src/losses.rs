//! Hard and soft distillation losses.
//!
//! * `bce`: mean of `−[y·log p + (1−y)·log(1−p)]`.
//! * `fbce`: focal BCE, mean of `−(1−p_s)^γ · log p_s` where `p_s` is the
//!   probability assigned to the true outcome.
//! * `soft_mse`: `T² · mean((σ(z_s/T) − σ(z_t/T))² / T)`, with the teacher side
//!   held constant.
//! * `kd_total`: `α·fbce + (1−α)·soft_mse`.
//!
//! Every reduction is the arithmetic mean over all `B·C` elements.
//! Probabilities must be clamped to `[eps, 1−eps]` before they reach a log;
//! [`probabilities`] does that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Weights and shape parameters of the distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the hard (focal BCE) term; the soft term gets `1 − alpha`.
    pub alpha: f64,
    /// Focal exponent; 0 reduces focal BCE to plain BCE.
    pub gamma: f64,
    /// Softening temperature for the soft term.
    pub temperature: f64,
    /// Probability clamp applied before any log.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
            temperature: 4.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::config(format!("eps must lie in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }
}

/// Sigmoid of `logits`, clamped to `[eps, 1 − eps]`.
pub fn probabilities(tape: &mut Tape, logits: Var, eps: f64) -> Result<Var> {
    let p = tape.sigmoid(logits)?;
    tape.clamp(p, eps, 1.0 - eps)
}

fn check_labels(tape: &Tape, p: Var, y: &Tensor) -> Result<()> {
    if tape.shape(p)? != y.shape() {
        return Err(Error::shape(format!(
            "predictions {:?} and labels {:?} differ in shape",
            tape.shape(p)?,
            y.shape()
        )));
    }
    if let Some(bad) = y.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::domain(format!("labels must be 0 or 1, found {bad}")));
    }
    Ok(())
}

fn one_minus(tape: &mut Tape, x: Var) -> Result<Var> {
    let neg = tape.scale(x, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Mean binary cross-entropy of probabilities `p` against binary labels.
pub fn bce(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    check_labels(tape, p, y)?;
    let yv = tape.constant(y)?;
    let not_y = one_minus(tape, yv)?;
    let log_p = tape.log(p)?;
    let q = one_minus(tape, p)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(yv, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean_all(ll)?;
    tape.scale(mean, -1.0)
}

/// Probability of the true outcome: `p` where `y = 1`, `1 − p` where `y = 0`.
pub fn p_s_transform(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    check_labels(tape, p, y)?;
    let yv = tape.constant(y)?;
    let not_y = one_minus(tape, yv)?;
    let q = one_minus(tape, p)?;
    let pos = tape.mul(yv, p)?;
    let neg = tape.mul(not_y, q)?;
    tape.add(pos, neg)
}

/// Mean focal binary cross-entropy with exponent `gamma`.
pub fn fbce(tape: &mut Tape, p: Var, y: &Tensor, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
    }
    let ps = p_s_transform(tape, p, y)?;
    let rest = one_minus(tape, ps)?;
    let modulating = tape.pow_const(rest, gamma)?;
    let log_ps = tape.log(ps)?;
    let weighted = tape.mul(modulating, log_ps)?;
    let mean = tape.mean_all(weighted)?;
    tape.scale(mean, -1.0)
}

/// Temperature-softened squared difference between student and teacher
/// sigmoid scores. Gradients flow to `student_logits` only.
pub fn soft_mse(tape: &mut Tape, student_logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    if tape.shape(student_logits)? != teacher_logits.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            tape.shape(student_logits)?,
            teacher_logits.shape()
        )));
    }
    let inv_t = 1.0 / temperature;
    let zs = tape.scale(student_logits, inv_t)?;
    let p = tape.sigmoid(zs)?;
    let zt = tape.constant(teacher_logits)?;
    let zt = tape.scale(zt, inv_t)?;
    let q = tape.sigmoid(zt)?;
    let diff = tape.sub(p, q)?;
    let sq = tape.mul(diff, diff)?;
    let per_t = tape.scale(sq, inv_t)?;
    let mean = tape.mean_all(per_t)?;
    tape.scale(mean, temperature * temperature)
}

/// Handles to the three scalars of the distillation loss.
#[derive(Clone, Copy, Debug)]
pub struct KdLoss {
    pub total: Var,
    pub hard: Var,
    pub soft: Var,
}

/// `alpha · fbce(p_student, y) + (1 − alpha) · soft_mse(student, teacher)`.
pub fn kd_total(
    tape: &mut Tape,
    p_student: Var,
    student_logits: Var,
    teacher_logits: &Tensor,
    y: &Tensor,
    cfg: &LossConfig,
) -> Result<KdLoss> {
    cfg.validate()?;
    let hard = fbce(tape, p_student, y, cfg.gamma)?;
    let soft = soft_mse(tape, student_logits, teacher_logits, cfg.temperature)?;
    let total = combine(tape, hard, soft, cfg.alpha)?;
    Ok(KdLoss { total, hard, soft })
}

pub(crate) fn combine(tape: &mut Tape, hard: Var, soft: Var, alpha: f64) -> Result<Var> {
    let h = tape.scale(hard, alpha)?;
    let s = tape.scale(soft, 1.0 - alpha)?;
    tape.add(h, s)
}
