//! Training objectives.
//!
//! For a task `t > 1` the margin-dampening objective on a current batch `x`
//! with a class-balanced memory batch `x_m` is
//!
//! ```text
//! lambda * mean(max(0, max_{c < past} p_c(x) - p_y(x) + m)) + CE_t(x, y) + KL(p(x_m) || p_teacher(x_m))
//! ```
//!
//! where `p` is the softmax over every class seen so far, `CE_t` is the
//! cross-entropy of a softmax restricted to the current task's classes and
//! `m = 1 / (classes_seen - 1)`. At `t = 1` only the cross-entropy remains.
//! All batch reductions are arithmetic means.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, dimension, Result};

/// Floor applied to teacher probabilities before taking logs.
pub const TEACHER_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the margin-dampening hinge.
    pub lambda: f64,
    /// Weight of the KL term in the logit-distillation baseline.
    pub alpha: f64,
    /// Fixed margin in place of the adaptive one. Tests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_override: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 1.0,
            margin_override: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(contract(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(contract(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Loss components of one step. `total` is the differentiable handle.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub md: f64,
    pub ce_current: f64,
    pub kl: f64,
    pub total: f64,
    pub total_var: Var,
    /// Number of current-batch samples whose hinge is strictly positive.
    pub hinge_active: usize,
    pub batch: usize,
}

/// Adaptive margin `1 / (classes_seen - 1)`.
pub fn margin_value(total_classes_seen: usize) -> Result<f64> {
    if total_classes_seen < 2 {
        return Err(contract(format!(
            "margin needs at least 2 classes, got {total_classes_seen}"
        )));
    }
    Ok(1.0 / (total_classes_seen - 1) as f64)
}

/// Per-sample hinge `max(0, M_past - p_y + margin)`, shape `[B]`.
pub fn md_per_sample(
    tape: &mut Tape,
    full_probs: Var,
    labels: &[usize],
    past_class_count: usize,
    margin: f64,
) -> Result<Var> {
    let shape = tape.shape(full_probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(dimension(format!(
            "md_loss: probabilities {shape:?} for {} labels",
            labels.len()
        )));
    }
    let classes = shape[1];
    if past_class_count == 0 || past_class_count >= classes {
        return Err(contract(format!(
            "md_loss: {past_class_count} past classes out of {classes}"
        )));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&y| y < past_class_count || y >= classes)
    {
        return Err(contract(format!(
            "md_loss applies to current-task samples only; label {bad} with {past_class_count} past classes"
        )));
    }
    let past = tape.slice(full_probs, 0, past_class_count)?;
    let past_max = tape.row_max(past)?;
    let truth = tape.gather(full_probs, labels)?;
    let gap = tape.sub(past_max, truth)?;
    let shifted = tape.shift(gap, margin);
    Ok(tape.relu(shifted))
}

/// Batch mean of the margin-dampening hinge.
pub fn md_loss(
    tape: &mut Tape,
    full_probs: Var,
    labels: &[usize],
    past_class_count: usize,
    margin: f64,
) -> Result<Var> {
    let per = md_per_sample(tape, full_probs, labels, past_class_count, margin)?;
    tape.mean(per)
}

/// Cross-entropy of the softmax restricted to `current_range`; past-class
/// logits receive no gradient from this term.
pub fn current_task_ce(
    tape: &mut Tape,
    full_logits: Var,
    labels: &[usize],
    current_range: Range<usize>,
) -> Result<Var> {
    let shape = tape.shape(full_logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(dimension(format!(
            "cross-entropy: logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    if current_range.is_empty() || current_range.end > shape[1] {
        return Err(contract(format!(
            "class range {current_range:?} outside {} logits",
            shape[1]
        )));
    }
    if let Some(&bad) = labels.iter().find(|y| !current_range.contains(y)) {
        return Err(contract(format!(
            "label {bad} outside current classes {current_range:?}"
        )));
    }
    let local: Vec<usize> = labels.iter().map(|y| y - current_range.start).collect();
    let block = if current_range.start == 0 && current_range.end == shape[1] {
        full_logits
    } else {
        tape.slice(full_logits, current_range.start, current_range.len())?
    };
    let logp = tape.log_softmax(block)?;
    let picked = tape.gather(logp, &local)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0))
}

/// Cross-entropy over every output class.
pub fn full_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let width = tape.shape(logits).last().copied().unwrap_or(0);
    current_task_ce(tape, logits, labels, 0..width)
}

/// Batch mean of `sum_c p_c ln(p_c / q_c)` with the student `p` first.
/// Teacher probabilities below [`TEACHER_PROB_FLOOR`] are floored.
pub fn kl_regularizer(tape: &mut Tape, student_probs: Var, teacher_probs: &[f64]) -> Result<Var> {
    let shape = tape.shape(student_probs).to_vec();
    if shape.len() != 2 || teacher_probs.len() != shape[0] * shape[1] {
        return Err(dimension(format!(
            "kl: student {shape:?} vs {} teacher values",
            teacher_probs.len()
        )));
    }
    let mut clamped = 0usize;
    let log_teacher: Vec<f64> = teacher_probs
        .iter()
        .map(|&q| {
            if q < TEACHER_PROB_FLOOR {
                clamped += 1;
                TEACHER_PROB_FLOOR.ln()
            } else {
                q.ln()
            }
        })
        .collect();
    if clamped > 0 {
        log::debug!(
            "kl_regularizer: floored {clamped} teacher probabilities at {TEACHER_PROB_FLOOR}"
        );
    }
    let lq = tape.constant(shape.clone(), log_teacher)?;
    let lp = tape.log(student_probs)?;
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(student_probs, diff)?;
    let sum = tape.sum(weighted);
    Ok(tape.scale(sum, 1.0 / shape[0] as f64))
}

/// Memory-side inputs of the regularizer: student logits on the memory batch
/// and the frozen teacher's probabilities on the same samples.
#[derive(Debug, Clone, Copy)]
pub struct MemoryTerm<'a> {
    pub student_logits: Var,
    pub teacher_probs: &'a [f64],
}

/// The piecewise margin-dampening objective.
pub fn compose_md_loss(
    tape: &mut Tape,
    task: usize,
    current_logits: Var,
    labels: &[usize],
    current_range: Range<usize>,
    memory: Option<MemoryTerm<'_>>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let batch = labels.len();
    if task <= 1 {
        let ce = current_task_ce(tape, current_logits, labels, current_range)?;
        let v = tape.scalar(ce);
        return Ok(LossBreakdown {
            md: 0.0,
            ce_current: v,
            kl: 0.0,
            total: v,
            total_var: ce,
            hinge_active: 0,
            batch,
        });
    }
    let memory = memory.ok_or_else(|| contract(format!("task {task} needs a memory batch")))?;
    let classes = tape.shape(current_logits)[1];
    let margin = match config.margin_override {
        Some(m) => m,
        None => margin_value(classes)?,
    };
    let probs = tape.softmax(current_logits)?;
    let per = md_per_sample(tape, probs, labels, current_range.start, margin)?;
    let hinge_active = tape.value(per).iter().filter(|&&v| v > 0.0).count();
    let md = tape.mean(per)?;
    let ce = current_task_ce(tape, current_logits, labels, current_range)?;
    let mem_probs = tape.softmax(memory.student_logits)?;
    let kl = kl_regularizer(tape, mem_probs, memory.teacher_probs)?;

    let weighted = tape.scale(md, config.lambda);
    let partial = tape.add(weighted, ce)?;
    let total = tape.add(partial, kl)?;
    Ok(LossBreakdown {
        md: tape.scalar(md),
        ce_current: tape.scalar(ce),
        kl: tape.scalar(kl),
        total: tape.scalar(total),
        total_var: total,
        hinge_active,
        batch,
    })
}

/// Logit-distillation baseline: full cross-entropy on the current batch plus
/// `alpha` times the teacher KL on the memory batch.
pub fn compose_ld_loss(
    tape: &mut Tape,
    current_logits: Var,
    labels: &[usize],
    memory: Option<MemoryTerm<'_>>,
    alpha: f64,
) -> Result<LossBreakdown> {
    let ce = full_ce(tape, current_logits, labels)?;
    let ce_v = tape.scalar(ce);
    let Some(memory) = memory else {
        return Ok(LossBreakdown {
            md: 0.0,
            ce_current: ce_v,
            kl: 0.0,
            total: ce_v,
            total_var: ce,
            hinge_active: 0,
            batch: labels.len(),
        });
    };
    let mem_probs = tape.softmax(memory.student_logits)?;
    let kl = kl_regularizer(tape, mem_probs, memory.teacher_probs)?;
    let weighted = tape.scale(kl, alpha);
    let total = tape.add(ce, weighted)?;
    Ok(LossBreakdown {
        md: 0.0,
        ce_current: ce_v,
        kl: tape.scalar(kl),
        total: tape.scalar(total),
        total_var: total,
        hinge_active: 0,
        batch: labels.len(),
    })
}
