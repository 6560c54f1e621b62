//! Derived measurements: accuracy matrix summaries, memory overhead,
//! gate-head growth, head timing, and the replay/drift diagnostics.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_first, softmax_rows, Tape};
use crate::error::{contract, Result};
use crate::losses::TEACHER_PROB_FLOOR;
use crate::models::{ContinualModel, GateConfig, HeadMode};
use crate::rng::{self, Stream};
use crate::scenario::Batch;

/// `entry(i, j)` is the test accuracy on task `j` after training task `i`
/// (both 0-based here); only `j <= i` is meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl RMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: vec![vec![None; tasks]; tasks],
        }
    }

    /// Builds a matrix from lower-triangular rows (row `i` has `i + 1` entries).
    pub fn from_lower(rows: &[Vec<f64>]) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            r.set_row(i, row)?;
        }
        Ok(r)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set_row(&mut self, i: usize, accuracies: &[f64]) -> Result<()> {
        if i >= self.rows.len() || accuracies.len() != i + 1 {
            return Err(contract(format!(
                "row {i} of a {}-task matrix needs {} entries, got {}",
                self.rows.len(),
                i + 1,
                accuracies.len()
            )));
        }
        if let Some(bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(contract(format!("accuracy {bad} outside [0, 1]")));
        }
        for (j, &a) in accuracies.iter().enumerate() {
            self.rows[i][j] = Some(a);
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    fn need(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| contract(format!("accuracy matrix entry ({i}, {j}) is missing")))
    }

    /// Mean of the final row.
    pub fn acc(&self) -> Result<f64> {
        let n = self.tasks();
        if n == 0 {
            return Err(contract("empty accuracy matrix"));
        }
        let mut s = 0.0;
        for j in 0..n {
            s += self.need(n - 1, j)?;
        }
        Ok(s / n as f64)
    }

    /// Mean of `R[i][j] - R[j][j]` over all `i > j`; zero for one task.
    pub fn bwt(&self) -> Result<f64> {
        let n = self.tasks();
        if n == 0 {
            return Err(contract("empty accuracy matrix"));
        }
        let mut s = 0.0;
        for i in 1..n {
            for j in 0..i {
                s += self.need(i, j)? - self.need(j, j)?;
            }
        }
        if n == 1 {
            return Ok(0.0);
        }
        Ok(s / (n * (n - 1) / 2) as f64)
    }

    /// `-bwt`, the positive-is-worse convention used in result tables.
    pub fn forgetting(&self) -> Result<f64> {
        Ok(-self.bwt()?)
    }
}

/// Geometry of one stored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleGeometry {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        dim: usize,
    },
}

impl SampleGeometry {
    pub fn floats(&self) -> usize {
        match *self {
            SampleGeometry::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            SampleGeometry::Flat { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDescriptor {
    pub geometry: SampleGeometry,
    pub samples: usize,
}

/// Extra floats stored by a rehearsal method beyond backbone and task heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadReport {
    /// `O`: floats held by the memory.
    pub memory_floats: usize,
    /// Weights of all scaler heads, `I * sum_i (i - 1) |Y^i|` for cascaded gates.
    pub scaler_weight_floats: usize,
    pub scaler_bias_floats: usize,
    /// Weights of every block of a gated classifier (task heads plus scalers),
    /// `I * sum_i i |Y^i|`; zero when the head has no gates.
    pub gated_head_weight_floats: usize,
    /// `O` plus scaler weights (bias-free convention).
    pub o_cg: usize,
    pub o_cg_with_biases: usize,
    /// `O` plus the whole gated classifier's weights.
    pub o_cg_head_total: usize,
}

pub fn overhead(memory: &MemoryDescriptor, model: &ContinualModel) -> OverheadReport {
    let memory_floats = memory.geometry.floats() * memory.samples;
    let counts = model.count_parameters();
    let gated_head_weight_floats = if model.scalers().is_empty() {
        0
    } else {
        counts.scaler_weights
            + model
                .heads()
                .iter()
                .map(|h| h.linear.weight.len())
                .sum::<usize>()
    };
    OverheadReport {
        memory_floats,
        scaler_weight_floats: counts.scaler_weights,
        scaler_bias_floats: counts.scaler_biases,
        gated_head_weight_floats,
        o_cg: memory_floats + counts.scaler_weights,
        o_cg_with_biases: memory_floats + counts.scalers(),
        o_cg_head_total: memory_floats + gated_head_weight_floats,
    }
}

/// Number of scaler heads after `t` tasks with cascaded gates,
/// `(1 + (t - 1)) (t - 1) / 2`.
pub fn head_count(t: usize) -> Result<usize> {
    if t < 1 {
        return Err(contract("head_count needs t >= 1"));
    }
    Ok(t * (t - 1) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadTiming {
    pub tasks: usize,
    pub incremental_ms: f64,
    pub cascaded_ms: f64,
}

const TIMING_EMBEDDING: usize = 64;
const TIMING_BATCH: usize = 32;
const TIMING_WARMUP: usize = 5;

/// Mean wall time of one head-only forward pass for 1..=task_count virtual
/// tasks of two classes each, for the incremental and cascaded heads.
pub fn time_heads(task_count: usize, repeats: usize) -> Result<Vec<HeadTiming>> {
    if task_count < 1 || repeats < 10 {
        return Err(contract(format!(
            "timing needs >= 1 task and >= 10 repeats, got {task_count} and {repeats}"
        )));
    }
    let mut r = rng::stream(0, Stream::Timing);
    let embedding: Vec<f64> = (0..TIMING_BATCH * TIMING_EMBEDDING)
        .map(|_| r.gen_range(0.0..1.0))
        .collect();
    let mut models = [HeadMode::Incremental, HeadMode::CascadedGates].map(|mode| {
        ContinualModel::new(
            &[TIMING_EMBEDDING, TIMING_EMBEDDING],
            mode,
            GateConfig::default(),
            0,
        )
    });
    let mut out = Vec::with_capacity(task_count);
    for tasks in 1..=task_count {
        let mut ms = [0.0; 2];
        for (k, m) in models.iter_mut().enumerate() {
            let m = m.as_mut().map_err(|e| contract(e.to_string()))?;
            m.add_task(2)?;
            let run = || -> Result<()> {
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape);
                let e = tape.constant(vec![TIMING_BATCH, TIMING_EMBEDDING], embedding.clone())?;
                let y = m.heads_forward(&mut tape, &bound, e)?;
                std::hint::black_box(tape.value(y));
                Ok(())
            };
            for _ in 0..TIMING_WARMUP {
                run()?;
            }
            let start = Instant::now();
            for _ in 0..repeats {
                run()?;
            }
            ms[k] = start.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        }
        out.push(HeadTiming {
            tasks,
            incremental_ms: ms[0],
            cascaded_ms: ms[1],
        });
    }
    Ok(out)
}

/// Mean over rows of `sum_c p_c ln(p_c / q_c)`, `q` floored like the teacher
/// term of the loss.
pub fn mean_kl(p: &[f64], q: &[f64], width: usize) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let rows = p.len() / width;
    if rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (pr, qr) in p.chunks(width).zip(q.chunks(width)) {
        for (&pc, &qc) in pr.iter().zip(qr) {
            if pc > 0.0 {
                total += pc * (pc.ln() - qc.max(TEACHER_PROB_FLOOR).ln());
            }
        }
    }
    total / rows as f64
}

/// KL between the model's current predictions and reference predictions
/// recorded at a task boundary, one value per past split.
pub fn kl_drift(
    model: &ContinualModel,
    references: &[Vec<f64>],
    splits: &[Batch],
) -> Result<Vec<f64>> {
    if references.len() != splits.len() {
        return Err(contract("one reference distribution per split is required"));
    }
    let width = model.output_width();
    splits
        .iter()
        .zip(references)
        .map(|(b, reference)| {
            if reference.len() != b.len() * width {
                return Err(contract(
                    "reference predictions do not match the model's output width",
                ));
            }
            Ok(mean_kl(&model.probs(&b.features)?, reference, width))
        })
        .collect()
}

pub fn accuracy(model: &ContinualModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(&batch.features)?;
    let hits = pred
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// One epoch's view of replay over-fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySnapshot {
    /// Mean ground-truth logit over all memory samples.
    pub gt_logit_memory: f64,
    /// Accuracy on memory samples of each past task.
    pub memory_acc: Vec<f64>,
    /// Accuracy on the test split of each past task.
    pub test_acc: Vec<f64>,
}

/// `memory_by_task[j]` and `test_by_task[j]` hold the samples of past task `j`.
pub fn replay_overfit(
    model: &ContinualModel,
    memory_by_task: &[Batch],
    test_by_task: &[Batch],
) -> Result<ReplaySnapshot> {
    let width = model.output_width();
    let mut gt_sum = 0.0;
    let mut gt_n = 0usize;
    let mut memory_acc = Vec::with_capacity(memory_by_task.len());
    for b in memory_by_task {
        if b.is_empty() {
            memory_acc.push(0.0);
            continue;
        }
        let logits = model.logits(&b.features)?;
        let mut hits = 0;
        for (row, &y) in logits.chunks(width).zip(&b.labels) {
            gt_sum += row[y];
            gt_n += 1;
            if argmax_first(row).0 == y {
                hits += 1;
            }
        }
        memory_acc.push(hits as f64 / b.len() as f64);
    }
    if gt_n == 0 {
        return Err(contract("replay diagnostics need a non-empty memory"));
    }
    let test_acc = test_by_task
        .iter()
        .map(|b| accuracy(model, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplaySnapshot {
        gt_logit_memory: gt_sum / gt_n as f64,
        memory_acc,
        test_acc,
    })
}

/// Running-peak forgetting: `max(acc[..=k]) - acc[k]` for every `k`.
pub fn running_peak_forgetting(series: &[f64]) -> Vec<f64> {
    let mut peak = f64::NEG_INFINITY;
    series
        .iter()
        .map(|&a| {
            peak = peak.max(a);
            peak - a
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn probs_of(model: &ContinualModel, batch: &Batch) -> Result<Vec<f64>> {
    Ok(softmax_rows(
        &model.logits(&batch.features)?,
        model.output_width(),
    ))
}
