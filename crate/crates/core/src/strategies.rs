//! Task-loop trainers sharing one epoch/batch engine.
//!
//! Every strategy adds the task's head, trains `epochs` passes over its data
//! in reshuffled mini-batches (the last partial batch included), evaluates
//! all seen test splits into the accuracy matrix, and then, if it keeps a
//! memory, stores samples of the finished task.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SgdState, Tape};
use crate::error::{contract, Result};
use crate::losses::{self, LossBreakdown, LossConfig, MemoryTerm};
use crate::memory::RehearsalMemory;
use crate::metrics::{self, RMatrix, ReplaySnapshot};
use crate::models::{
    snapshot_teacher, ContinualModel, GateConfig, HeadMode, ParameterCounts, TeacherSnapshot,
};
use crate::rng::{self, Stream};
use crate::scenario::{Batch, Scenario, ScenarioDescriptor, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Cumulative,
    Replay,
    Ld,
    Md,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Cumulative => "cumulative",
            Strategy::Replay => "replay",
            Strategy::Ld => "ld",
            Strategy::Md => "md",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Strategy::Replay | Strategy::Ld | Strategy::Md)
    }

    fn uses_teacher(self) -> bool {
        matches!(self, Strategy::Ld | Strategy::Md)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Strategy::Naive),
            "cumulative" => Ok(Strategy::Cumulative),
            "replay" => Ok(Strategy::Replay),
            "ld" => Ok(Strategy::Ld),
            "md" => Ok(Strategy::Md),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub memory_capacity: usize,
    pub loss: LossConfig,
    pub head_mode: HeadMode,
    pub gate: GateConfig,
    /// Backbone hidden widths between input and embedding.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub seed: u64,
    /// Record the per-epoch replay and drift diagnostics.
    pub diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.8,
            memory_capacity: 200,
            loss: LossConfig::default(),
            head_mode: HeadMode::Incremental,
            gate: GateConfig::default(),
            hidden: vec![64],
            embedding_dim: 64,
            seed: 0,
            diagnostics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(contract("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(contract("batch_size must be >= 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(contract(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(contract("hidden and embedding_dim widths must be >= 1"));
        }
        if !(self.gate.gamma.is_finite() && self.gate.beta.is_finite()) {
            return Err(contract("gate gamma and beta must be finite"));
        }
        self.loss.validate()
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        sizes
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub steps: usize,
    pub md: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    /// Fraction of current-batch samples with a strictly positive hinge.
    pub hinge_active: f64,
}

/// Diagnostics at one evaluation point of a task `t > 1`; `epoch == 0` is
/// the task boundary before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsPoint {
    pub task: usize,
    pub epoch: usize,
    /// KL from each past test split's boundary predictions.
    pub kl_drift: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplaySnapshot>,
    /// Running-peak forgetting on memory samples, per past task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub memory_forgetting: Vec<f64>,
    /// Running-peak forgetting on test splits, per past task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_forgetting: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub config: TrainConfig,
    pub scenario: ScenarioDescriptor,
    pub r_matrix: RMatrix,
    /// Final accuracy on each task's dev split.
    pub dev_accuracy: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub diagnostics: Vec<DiagnosticsPoint>,
    /// Optimizer steps taken per task.
    pub steps_per_task: Vec<usize>,
    /// KL(student || teacher) on the full memory right after each snapshot.
    pub boundary_kl: Vec<f64>,
    pub parameter_counts: ParameterCounts,
    /// Wall-clock seconds per task; the only non-deterministic field.
    pub timings: Vec<f64>,
}

impl RunRecord {
    pub fn acc(&self) -> Result<f64> {
        self.r_matrix.acc()
    }

    pub fn bwt(&self) -> Result<f64> {
        self.r_matrix.bwt()
    }

    pub fn dev_acc(&self) -> f64 {
        self.dev_accuracy.iter().sum::<f64>() / self.dev_accuracy.len().max(1) as f64
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: ContinualModel,
    pub memory: Option<RehearsalMemory>,
}

/// Accuracy on the test split of every task `j <= upto`, predicting by argmax
/// over the whole output (no task identity).
pub fn evaluate(model: &ContinualModel, scenario: &Scenario, upto: usize) -> Result<Vec<f64>> {
    evaluate_split(model, scenario, upto, Split::Test)
}

pub fn evaluate_split(
    model: &ContinualModel,
    scenario: &Scenario,
    upto: usize,
    split: Split,
) -> Result<Vec<f64>> {
    (1..=upto)
        .map(|j| metrics::accuracy(model, &scenario.split_batch(j, split)))
        .collect()
}

pub fn train_naive(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    run(Strategy::Naive, scenario, config)
}

pub fn train_cumulative(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    run(Strategy::Cumulative, scenario, config)
}

pub fn train_replay(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    run(Strategy::Replay, scenario, config)
}

pub fn train_ld(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    run(Strategy::Ld, scenario, config)
}

pub fn train_md(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    run(Strategy::Md, scenario, config)
}

/// Splits memory contents by the task owning each class.
fn memory_by_task(memory: &RehearsalMemory, scenario: &Scenario, past: usize) -> Vec<Batch> {
    let all = memory.all();
    let d = memory.feature_dim();
    let mut out = vec![Batch::default(); past];
    for (i, &y) in all.labels.iter().enumerate() {
        if let Some(j) = scenario.tasks()[..past]
            .iter()
            .position(|t| t.class_range().contains(&y))
        {
            out[j]
                .features
                .extend_from_slice(&all.features[i * d..(i + 1) * d]);
            out[j].labels.push(y);
        }
    }
    out
}

struct Diagnostics {
    /// Boundary predictions on each past test split.
    references: Vec<Vec<f64>>,
    past_tests: Vec<Batch>,
    memory_parts: Vec<Batch>,
}

impl Diagnostics {
    fn begin(
        model: &ContinualModel,
        scenario: &Scenario,
        memory: Option<&RehearsalMemory>,
        task: usize,
    ) -> Result<Self> {
        let past = task - 1;
        let past_tests: Vec<Batch> = (1..=past)
            .map(|j| scenario.split_batch(j, Split::Test))
            .collect();
        let references = past_tests
            .iter()
            .map(|b| metrics::probs_of(model, b))
            .collect::<Result<_>>()?;
        let memory_parts = memory
            .filter(|m| !m.is_empty())
            .map(|m| memory_by_task(m, scenario, past))
            .unwrap_or_default();
        Ok(Self {
            references,
            past_tests,
            memory_parts,
        })
    }

    fn point(
        &self,
        model: &ContinualModel,
        peaks: &mut PeakTracker,
        task: usize,
        epoch: usize,
    ) -> Result<DiagnosticsPoint> {
        let kl_drift = metrics::kl_drift(model, &self.references, &self.past_tests)?;
        let mut point = DiagnosticsPoint {
            task,
            epoch,
            kl_drift,
            replay: None,
            memory_forgetting: Vec::new(),
            test_forgetting: Vec::new(),
        };
        if !self.memory_parts.is_empty() {
            let snap = metrics::replay_overfit(model, &self.memory_parts, &self.past_tests)?;
            point.memory_forgetting = peaks.update(&snap.memory_acc, PeakKind::Memory);
            point.test_forgetting = peaks.update(&snap.test_acc, PeakKind::Test);
            point.replay = Some(snap);
        }
        Ok(point)
    }
}

#[derive(Clone, Copy)]
enum PeakKind {
    Memory,
    Test,
}

/// Running accuracy peaks per original task, kept across the whole run.
#[derive(Default)]
struct PeakTracker {
    memory: Vec<f64>,
    test: Vec<f64>,
}

impl PeakTracker {
    fn update(&mut self, acc: &[f64], kind: PeakKind) -> Vec<f64> {
        let peaks = match kind {
            PeakKind::Memory => &mut self.memory,
            PeakKind::Test => &mut self.test,
        };
        if peaks.len() < acc.len() {
            peaks.resize(acc.len(), f64::NEG_INFINITY);
        }
        acc.iter()
            .zip(peaks.iter_mut())
            .map(|(&a, p)| {
                *p = p.max(a);
                *p - a
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn step_loss(
    strategy: Strategy,
    tape: &mut Tape,
    model: &ContinualModel,
    bound: &crate::models::Bound,
    task: usize,
    batch: &Batch,
    memory_batch: Option<(&Batch, Option<&[f64]>)>,
    class_range: std::ops::Range<usize>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let d = model.input_dim();
    match strategy {
        Strategy::Naive | Strategy::Cumulative | Strategy::Replay => {
            let mut combined;
            let data = match memory_batch {
                Some((m, _)) => {
                    combined = batch.clone();
                    combined.extend(m);
                    &combined
                }
                None => batch,
            };
            let x = tape.constant(vec![data.len(), d], data.features.clone())?;
            let logits = model.forward(tape, bound, x)?;
            let ce = losses::full_ce(tape, logits, &data.labels)?;
            let v = tape.scalar(ce);
            Ok(LossBreakdown {
                md: 0.0,
                ce_current: v,
                kl: 0.0,
                total: v,
                total_var: ce,
                hinge_active: 0,
                batch: data.len(),
            })
        }
        Strategy::Ld | Strategy::Md => {
            let x = tape.constant(vec![batch.len(), d], batch.features.clone())?;
            let logits = model.forward(tape, bound, x)?;
            let term = match memory_batch {
                Some((m, Some(teacher))) => {
                    let xm = tape.constant(vec![m.len(), d], m.features.clone())?;
                    let student_logits = model.forward(tape, bound, xm)?;
                    Some(MemoryTerm {
                        student_logits,
                        teacher_probs: teacher,
                    })
                }
                _ => None,
            };
            if strategy == Strategy::Ld {
                losses::compose_ld_loss(tape, logits, &batch.labels, term, config.loss.alpha)
            } else {
                losses::compose_md_loss(
                    tape,
                    task,
                    logits,
                    &batch.labels,
                    class_range,
                    term,
                    &config.loss,
                )
            }
        }
    }
}

fn boundary_kl(
    model: &ContinualModel,
    teacher: &TeacherSnapshot,
    memory: &RehearsalMemory,
) -> Result<f64> {
    let all = memory.all();
    let p = metrics::probs_of(model, &all)?;
    let q = teacher.probs(&all.features)?;
    Ok(metrics::mean_kl(&p, &q, model.output_width()))
}

/// Runs `strategy` over every task of `scenario`.
pub fn run(strategy: Strategy, scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if strategy.uses_memory() && config.memory_capacity == 0 {
        return Err(contract(format!(
            "{strategy} needs a positive memory capacity"
        )));
    }
    let head_mode = match strategy {
        Strategy::Md => config.head_mode,
        _ => HeadMode::Incremental,
    };
    let d = scenario.feature_dim();
    let mut model =
        ContinualModel::new(&config.layer_sizes(d), head_mode, config.gate, config.seed)?;
    let mut memory = strategy
        .uses_memory()
        .then(|| RehearsalMemory::new(config.memory_capacity, d, config.seed));
    let mut order_rng = rng::stream(config.seed, Stream::DataOrder);
    let task_count = scenario.tasks().len();

    let mut r_matrix = RMatrix::new(task_count);
    let mut epochs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut steps_per_task = Vec::new();
    let mut boundary = Vec::new();
    let mut timings = Vec::new();
    let mut peaks = PeakTracker::default();

    for t in 1..=task_count {
        let started = Instant::now();
        let task = scenario.task(t);
        model.add_task(task.class_count())?;
        let teacher = (strategy.uses_teacher() && t > 1).then(|| snapshot_teacher(&model));
        if let (Some(teacher), Some(mem)) = (&teacher, &memory) {
            boundary.push(boundary_kl(&model, teacher, mem)?);
        }

        let data = if strategy == Strategy::Cumulative {
            let mut b = Batch::default();
            for j in 1..=t {
                b.extend(&scenario.split_batch(j, Split::Train));
            }
            b
        } else {
            scenario.split_batch(t, Split::Train)
        };
        if data.is_empty() {
            return Err(contract(format!("task {t} has no training samples")));
        }

        let diag = if config.diagnostics && t > 1 {
            let dg = Diagnostics::begin(&model, scenario, memory.as_ref(), t)?;
            diagnostics.push(dg.point(&model, &mut peaks, t, 0)?);
            Some(dg)
        } else {
            None
        };

        let mut sgd = SgdState::new(config.learning_rate, config.momentum, &model.parameters())?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut steps = 0;
        for epoch in 1..=config.epochs {
            order.shuffle(&mut order_rng);
            let mut sums = [0.0f64; 4];
            let mut active = 0usize;
            let mut seen = 0usize;
            let mut epoch_steps = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let mut batch = Batch {
                    features: Vec::with_capacity(chunk.len() * d),
                    labels: Vec::with_capacity(chunk.len()),
                };
                for &i in chunk {
                    batch
                        .features
                        .extend_from_slice(&data.features[i * d..(i + 1) * d]);
                    batch.labels.push(data.labels[i]);
                }
                let mem_batch = match &mut memory {
                    Some(m) if t > 1 && strategy != Strategy::Cumulative => {
                        Some(m.sample_balanced(batch.len())?)
                    }
                    _ => None,
                };
                let teacher_probs = match (&teacher, &mem_batch) {
                    (Some(tch), Some(mb)) => Some(tch.probs(&mb.features)?),
                    _ => None,
                };
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let breakdown = step_loss(
                    strategy,
                    &mut tape,
                    &model,
                    &bound,
                    t,
                    &batch,
                    mem_batch.as_ref().map(|m| (m, teacher_probs.as_deref())),
                    task.class_range(),
                    config,
                )?;
                tape.backward(breakdown.total_var)?;
                model.collect_grads(&tape, &bound)?;
                sgd.step(&mut model.parameters_mut())?;

                sums[0] += breakdown.md;
                sums[1] += breakdown.ce_current;
                sums[2] += breakdown.kl;
                sums[3] += breakdown.total;
                active += breakdown.hinge_active;
                seen += batch.len();
                epoch_steps += 1;
            }
            steps += epoch_steps;
            let n = epoch_steps as f64;
            epochs.push(EpochLog {
                task: t,
                epoch,
                steps: epoch_steps,
                md: sums[0] / n,
                ce: sums[1] / n,
                kl: sums[2] / n,
                total: sums[3] / n,
                hinge_active: active as f64 / seen as f64,
            });
            if let Some(dg) = &diag {
                diagnostics.push(dg.point(&model, &mut peaks, t, epoch)?);
            }
        }
        steps_per_task.push(steps);
        r_matrix.set_row(t - 1, &evaluate(&model, scenario, t)?)?;

        if let Some(m) = &mut memory {
            m.update_after_task(&scenario.split_batch(t, Split::Train), task.remapped_end)?;
        }
        timings.push(started.elapsed().as_secs_f64());
        log::info!(
            "{strategy} seed {} task {t}: accuracy row {:?}",
            config.seed,
            r_matrix.rows()[t - 1].iter().flatten().collect::<Vec<_>>()
        );
    }

    let dev_accuracy = evaluate_split(&model, scenario, task_count, Split::Dev)?;
    let record = RunRecord {
        strategy,
        config: TrainConfig {
            head_mode,
            ..config.clone()
        },
        scenario: scenario.descriptor(),
        r_matrix,
        dev_accuracy,
        epochs,
        diagnostics,
        steps_per_task,
        boundary_kl: boundary,
        parameter_counts: model.count_parameters(),
        timings,
    };
    Ok(TrainOutcome {
        record,
        model,
        memory,
    })
}
