//! Central finite-difference oracle for the tape.
//!
//! Shared by the core integration tests and the acceptance target.

#![allow(dead_code)]

use contistream_core::autodiff::{softmax_rows, Tape, Tensor, Var};
use contistream_core::losses::{
    compose_md_loss, current_task_ce, kl_regularizer, margin_value, md_loss, LossConfig, MemoryTerm,
};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Graphs whose kinks (ReLU zero, max ties, hinge edge) lie closer than this
/// to the evaluation point are rejected, since finite differences straddle them.
const KINK_CLEARANCE: f64 = 1e-3;

/// Worst `|a - n| / (abs + rel * max(|a|, |n|))`; at most 1 means within tolerance.
pub fn violation(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (ABS_TOL + REL_TOL * a.abs().max(n.abs())))
        .fold(0.0, f64::max)
}

/// A differentiable scalar function of some leaf tensors.
pub trait Graph {
    fn leaves(&self) -> &[Tensor];
    /// Builds the graph on `tape` from the given leaf values; returns the
    /// scalar output, the leaf vars and the distance to the nearest kink.
    fn build(&self, tape: &mut Tape, leaves: &[Tensor]) -> (Var, Vec<Var>, f64);
}

pub struct Outcome {
    pub violation: f64,
    pub clearance: f64,
}

pub fn check(graph: &dyn Graph) -> Outcome {
    let base = graph.leaves().to_vec();
    let mut tape = Tape::new();
    let (out, vars, clearance) = graph.build(&mut tape, &base);
    tape.backward(out).expect("scalar output");
    let mut worst = 0.0f64;
    for (li, leaf) in base.iter().enumerate() {
        let analytic = tape
            .grad(vars[li])
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; leaf.len()]);
        let numeric: Vec<f64> = (0..leaf.len())
            .map(|k| {
                let eval = |delta: f64| {
                    let mut moved = base.clone();
                    moved[li].values_mut()[k] += delta;
                    let mut t = Tape::new();
                    let (o, _, _) = graph.build(&mut t, &moved);
                    t.scalar(o)
                };
                (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(violation(&analytic, &numeric));
    }
    Outcome {
        violation: worst,
        clearance,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, values).unwrap().with_grad()
}

fn top_two_gap(row: &[f64]) -> f64 {
    let mut s = row.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if s.len() < 2 {
        f64::INFINITY
    } else {
        s[0] - s[1]
    }
}

fn min_row_gap(values: &[f64], cols: usize) -> f64 {
    values
        .chunks(cols)
        .map(top_two_gap)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug)]
enum Step {
    Affine { leaf: usize, out: usize },
    Relu,
    Sigmoid,
    Add { leaf: usize },
    Mul { leaf: usize },
    Scale(f64),
    Shift(f64),
    Softmax,
    LogSoftmax,
    Exp,
    LogSigmoid,
    ConcatSlice { leaf: usize, start: usize },
}

#[derive(Clone, Debug)]
enum Reduce {
    Sum,
    Mean,
    GatherSum(Vec<usize>),
    RowMaxMean,
}

/// A randomly composed chain of tape operations over a `[rows, width]` value.
pub struct RandomGraph {
    leaves: Vec<Tensor>,
    steps: Vec<Step>,
    reduce: Reduce,
}

impl RandomGraph {
    pub fn sample(seed: u64, max_depth: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(1..=3);
        let mut width = rng.gen_range(2..=4);
        let mut leaves = vec![random_tensor(&mut rng, vec![rows, width], 1.5)];
        let depth = rng.gen_range(1..=max_depth);
        let mut steps = Vec::with_capacity(depth);
        for _ in 0..depth {
            let step = match rng.gen_range(0..12) {
                0 => {
                    let out = rng.gen_range(2..=4);
                    leaves.push(random_tensor(&mut rng, vec![width, out], 1.0));
                    leaves.push(random_tensor(&mut rng, vec![out], 0.5));
                    let s = Step::Affine {
                        leaf: leaves.len() - 2,
                        out,
                    };
                    width = out;
                    s
                }
                1 => Step::Relu,
                2 => Step::Sigmoid,
                3 | 4 => {
                    leaves.push(random_tensor(&mut rng, vec![rows, width], 1.0));
                    if rng.gen_bool(0.5) {
                        Step::Add {
                            leaf: leaves.len() - 1,
                        }
                    } else {
                        Step::Mul {
                            leaf: leaves.len() - 1,
                        }
                    }
                }
                5 => Step::Scale(rng.gen_range(-2.0..2.0)),
                6 => Step::Shift(rng.gen_range(-1.0..1.0)),
                7 => Step::Softmax,
                8 => Step::LogSoftmax,
                9 => Step::Exp,
                10 => Step::LogSigmoid,
                _ => {
                    let extra = rng.gen_range(1..=3);
                    leaves.push(random_tensor(&mut rng, vec![rows, extra], 1.0));
                    Step::ConcatSlice {
                        leaf: leaves.len() - 1,
                        start: rng.gen_range(0..=extra),
                    }
                }
            };
            steps.push(step);
        }
        let reduce = match rng.gen_range(0..4) {
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            2 => Reduce::GatherSum((0..rows).map(|_| rng.gen_range(0..width)).collect()),
            _ => Reduce::RowMaxMean,
        };
        Self {
            leaves,
            steps,
            reduce,
        }
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }
}

impl Graph for RandomGraph {
    fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    fn build(&self, tape: &mut Tape, leaves: &[Tensor]) -> (Var, Vec<Var>, f64) {
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
        let mut clearance = f64::INFINITY;
        let mut h = vars[0];
        for step in &self.steps {
            h = match *step {
                Step::Affine { leaf, .. } => tape.affine(h, vars[leaf], vars[leaf + 1]).unwrap(),
                Step::Relu => {
                    let near = tape
                        .value(h)
                        .iter()
                        .map(|v| v.abs())
                        .fold(f64::INFINITY, f64::min);
                    clearance = clearance.min(near);
                    tape.relu(h)
                }
                Step::Sigmoid => tape.sigmoid(h),
                Step::Add { leaf } => tape.add(h, vars[leaf]).unwrap(),
                Step::Mul { leaf } => tape.mul(h, vars[leaf]).unwrap(),
                Step::Scale(c) => tape.scale(h, c),
                Step::Shift(c) => tape.shift(h, c),
                Step::Softmax => tape.softmax(h).unwrap(),
                Step::LogSoftmax => tape.log_softmax(h).unwrap(),
                Step::Exp => {
                    let s = tape.sigmoid(h);
                    tape.exp(s)
                }
                Step::LogSigmoid => {
                    let s = tape.sigmoid(h);
                    tape.log(s).unwrap()
                }
                Step::ConcatSlice { leaf, start } => {
                    let width = tape.shape(h)[1];
                    let joined = tape.concat(&[h, vars[leaf]]).unwrap();
                    tape.slice(joined, start, width).unwrap()
                }
            };
        }
        let out = match &self.reduce {
            Reduce::Sum => tape.sum(h),
            Reduce::Mean => tape.mean(h).unwrap(),
            Reduce::GatherSum(idx) => {
                let g = tape.gather(h, idx).unwrap();
                tape.sum(g)
            }
            Reduce::RowMaxMean => {
                let cols = tape.shape(h)[1];
                clearance = clearance.min(min_row_gap(tape.value(h), cols));
                let m = tape.row_max(h).unwrap();
                tape.mean(m).unwrap()
            }
        };
        (out, vars, clearance)
    }
}

/// Checks `count` random graphs of depth at most `max_depth`, skipping draws
/// that sit on a kink. Returns the worst violation and the number of draws.
pub fn random_graphs(count: usize, max_depth: usize, seed: u64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut draw = seed;
    while checked < count {
        let g = RandomGraph::sample(draw, max_depth);
        draw += 1;
        let o = check(&g);
        if o.clearance < KINK_CLEARANCE {
            continue;
        }
        worst = worst.max(o.violation);
        checked += 1;
    }
    (worst, (draw - seed) as usize)
}

/// The loss operations under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Md,
    CurrentCe,
    Kl,
    ComposeMd,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Md,
        LossKind::CurrentCe,
        LossKind::Kl,
        LossKind::ComposeMd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Md => "md_loss",
            LossKind::CurrentCe => "current_task_ce",
            LossKind::Kl => "kl_regularizer",
            LossKind::ComposeMd => "compose_md_loss",
        }
    }
}

pub struct LossGraph {
    kind: LossKind,
    leaves: Vec<Tensor>,
    labels: Vec<usize>,
    past: usize,
    classes: usize,
    teacher: Vec<f64>,
    lambda: f64,
}

impl LossGraph {
    pub fn sample(kind: LossKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let rows = rng.gen_range(1..=4);
        let past = rng.gen_range(1..=4);
        let classes = past + rng.gen_range(2..=3);
        let labels = (0..rows).map(|_| rng.gen_range(past..classes)).collect();
        let mut leaves = vec![random_tensor(&mut rng, vec![rows, classes], 2.0)];
        if kind == LossKind::ComposeMd {
            leaves.push(random_tensor(&mut rng, vec![rows, classes], 2.0));
        }
        let teacher_logits: Vec<f64> = (0..rows * classes)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        Self {
            kind,
            leaves,
            labels,
            past,
            classes,
            teacher: softmax_rows(&teacher_logits, classes),
            lambda: rng.gen_range(0.01..1.0),
        }
    }
}

impl Graph for LossGraph {
    fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    fn build(&self, tape: &mut Tape, leaves: &[Tensor]) -> (Var, Vec<Var>, f64) {
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
        let margin = margin_value(self.classes).unwrap();
        let hinge_clearance = |tape: &Tape, probs: Var| {
            let p = tape.value(probs);
            let mut c = f64::INFINITY;
            for (r, row) in p.chunks(self.classes).enumerate() {
                let past = &row[..self.past];
                let m = past.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                c = c.min((m - row[self.labels[r]] + margin).abs());
                c = c.min(top_two_gap(past));
            }
            c
        };
        match self.kind {
            LossKind::Md => {
                let probs = tape.softmax(vars[0]).unwrap();
                let c = hinge_clearance(tape, probs);
                let l = md_loss(tape, probs, &self.labels, self.past, margin).unwrap();
                (l, vars, c)
            }
            LossKind::CurrentCe => {
                let l =
                    current_task_ce(tape, vars[0], &self.labels, self.past..self.classes).unwrap();
                (l, vars, f64::INFINITY)
            }
            LossKind::Kl => {
                let probs = tape.softmax(vars[0]).unwrap();
                let l = kl_regularizer(tape, probs, &self.teacher).unwrap();
                (l, vars, f64::INFINITY)
            }
            LossKind::ComposeMd => {
                let probs = tape.softmax(vars[0]).unwrap();
                let c = hinge_clearance(tape, probs);
                let config = LossConfig {
                    lambda: self.lambda,
                    ..LossConfig::default()
                };
                let memory = MemoryTerm {
                    student_logits: vars[1],
                    teacher_probs: &self.teacher,
                };
                let b = compose_md_loss(
                    tape,
                    2,
                    vars[0],
                    &self.labels,
                    self.past..self.classes,
                    Some(memory),
                    &config,
                )
                .unwrap();
                (b.total_var, vars, c)
            }
        }
    }
}

/// Checks `count` usable instances of one loss. Returns the worst violation.
pub fn loss_instances(kind: LossKind, count: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut draw = seed;
    while checked < count {
        let g = LossGraph::sample(kind, draw);
        draw += 1;
        let o = check(&g);
        if o.clearance < KINK_CLEARANCE {
            continue;
        }
        worst = worst.max(o.violation);
        checked += 1;
    }
    worst
}
