//! The continual model: an MLP backbone producing embeddings, one linear
//! head per task, and optional sigmoid gates that scale past-task logits.
//!
//! In cascaded mode every new task `j` brings one gate `s^j_i` for each past
//! task `i < j`, and the output block of task `i` after task `t` is
//! `h^i(e) * prod_{j=i+1..=t} s^j_i(e)`. The block of the newest task is never
//! gated. Single-gate mode keeps exactly one gate per past task.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::error::{contract, dimension, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Incremental,
    CascadedGates,
    SingleGate,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Incremental => "incremental",
            HeadMode::CascadedGates => "cascaded_gates",
            HeadMode::SingleGate => "single_gate",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            HeadMode::Incremental => 0,
            HeadMode::CascadedGates => 1,
            HeadMode::SingleGate => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(HeadMode::Incremental),
            1 => Some(HeadMode::CascadedGates),
            2 => Some(HeadMode::SingleGate),
            _ => None,
        }
    }
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scale and offset of the gate sigmoid, `sigmoid(gamma * g(e) + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            beta: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn random(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::uniform_fan_in(vec![fan_in, fan_out], fan_in, rng).with_grad(),
            bias: Tensor::zeros(vec![fan_out]).with_grad(),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]).with_grad(),
            bias: Tensor::zeros(vec![fan_out]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Rectified MLP. Every layer, including the last, is followed by a ReLU, so
/// embeddings are non-negative.
#[derive(Debug, Clone)]
pub struct Backbone {
    sizes: Vec<usize>,
    layers: Vec<Linear>,
}

impl Backbone {
    fn new(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(contract(format!(
                "backbone needs at least input and embedding sizes, all positive; got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Linear::random(w[0], w[1], rng))
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    /// 1-based task index.
    pub task: usize,
    pub linear: Linear,
}

#[derive(Debug, Clone)]
pub struct ScalerHead {
    /// Task whose arrival created this gate (1-based).
    pub owner: usize,
    /// Past task whose logits it scales (1-based, `< owner`).
    pub target: usize,
    pub linear: Linear,
    pub gate: GateConfig,
}

/// Parameter-count breakdown; scaler weights and biases are kept apart so
/// both overhead conventions can be derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub backbone: usize,
    pub heads: usize,
    pub scaler_weights: usize,
    pub scaler_biases: usize,
}

impl ParameterCounts {
    pub fn scalers(&self) -> usize {
        self.scaler_weights + self.scaler_biases
    }

    pub fn total(&self) -> usize {
        self.backbone + self.heads + self.scalers()
    }
}

/// Tape leaves for every parameter, in [`ContinualModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct ContinualModel {
    backbone: Backbone,
    heads: Vec<TaskHead>,
    scalers: Vec<ScalerHead>,
    mode: HeadMode,
    gate: GateConfig,
    class_offsets: Vec<usize>,
    init_rng: Rng,
    forced_gate: Option<f64>,
}

impl ContinualModel {
    /// `layer_sizes` runs from the input dimension through the hidden widths
    /// to the embedding dimension.
    pub fn new(layer_sizes: &[usize], mode: HeadMode, gate: GateConfig, seed: u64) -> Result<Self> {
        let mut init_rng = rng::stream(seed, Stream::ModelInit);
        let backbone = Backbone::new(layer_sizes, &mut init_rng)?;
        Ok(Self {
            backbone,
            heads: Vec::new(),
            scalers: Vec::new(),
            mode,
            gate,
            class_offsets: Vec::new(),
            init_rng,
            forced_gate: None,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn scalers(&self) -> &[ScalerHead] {
        &self.scalers
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn gate_config(&self) -> GateConfig {
        self.gate
    }

    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.linear.out_dim()).collect()
    }

    pub fn class_offsets(&self) -> &[usize] {
        &self.class_offsets
    }

    pub fn output_width(&self) -> usize {
        self.heads.iter().map(|h| h.linear.out_dim()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    /// Replaces every gate with the constant `value` in subsequent forwards.
    /// Meant for checking the gate algebra; `None` restores learned gates.
    pub fn force_gates(&mut self, value: Option<f64>) {
        self.forced_gate = value;
    }

    pub fn add_task(&mut self, class_count: usize) -> Result<()> {
        if class_count < 2 {
            return Err(contract(format!(
                "a task needs at least 2 classes, got {class_count}"
            )));
        }
        let t = self.heads.len() + 1;
        let dim = self.embedding_dim();
        let offset = self.output_width();
        self.heads.push(TaskHead {
            task: t,
            linear: Linear::random(dim, class_count, &mut self.init_rng),
        });
        self.class_offsets.push(offset);
        match self.mode {
            HeadMode::Incremental => {}
            HeadMode::CascadedGates => {
                for i in 1..t {
                    self.push_scaler(t, i);
                }
            }
            HeadMode::SingleGate => {
                for i in 1..t {
                    if !self.scalers.iter().any(|s| s.target == i) {
                        self.push_scaler(t, i);
                    }
                }
            }
        }
        Ok(())
    }

    fn push_scaler(&mut self, owner: usize, target: usize) {
        let width = self.heads[target - 1].linear.out_dim();
        self.scalers.push(ScalerHead {
            owner,
            target,
            linear: Linear::zeros(self.embedding_dim(), width),
            gate: self.gate,
        });
    }

    /// All parameters: backbone layers, then task heads, then scalers; each
    /// as (weight, bias).
    pub fn parameters(&self) -> Vec<&Tensor> {
        let linears = self
            .backbone
            .layers
            .iter()
            .chain(self.heads.iter().map(|h| &h.linear))
            .chain(self.scalers.iter().map(|s| &s.linear));
        linears.flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let linears = self
            .backbone
            .layers
            .iter_mut()
            .chain(self.heads.iter_mut().map(|h| &mut h.linear))
            .chain(self.scalers.iter_mut().map(|s| &mut s.linear));
        linears.flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let count = |ls: &mut dyn Iterator<Item = &Linear>| -> usize {
            ls.map(|l| l.weight.len() + l.bias.len()).sum()
        };
        ParameterCounts {
            backbone: count(&mut self.backbone.layers.iter()),
            heads: count(&mut self.heads.iter().map(|h| &h.linear)),
            scaler_weights: self.scalers.iter().map(|s| s.linear.weight.len()).sum(),
            scaler_biases: self.scalers.iter().map(|s| s.linear.bias.len()).sum(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .parameters()
                .into_iter()
                .map(|p| tape.leaf(p))
                .collect(),
        }
    }

    /// Adds the gradients gathered on `tape` into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != bound.vars.len() {
            return Err(contract("binding does not match the model's parameters"));
        }
        for (p, &v) in params.iter_mut().zip(&bound.vars) {
            tape.accumulate_into(v, p)?;
        }
        Ok(())
    }

    fn head_base(&self) -> usize {
        2 * self.backbone.layers.len()
    }

    fn scaler_base(&self) -> usize {
        self.head_base() + 2 * self.heads.len()
    }

    pub fn embed(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(dimension(format!(
                "model expects [batch, {}] input, got {xs:?}",
                self.input_dim()
            )));
        }
        let mut h = x;
        for l in 0..self.backbone.layers.len() {
            let z = tape.affine(h, bound.vars[2 * l], bound.vars[2 * l + 1])?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    fn gate_output(&self, tape: &mut Tape, bound: &Bound, e: Var, s: usize) -> Result<Var> {
        let scaler = &self.scalers[s];
        if let Some(v) = self.forced_gate {
            let rows = tape.shape(e)[0];
            let width = scaler.linear.out_dim();
            return tape.constant(vec![rows, width], vec![v; rows * width]);
        }
        let base = self.scaler_base() + 2 * s;
        let g = tape.affine(e, bound.vars[base], bound.vars[base + 1])?;
        let scaled = tape.scale(g, scaler.gate.gamma);
        let shifted = tape.shift(scaled, scaler.gate.beta);
        Ok(tape.sigmoid(shifted))
    }

    /// Head-only forward from embeddings `e` to the concatenated output.
    pub fn heads_forward(&self, tape: &mut Tape, bound: &Bound, e: Var) -> Result<Var> {
        if self.heads.is_empty() {
            return Err(contract("forward called before any task was added"));
        }
        let t = self.heads.len();
        let mut blocks = Vec::with_capacity(t);
        for (k, head) in self.heads.iter().enumerate() {
            let base = self.head_base() + 2 * k;
            let mut block = tape.affine(e, bound.vars[base], bound.vars[base + 1])?;
            if head.task < t {
                for s in 0..self.scalers.len() {
                    if self.scalers[s].target == head.task {
                        let gate = self.gate_output(tape, bound, e, s)?;
                        block = tape.mul(block, gate)?;
                    }
                }
            }
            blocks.push(block);
        }
        if blocks.len() == 1 {
            return Ok(blocks[0]);
        }
        tape.concat(&blocks)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let e = self.embed(tape, bound, x)?;
        self.heads_forward(tape, bound, e)
    }

    /// Gradient-free logits for a row-major `[rows, input_dim]` batch.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if !x.len().is_multiple_of(d) {
            return Err(dimension(format!(
                "{} values is not a multiple of {d}",
                x.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.frozen_bind(&mut tape)?;
        let xv = tape.constant(vec![x.len() / d, d], x.to_vec())?;
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax_rows(&self.logits(x)?, self.output_width()))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let width = self.output_width();
        Ok(self
            .logits(x)?
            .chunks(width)
            .map(|row| crate::autodiff::argmax_first(row).0)
            .collect())
    }

    /// Gate activations per scaler as `(owner, target, [rows, width] values)`.
    pub fn gate_values(&self, x: &[f64]) -> Result<Vec<(usize, usize, Vec<f64>)>> {
        let d = self.input_dim();
        let mut tape = Tape::new();
        let bound = self.frozen_bind(&mut tape)?;
        let xv = tape.constant(vec![x.len() / d, d], x.to_vec())?;
        let e = self.embed(&mut tape, &bound, xv)?;
        (0..self.scalers.len())
            .map(|s| {
                let g = self.gate_output(&mut tape, &bound, e, s)?;
                let sc = &self.scalers[s];
                Ok((sc.owner, sc.target, tape.value(g).to_vec()))
            })
            .collect()
    }

    fn frozen_bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .parameters()
            .into_iter()
            .map(|p| tape.constant(p.shape().to_vec(), p.values().to_vec()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    pub(crate) fn from_parts(
        backbone_sizes: &[usize],
        mode: HeadMode,
        gate: GateConfig,
        class_counts: &[usize],
        scaler_pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let mut model = Self::new(backbone_sizes, mode, gate, 0)?;
        let dim = model.embedding_dim();
        for (k, &c) in class_counts.iter().enumerate() {
            model.class_offsets.push(model.output_width());
            model.heads.push(TaskHead {
                task: k + 1,
                linear: Linear::zeros(dim, c),
            });
        }
        for &(owner, target) in scaler_pairs {
            if target == 0 || target >= owner || owner > class_counts.len() {
                return Err(contract(format!("invalid scaler ({owner}, {target})")));
            }
            model.push_scaler(owner, target);
        }
        Ok(model)
    }

    /// Reinitializes every parameter with values drawn from `rng`. Test
    /// helper for exercising non-trivial gate weights.
    pub fn randomize_all(&mut self, rng: &mut Rng, scale: f64) {
        for p in self.parameters_mut() {
            for v in p.values_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
    }
}

/// Frozen copy of a model taken at a task boundary.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    model: ContinualModel,
}

impl TeacherSnapshot {
    pub fn model(&self) -> &ContinualModel {
        &self.model
    }

    pub fn output_width(&self) -> usize {
        self.model.output_width()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.logits(x)
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.probs(x)
    }
}

pub fn snapshot_teacher(model: &ContinualModel) -> TeacherSnapshot {
    let mut frozen = model.clone();
    for p in frozen.parameters_mut() {
        p.set_requires_grad(false);
    }
    TeacherSnapshot { model: frozen }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{sigmoid, SgdState};

    fn model(mode: HeadMode) -> ContinualModel {
        ContinualModel::new(&[4, 8, 6], mode, GateConfig::default(), 7).unwrap()
    }

    fn inputs(rows: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, Stream::Synthetic);
        (0..rows * 4).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn cascaded_growth_after_five_tasks() {
        let mut m = model(HeadMode::CascadedGates);
        for _ in 0..5 {
            m.add_task(2).unwrap();
        }
        assert_eq!(m.heads().len(), 5);
        assert_eq!(m.scalers().len(), 10);
        assert_eq!(m.output_width(), 10);
        assert_eq!(m.class_offsets(), &[0, 2, 4, 6, 8]);
    }

    #[test]
    fn incremental_and_single_gate_counts() {
        let mut inc = model(HeadMode::Incremental);
        let mut sg = model(HeadMode::SingleGate);
        for _ in 0..3 {
            inc.add_task(2).unwrap();
        }
        for _ in 0..4 {
            sg.add_task(2).unwrap();
        }
        assert_eq!((inc.heads().len(), inc.scalers().len()), (3, 0));
        assert_eq!(sg.scalers().len(), 3);
        let targets: Vec<_> = sg.scalers().iter().map(|s| (s.owner, s.target)).collect();
        assert_eq!(targets, vec![(2, 1), (3, 2), (4, 3)]);
    }

    #[test]
    fn add_task_rejects_single_class() {
        let mut m = model(HeadMode::Incremental);
        assert!(m.add_task(1).is_err());
    }

    #[test]
    fn forward_without_tasks_fails() {
        let m = model(HeadMode::Incremental);
        assert!(m.logits(&inputs(2, 1)).is_err());
    }

    #[test]
    fn single_task_output_is_the_head_in_every_mode() {
        let x = inputs(5, 3);
        let mut outs = Vec::new();
        for mode in [
            HeadMode::Incremental,
            HeadMode::CascadedGates,
            HeadMode::SingleGate,
        ] {
            let mut m = model(mode);
            m.add_task(3).unwrap();
            outs.push(m.logits(&x).unwrap());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn fresh_gates_equal_sigmoid_beta() {
        let mut m = model(HeadMode::CascadedGates);
        for _ in 0..3 {
            m.add_task(2).unwrap();
        }
        let x = inputs(4, 9);
        let expected = sigmoid(10.0);
        for (_, _, g) in m.gate_values(&x).unwrap() {
            assert!(g.iter().all(|&v| v == expected));
        }
        let gated = m.logits(&x).unwrap();
        m.force_gates(Some(1.0));
        let ungated = m.logits(&x).unwrap();
        // task 1 passes through two gates, task 2 through one
        for (row_g, row_u) in gated.chunks(6).zip(ungated.chunks(6)) {
            for c in 0..6 {
                let gates_applied = match c {
                    0 | 1 => 2,
                    2 | 3 => 1,
                    _ => 0,
                };
                let rel = if row_u[c] == 0.0 {
                    0.0
                } else {
                    ((row_g[c] - row_u[c]) / row_u[c]).abs()
                };
                assert!(rel < 5e-4 * gates_applied.max(1) as f64);
                if gates_applied == 0 {
                    assert_eq!(row_g[c], row_u[c]);
                }
            }
        }
    }

    #[test]
    fn teacher_is_frozen_copy() {
        let mut m = model(HeadMode::CascadedGates);
        m.add_task(2).unwrap();
        m.add_task(2).unwrap();
        let teacher = snapshot_teacher(&m);
        let x = inputs(6, 11);
        assert_eq!(teacher.logits(&x).unwrap(), m.logits(&x).unwrap());
        assert_eq!(teacher.output_width(), 4);
        assert!(teacher
            .model()
            .parameters()
            .iter()
            .all(|p| !p.requires_grad()));

        let before = teacher.logits(&x).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(vec![6, 4], x.clone()).unwrap();
        let out = m.forward(&mut tape, &bound, xv).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        m.collect_grads(&tape, &bound).unwrap();
        let mut opt = SgdState::new(0.1, 0.0, &m.parameters()).unwrap();
        opt.step(&mut m.parameters_mut()).unwrap();
        assert_ne!(m.logits(&x).unwrap(), before);
        assert_eq!(teacher.logits(&x).unwrap(), before);
    }

    #[test]
    fn parameter_counts() {
        let mut m =
            ContinualModel::new(&[16, 64], HeadMode::CascadedGates, GateConfig::default(), 0)
                .unwrap();
        let mut last = m.count_parameters().total();
        for _ in 0..5 {
            m.add_task(2).unwrap();
            let now = m.count_parameters().total();
            assert!(now > last);
            last = now;
        }
        let c = m.count_parameters();
        assert_eq!(c.scaler_weights, 64 * 2 * 10);
        assert_eq!(c.scaler_biases, 2 * 10);
        assert_eq!(c.backbone, 16 * 64 + 64);
        assert_eq!(c.heads, 5 * (64 * 2 + 2));

        let mut inc =
            ContinualModel::new(&[16, 64], HeadMode::Incremental, GateConfig::default(), 0)
                .unwrap();
        for _ in 0..5 {
            inc.add_task(2).unwrap();
        }
        assert_eq!(inc.count_parameters().scalers(), 0);
    }
}
