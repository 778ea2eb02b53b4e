//! Losses, synthetic tasks, optimizers and the two-stage training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation_tables::ActivationTables;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fixed_point::{quantize_static, QFormat};
use crate::nna_engine::SequenceInput;
use crate::qnn::{ActivationMode, GateActivations, InputSpec, Model, ModelSpec, QuantPolicy, SequenceBatch, StepInput};
use crate::tensor::Tensor;

/// Hinge penalty variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityMode {
    /// `relu(z_min - z) + relu(z - z_max)`.
    #[default]
    TwoSided,
    /// `relu(z + z_min) + relu(z - z_max)`, as literally written in some
    /// formulations. With a negative `z_min` this only penalizes the top.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivityConfig {
    pub lambda: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub mode: ActivityMode,
}

impl Default for ActivityConfig {
    fn default() -> Self {
        ActivityConfig {
            lambda: 2.0,
            z_min: -4.0,
            z_max: 4.0,
            mode: ActivityMode::TwoSided,
        }
    }
}

impl ActivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_min < self.z_max) {
            return Err(Error::Config(format!(
                "z_min ({}) must be below z_max ({})",
                self.z_min, self.z_max
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn hinge(&self, z: f64) -> (f64, f64) {
        let lower = match self.mode {
            ActivityMode::TwoSided => self.z_min - z,
            ActivityMode::Literal => z + self.z_min,
        };
        let upper = z - self.z_max;
        let dl = match self.mode {
            ActivityMode::TwoSided => -1.0,
            ActivityMode::Literal => 1.0,
        };
        let mut v = 0.0;
        let mut g = 0.0;
        if lower > 0.0 {
            v += lower;
            g += dl;
        }
        if upper > 0.0 {
            v += upper;
            g += 1.0;
        }
        (v, g)
    }
}

/// Mean hinge penalty over all elements and its gradient.
pub fn activity_loss(z: &[f64], cfg: &ActivityConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    if z.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = z.len() as f64;
    let mut total = 0.0;
    let grad = z
        .iter()
        .map(|&x| {
            let (v, g) = cfg.hinge(x);
            total += v;
            g / n
        })
        .collect();
    Ok((total / n, grad))
}

/// The same penalty built on the tape over every gate pre-activation.
pub fn activity_loss_var(tape: &mut Tape, zs: &[GateActivations], cfg: &ActivityConfig) -> Result<Var> {
    cfg.validate()?;
    let count: usize = zs.iter().map(|z| tape.value(z.0).len()).sum();
    let mut acc: Option<Var> = None;
    for z in zs {
        let lower = match cfg.mode {
            ActivityMode::TwoSided => {
                let neg = tape.scale(z.0, -1.0);
                tape.add_scalar(neg, cfg.z_min)
            }
            ActivityMode::Literal => tape.add_scalar(z.0, cfg.z_min),
        };
        let lower = tape.relu(lower);
        let upper = tape.add_scalar(z.0, -cfg.z_max);
        let upper = tape.relu(upper);
        let both = tape.add(lower, upper)?;
        let s = tape.sum(both);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(match acc {
        None => tape.leaf(Tensor::scalar(0.0)),
        Some(a) => tape.scale(a, 1.0 / count.max(1) as f64),
    })
}

pub fn total_loss(task_loss: f64, activity: f64, lambda: f64) -> f64 {
    task_loss + lambda * activity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    AddingProblem,
    Parity,
    TokenClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Token tasks only.
    pub vocab: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Adding problem: values are drawn from `[0, amplitude)`.
    pub amplitude: f64,
    /// Uniform jitter amplitude added to feature inputs.
    pub noise: f64,
    /// Adding problem: a prediction counts as correct when its error is
    /// below `tolerance * amplitude`.
    pub tolerance: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::AddingProblem,
            seq_len: 20,
            vocab: 8,
            embed_dim: 8,
            num_classes: 4,
            train_size: 4000,
            val_size: 500,
            test_size: 1000,
            amplitude: 4.0,
            noise: 0.0,
            tolerance: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, ids: &[usize]) -> Targets {
        match self {
            Targets::Values(v) => Targets::Values(ids.iter().map(|&i| v[i]).collect()),
            Targets::Classes(c) => Targets::Classes(ids.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<SequenceInput>,
    pub targets: Targets,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.kind == TaskKind::TokenClassification && (self.vocab == 0 || self.embed_dim == 0 || self.num_classes < 2) {
            return Err(Error::Config("token task needs vocab, embed_dim > 0 and num_classes >= 2".into()));
        }
        if !(self.noise >= 0.0) || !(self.tolerance > 0.0) || !(self.amplitude > 0.0) {
            return Err(Error::Config("need noise >= 0, tolerance > 0 and amplitude > 0".into()));
        }
        Ok(())
    }

    pub fn input_spec(&self) -> InputSpec {
        match self.kind {
            TaskKind::AddingProblem => InputSpec::Features { dim: 2 },
            TaskKind::Parity => InputSpec::Features { dim: 1 },
            TaskKind::TokenClassification => InputSpec::Tokens {
                vocab: self.vocab,
                embed_dim: self.embed_dim,
            },
        }
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::AddingProblem => 1,
            TaskKind::Parity => 2,
            TaskKind::TokenClassification => self.num_classes,
        }
    }

    pub fn is_regression(&self) -> bool {
        self.kind == TaskKind::AddingProblem
    }
}

/// Deterministic dataset for one split.
pub fn gen_task(spec: &TaskSpec, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (stream, size) = match split {
        Split::Train => (1, spec.train_size),
        Split::Val => (2, spec.val_size),
        Split::Test => (3, spec.test_size),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let t = spec.seq_len;
    let jitter = |rng: &mut ChaCha8Rng| {
        if spec.noise > 0.0 {
            rng.gen_range(-spec.noise..=spec.noise)
        } else {
            0.0
        }
    };
    let mut inputs = Vec::with_capacity(size);
    let mut values = Vec::new();
    let mut classes = Vec::new();
    for _ in 0..size {
        match spec.kind {
            TaskKind::AddingProblem => {
                let p1 = rng.gen_range(0..t / 2);
                let p2 = rng.gen_range(t / 2..t);
                let mut data = Vec::with_capacity(2 * t);
                let mut label = 0.0;
                for step in 0..t {
                    let v: f64 = rng.gen_range(0.0..spec.amplitude) + jitter(&mut rng);
                    let marked = step == p1 || step == p2;
                    if marked {
                        label += v;
                    }
                    data.push(v);
                    data.push(if marked { 1.0 } else { 0.0 });
                }
                inputs.push(SequenceInput::Features(Tensor::new(t, 2, data)?));
                values.push(label);
            }
            TaskKind::Parity => {
                let mut parity = 0;
                let mut data = Vec::with_capacity(t);
                for _ in 0..t {
                    let bit = rng.gen_range(0..2usize);
                    parity ^= bit;
                    data.push(bit as f64 + jitter(&mut rng));
                }
                inputs.push(SequenceInput::Features(Tensor::new(t, 1, data)?));
                classes.push(parity);
            }
            TaskKind::TokenClassification => {
                let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..spec.vocab)).collect();
                classes.push(majority_class(&ids, spec.vocab, spec.num_classes));
                inputs.push(SequenceInput::Tokens(ids));
            }
        }
    }
    let targets = if spec.is_regression() {
        Targets::Values(values)
    } else {
        Targets::Classes(classes)
    };
    Ok(Dataset { inputs, targets })
}

/// Most frequent token (lowest id on ties), folded into the class range.
fn majority_class(ids: &[usize], vocab: usize, classes: usize) -> usize {
    let mut counts = vec![0usize; vocab];
    for &i in ids {
        counts[i] += 1;
    }
    let best = (0..vocab).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
    best % classes
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stack examples `ids` into a time-major batch.
    pub fn batch(&self, ids: &[usize]) -> Result<(SequenceBatch, Targets)> {
        let first = ids
            .first()
            .map(|&i| &self.inputs[i])
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let t = first.len();
        let mut steps = Vec::with_capacity(t);
        for s in 0..t {
            let step = match first {
                SequenceInput::Features(x) => {
                    let d = x.cols();
                    let mut data = Vec::with_capacity(ids.len() * d);
                    for &i in ids {
                        match &self.inputs[i] {
                            SequenceInput::Features(xi) if xi.shape() == x.shape() => {
                                data.extend_from_slice(xi.row_slice(s))
                            }
                            _ => return Err(Error::Config("ragged batch".into())),
                        }
                    }
                    StepInput::Features(Tensor::new(ids.len(), d, data)?)
                }
                SequenceInput::Tokens(_) => {
                    let mut tok = Vec::with_capacity(ids.len());
                    for &i in ids {
                        match &self.inputs[i] {
                            SequenceInput::Tokens(v) if v.len() == t => tok.push(v[s]),
                            _ => return Err(Error::Config("ragged batch".into())),
                        }
                    }
                    StepInput::Tokens(tok)
                }
            };
            steps.push(step);
        }
        Ok((
            SequenceBatch {
                steps,
                batch: ids.len(),
            },
            self.targets.select(ids),
        ))
    }
}

/// Task loss on the tape: mean squared error or mean cross-entropy.
pub fn task_loss_var(tape: &mut Tape, output: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Values(v) => {
            let t = tape.leaf(Tensor::new(v.len(), 1, v.clone())?);
            let d = tape.sub(output, t)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        }
        Targets::Classes(c) => tape.softmax_cross_entropy(output, c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub hold_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Return the validation-best of the initial model and the evaluated
    /// checkpoints instead of the last iterate.
    pub select_best: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: OptimizerKind::Adam,
            steps: 3000,
            batch_size: 32,
            warmup_steps: 100,
            hold_steps: 1000,
            peak_lr: 1e-2,
            floor_lr: 1e-4,
            grad_clip: 1.0,
            eval_every: 500,
            select_best: false,
        }
    }
}

impl OptimConfig {
    /// Constant learning rate for fine-tuning.
    pub fn constant(steps: usize, lr: f64) -> Self {
        OptimConfig {
            steps,
            warmup_steps: 0,
            hold_steps: steps,
            peak_lr: lr,
            floor_lr: lr,
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.floor_lr > 0.0) || self.floor_lr > self.peak_lr {
            return Err(Error::Config("need 0 < floor_lr <= peak_lr".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    /// Linear warmup to the peak, hold, then exponential decay that reaches
    /// the floor on the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_start = self.warmup_steps + self.hold_steps;
        if step < decay_start || self.floor_lr == self.peak_lr {
            return self.peak_lr;
        }
        let span = self.steps.saturating_sub(decay_start + 1).max(1) as f64;
        let frac = ((step - decay_start) as f64 / span).min(1.0);
        self.peak_lr * (self.floor_lr / self.peak_lr).powf(frac)
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (((x, d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = B1 * *mi + (1.0 - B1) * d;
                        *vi = B2 * *vi + (1.0 - B2) * d * d;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { layers: 2, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelDims,
    pub activity: ActivityConfig,
    pub optim: OptimConfig,
    pub eval: EvalOptions,
}

impl TrainConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input: self.task.input_spec(),
            layers: self.model.layers,
            hidden: self.model.hidden,
            outputs: self.task.outputs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.activity.validate()?;
        self.optim.validate()?;
        self.eval.validate()
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Histogram bucket edges for gate pre-activations; values below the
    /// first or above the last edge land in the end buckets.
    pub histogram_edges: Vec<f64>,
    /// Lower edge of the band where table activations are least accurate.
    pub band_lo: f64,
    pub band_hi: f64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            histogram_edges: (-8..=8).map(|e| e as f64).collect(),
            band_lo: 4.0,
            band_hi: 7.0,
            batch_size: 500,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("histogram edges must be strictly ascending".into()));
        }
        if !(self.band_lo < self.band_hi) || self.batch_size == 0 {
            return Err(Error::Config("need band_lo < band_hi and batch_size > 0".into()));
        }
        Ok(())
    }
}

pub const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZHistogram {
    pub edges: Vec<f64>,
    /// Per gate: `edges.len() + 1` buckets, the first and last open-ended.
    pub counts: [Vec<u64>; 4],
}

impl ZHistogram {
    fn new(edges: &[f64]) -> Self {
        let n = edges.len() + 1;
        ZHistogram {
            edges: edges.to_vec(),
            counts: std::array::from_fn(|_| vec![0; n]),
        }
    }

    fn add(&mut self, gate: usize, z: f64) {
        let b = self.edges.partition_point(|&e| e <= z);
        self.counts[gate][b] += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub z_count: u64,
    pub out_of_range_fraction: f64,
    /// Fraction of gate inputs with `band_lo < |z| < band_hi`.
    pub error_band_fraction: f64,
    /// Gate inputs past the table saturation points.
    pub saturated: u64,
    pub histogram: ZHistogram,
}

#[derive(Debug, Default, Clone, Copy)]
struct ZStats {
    count: u64,
    outside: u64,
    band: u64,
    saturated: u64,
}

fn z_stats(
    tape: &Tape,
    zs: &[GateActivations],
    hidden: usize,
    activity: &ActivityConfig,
    opts: &EvalOptions,
    tables: &ActivationTables,
    mut hist: Option<&mut ZHistogram>,
) -> ZStats {
    let mut s = ZStats::default();
    let sat = [tables.sigmoid.saturation(), tables.tanh.saturation()];
    for z in zs {
        let v = tape.value(z.0);
        for r in 0..v.rows() {
            for (c, &x) in v.row_slice(r).iter().enumerate() {
                let gate = c / hidden;
                s.count += 1;
                if x < activity.z_min || x > activity.z_max {
                    s.outside += 1;
                }
                if x.abs() > opts.band_lo && x.abs() < opts.band_hi {
                    s.band += 1;
                }
                let (lo, hi) = sat[(gate == 2) as usize];
                if x <= lo || x >= hi {
                    s.saturated += 1;
                }
                if let Some(h) = hist.as_deref_mut() {
                    h.add(gate, x);
                }
            }
        }
    }
    s
}

fn correct(output: &Tensor, targets: &Targets, tolerance: f64) -> usize {
    match targets {
        Targets::Values(v) => v
            .iter()
            .enumerate()
            .filter(|(i, &t)| (output.get(*i, 0) - t).abs() < tolerance)
            .count(),
        Targets::Classes(c) => c
            .iter()
            .enumerate()
            .filter(|(i, &t)| {
                let row = output.row_slice(*i);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                best == t
            })
            .count(),
    }
}

fn policy_tables(policy: &QuantPolicy) -> std::sync::Arc<ActivationTables> {
    match &policy.activations {
        ActivationMode::Pwl(t) => t.clone(),
        ActivationMode::Exact => {
            static STANDARD: std::sync::OnceLock<std::sync::Arc<ActivationTables>> = std::sync::OnceLock::new();
            STANDARD.get_or_init(|| std::sync::Arc::new(ActivationTables::standard())).clone()
        }
    }
}

/// Metrics of `model` under `policy` on a whole dataset.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    policy: &QuantPolicy,
    task: &TaskSpec,
    activity: &ActivityConfig,
    opts: &EvalOptions,
) -> Result<EvalMetrics> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let tables = policy_tables(policy);
    let mut hist = ZHistogram::new(&opts.histogram_edges);
    let mut stats = ZStats::default();
    let mut loss_sum = 0.0;
    let mut right = 0usize;
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(opts.batch_size) {
        let (batch, targets) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, policy)?;
        let loss = task_loss_var(&mut tape, out.output, &targets)?;
        loss_sum += tape.value(loss).item() * chunk.len() as f64;
        right += correct(tape.value(out.output), &targets, task.tolerance * task.amplitude);
        let s = z_stats(&tape, &out.z, model.spec.hidden, activity, opts, &tables, Some(&mut hist));
        stats.count += s.count;
        stats.outside += s.outside;
        stats.band += s.band;
        stats.saturated += s.saturated;
    }
    let n = data.len() as f64;
    let zc = stats.count.max(1) as f64;
    Ok(EvalMetrics {
        accuracy: right as f64 / n,
        loss: loss_sum / n,
        z_count: stats.count,
        out_of_range_fraction: stats.outside as f64 / zc,
        error_band_fraction: stats.band as f64 / zc,
        saturated: stats.saturated,
        histogram: hist,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub activity_loss: f64,
    pub total_loss: f64,
    pub batch_out_of_range: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_out_of_range: Option<f64>,
}

pub fn write_metrics_log(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricsRecord>,
    /// Validation metrics before the first step and of the returned model.
    pub initial: EvalMetrics,
    pub last: EvalMetrics,
    /// Step count of the returned model (0 is the initial one).
    pub selected_step: usize,
}

// higher accuracy wins, then lower loss; ties keep the earlier one
fn better(a: &EvalMetrics, b: &EvalMetrics) -> bool {
    a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.loss < b.loss)
}

fn l2_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Generic loop: minibatch training of `model` under `policy`.
pub fn train_model(
    cfg: &TrainConfig,
    mut model: Model,
    policy: &QuantPolicy,
    train: &Dataset,
    val: &Dataset,
    label: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    let opt_cfg = &cfg.optim;
    let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = Optimizer::new(opt_cfg.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match cfg.stage {
        Stage::I => 11,
        Stage::II => 12,
    });
    let eval = |m: &Model| evaluate(m, val, policy, &cfg.task, &cfg.activity, &cfg.eval);
    let initial = eval(&model)?;
    let mut best: Option<(Model, EvalMetrics, usize)> = None;
    if opt_cfg.select_best {
        best = Some((model.clone(), initial.clone(), 0));
    }
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let tables = policy_tables(policy);
    for step in 0..opt_cfg.steps {
        let bs = opt_cfg.batch_size.min(train.len());
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let ids = &order[cursor..cursor + bs];
        cursor += bs;
        let (batch, targets) = train.batch(ids)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, policy)?;
        let task = task_loss_var(&mut tape, out.output, &targets)?;
        let act = activity_loss_var(&mut tape, &out.z, &cfg.activity)?;
        let weighted = tape.scale(act, cfg.activity.lambda);
        let total = tape.add(task, weighted)?;
        let (tl, al, tot) = (tape.value(task).item(), tape.value(act).item(), tape.value(total).item());
        if !tot.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("training loss is non-finite (task {tl}, activity {al})"),
            });
        }
        let grads = tape.backward(total)?;
        let mut g: Vec<Tensor> = out.params.iter().map(|&p| grads.get(p)).collect();
        let norm = l2_norm(&g);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: "training gradient is non-finite".into(),
            });
        }
        if opt_cfg.grad_clip > 0.0 && norm > opt_cfg.grad_clip {
            let s = opt_cfg.grad_clip / norm;
            for t in &mut g {
                *t = t.map(|x| x * s);
            }
        }
        let lr = opt_cfg.lr_at(step);
        opt.step(&mut model.tensors_mut(), &g, lr);
        if let Some(w) = policy.weights {
            model.clamp_weights(w.format);
        }

        let last_step = step + 1 == opt_cfg.steps;
        let do_eval = last_step || (opt_cfg.eval_every > 0 && (step + 1) % opt_cfg.eval_every == 0);
        if do_eval || step % 50 == 0 {
            let zs = z_stats(&tape, &out.z, model.spec.hidden, &cfg.activity, &cfg.eval, &tables, None);
            let mut rec = MetricsRecord {
                stage: label.to_string(),
                step: step + 1,
                lr,
                task_loss: tl,
                activity_loss: al,
                total_loss: tot,
                batch_out_of_range: zs.outside as f64 / zs.count.max(1) as f64,
                val_accuracy: None,
                val_loss: None,
                val_out_of_range: None,
            };
            if do_eval && !last_step {
                let m = eval(&model)?;
                rec.val_accuracy = Some(m.accuracy);
                rec.val_loss = Some(m.loss);
                rec.val_out_of_range = Some(m.out_of_range_fraction);
                if let Some(b) = best.as_mut() {
                    if better(&m, &b.1) {
                        *b = (model.clone(), m, step + 1);
                    }
                }
            }
            log.push(rec);
        }
    }
    let last = if opt_cfg.steps == 0 { initial.clone() } else { eval(&model)? };
    if let Some(rec) = log.last_mut() {
        rec.val_accuracy = Some(last.accuracy);
        rec.val_loss = Some(last.loss);
        rec.val_out_of_range = Some(last.out_of_range_fraction);
    }
    let mut selected_step = opt_cfg.steps;
    let (model, last) = match best {
        Some((m, metrics, step)) if !better(&last, &metrics) => {
            selected_step = step;
            (m, metrics)
        }
        _ => (model, last),
    };
    Ok(TrainOutcome {
        model,
        log,
        initial,
        last,
        selected_step,
    })
}

/// Stage I: from scratch, full-precision activations, weights quantized
/// with an identity straight-through gradient, activity penalty on.
pub fn stage1_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::I {
        return Err(Error::Config("stage1_train needs stage = I".into()));
    }
    let train = gen_task(&cfg.task, cfg.seed, Split::Train)?;
    let val = gen_task(&cfg.task, cfg.seed, Split::Val)?;
    let model = Model::init(cfg.model_spec(), cfg.seed)?;
    train_model(cfg, model, &QuantPolicy::weights_only(), &train, &val, "stage1")
}

/// The comparison baseline: the stage I procedure without the activity
/// penalty. Stage I with `lambda = 0` reproduces it bit for bit.
pub fn baseline_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        stage: Stage::I,
        activity: ActivityConfig {
            lambda: 0.0,
            ..cfg.activity
        },
        ..cfg.clone()
    };
    stage1_train(&cfg)
}

/// Stage II: fine-tune a stage I checkpoint under the accelerator policy.
pub fn stage2_train(cfg: &TrainConfig, init: &Model, policy: &QuantPolicy) -> Result<TrainOutcome> {
    if cfg.stage != Stage::II {
        return Err(Error::Config("stage2_train needs stage = II".into()));
    }
    if init.spec != cfg.model_spec() {
        return Err(Error::Config(format!(
            "checkpoint shape {:?} does not match the configured model {:?}",
            init.spec,
            cfg.model_spec()
        )));
    }
    let train = gen_task(&cfg.task, cfg.seed, Split::Train)?;
    let val = gen_task(&cfg.task, cfg.seed, Split::Val)?;
    train_model(cfg, init.clone(), policy, &train, &val, "stage2")
}

/// Mean squared difference between each parameter tensor and its
/// policy-quantized form.
pub fn quantization_mse(model: &Model, policy: &QuantPolicy) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, t) in model.tensors() {
        let q: Option<QFormat> = if Model::is_weight(&name) {
            policy.weights.map(|w| w.format)
        } else {
            policy.bias_format()
        };
        let mse = match q {
            None => 0.0,
            Some(q) => {
                let mut s = 0.0;
                for &x in t.data() {
                    let y = quantize_static(x, q, crate::fixed_point::RoundingMode::NearestTiesAwayFromZero)?;
                    s += (x - y) * (x - y);
                }
                s / t.len().max(1) as f64
            }
        };
        out.push((name, mse));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bounds() -> ActivityConfig {
        ActivityConfig::default()
    }

    #[test]
    fn activity_examples() {
        assert_eq!(activity_loss(&[0.0, 1.0, -2.0], &bounds()).unwrap().0, 0.0);
        assert_eq!(activity_loss(&[5.0], &bounds()).unwrap().0, 1.0);
        let (v, g) = activity_loss(&[-6.0], &bounds()).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g, vec![-1.0]);
        let bad = ActivityConfig { z_min: 1.0, z_max: 1.0, ..bounds() };
        assert!(matches!(activity_loss(&[0.0], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn literal_mode_misses_the_low_side() {
        let lit = ActivityConfig { mode: ActivityMode::Literal, ..bounds() };
        assert_eq!(activity_loss(&[-6.0], &lit).unwrap().0, 0.0);
        assert_eq!(activity_loss(&[6.0], &lit).unwrap().0, 2.0 + 2.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.5, 2.0), 2.0);
        assert_eq!(total_loss(0.7, 0.0, 5.0), 0.7);
        assert_eq!(total_loss(0.0, 3.0, 0.0), 0.0);
    }

    #[test]
    fn tape_activity_matches_direct() {
        let z = Tensor::new(2, 4, vec![-6.0, -4.0, 0.0, 4.0, 4.5, 9.0, -3.9, -4.1]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(z.clone());
        let l = activity_loss_var(&mut tape, &[GateActivations(v)], &bounds()).unwrap();
        let (direct, grad) = activity_loss(z.data(), &bounds()).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-15);
        let g = tape.backward(l).unwrap().get(v);
        assert_eq!(g.data(), &grad[..]);
    }

    #[test]
    fn task_generation() {
        let spec = TaskSpec { train_size: 50, ..TaskSpec::default() };
        let a = gen_task(&spec, 3, Split::Train).unwrap();
        assert_eq!(a, gen_task(&spec, 3, Split::Train).unwrap());
        assert_ne!(a, gen_task(&spec, 3, Split::Val).unwrap());
        let Targets::Values(labels) = &a.targets else { panic!() };
        for (x, &y) in a.inputs.iter().zip(labels) {
            let SequenceInput::Features(x) = x else { panic!() };
            let s: f64 = (0..x.rows()).filter(|&t| x.get(t, 1) == 1.0).map(|t| x.get(t, 0)).sum();
            assert_eq!(s, y);
            assert_eq!((0..x.rows()).filter(|&t| x.get(t, 1) == 1.0).count(), 2);
        }
        let par = TaskSpec { kind: TaskKind::Parity, train_size: 30, ..TaskSpec::default() };
        let p = gen_task(&par, 1, Split::Train).unwrap();
        let Targets::Classes(c) = &p.targets else { panic!() };
        for (x, &y) in p.inputs.iter().zip(c) {
            let SequenceInput::Features(x) = x else { panic!() };
            assert_eq!(x.data().iter().map(|&b| b as usize).sum::<usize>() % 2, y);
        }
        assert_eq!(majority_class(&[0, 0, 0], 4, 2), 0);
        assert_eq!(majority_class(&[3, 3, 1], 4, 2), 1);
    }

    #[test]
    fn lr_schedule_shape() {
        let o = OptimConfig {
            steps: 100,
            warmup_steps: 10,
            hold_steps: 20,
            peak_lr: 1e-2,
            floor_lr: 1e-4,
            ..OptimConfig::default()
        };
        assert!((o.lr_at(0) - 1e-3).abs() < 1e-15);
        assert_eq!(o.lr_at(9), 1e-2);
        assert_eq!(o.lr_at(29), 1e-2);
        assert!(o.lr_at(60) < 1e-2 && o.lr_at(60) > 1e-4);
        assert!((o.lr_at(99) - 1e-4).abs() < 1e-12);
        assert_eq!(OptimConfig::constant(10, 3e-4).lr_at(7), 3e-4);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Tensor::row(vec![3.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[2]);
        for _ in 0..2000 {
            let g = x.map(|v| 2.0 * v);
            opt.step(&mut [&mut x], &[g], 1e-2);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-3));
    }

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            stage: Stage::I,
            seed: 5,
            task: TaskSpec {
                seq_len: 6,
                train_size: 64,
                val_size: 32,
                test_size: 32,
                ..TaskSpec::default()
            },
            model: ModelDims { layers: 1, hidden: 4 },
            activity: bounds(),
            optim: OptimConfig {
                steps,
                batch_size: 8,
                warmup_steps: 2,
                hold_steps: 2,
                eval_every: 5,
                ..OptimConfig::default()
            },
            eval: EvalOptions::default(),
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = tiny(0);
        let out = stage1_train(&cfg).unwrap();
        assert_eq!(out.model, Model::init(cfg.model_spec(), cfg.seed).unwrap());
        assert_eq!(out.initial, out.last);
        assert_eq!(out.selected_step, 0);
    }

    #[test]
    fn select_best_never_loses_to_the_start_or_the_end() {
        let mut cfg = tiny(30);
        let plain = stage1_train(&cfg).unwrap();
        cfg.optim.select_best = true;
        let picked = stage1_train(&cfg).unwrap();
        assert_eq!(plain.log, picked.log);
        assert!(!better(&picked.initial, &picked.last));
        assert!(!better(&plain.last, &picked.last));
        let vals: Vec<f64> = picked.log.iter().filter_map(|r| r.val_accuracy).collect();
        assert!(vals.iter().all(|&a| a <= picked.last.accuracy));
        if picked.selected_step == 30 {
            assert_eq!(picked.model, plain.model);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = tiny(40);
        let a = stage1_train(&cfg).unwrap();
        let b = stage1_train(&cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert!(a.last.loss < a.initial.loss);
        // weights stay inside the Q1.7 range
        for (name, t) in a.model.tensors() {
            if Model::is_weight(&name) {
                assert!(t.data().iter().all(|&w| (-1.0..=127.0 / 128.0).contains(&w)));
            }
        }
    }

    #[test]
    fn stage2_checks_shape_and_stage() {
        let cfg = tiny(0);
        let m = stage1_train(&cfg).unwrap().model;
        let policy = QuantPolicy::nna(
            std::sync::Arc::new(ActivationTables::standard()),
            crate::fixed_point::DynamicScaleSet::standard(),
        );
        assert!(stage2_train(&cfg, &m, &policy).is_err());
        let cfg2 = TrainConfig { stage: Stage::II, ..cfg.clone() };
        let out = stage2_train(&cfg2, &m, &policy).unwrap();
        let direct = evaluate(
            &m,
            &gen_task(&cfg.task, cfg.seed, Split::Val).unwrap(),
            &policy,
            &cfg.task,
            &cfg.activity,
            &cfg.eval,
        )
        .unwrap();
        assert_eq!(out.last, direct);
        let other = TrainConfig { model: ModelDims { layers: 2, hidden: 4 }, ..cfg2 };
        assert!(matches!(stage2_train(&other, &m, &policy), Err(Error::Config(_))));
    }

    #[test]
    fn quantization_mse_off_is_zero() {
        let m = Model::init(tiny(0).model_spec(), 1).unwrap();
        assert!(quantization_mse(&m, &QuantPolicy::off()).unwrap().iter().all(|(_, v)| *v == 0.0));
        assert!(quantization_mse(&m, &QuantPolicy::weights_only()).unwrap().iter().any(|(_, v)| *v > 0.0));
    }

    proptest! {
        #[test]
        fn zero_iff_inside(z in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            let (v, g) = activity_loss(&z, &bounds()).unwrap();
            let inside = z.iter().all(|&x| (-4.0..=4.0).contains(&x));
            prop_assert_eq!(v == 0.0, inside);
            let n = z.len() as f64;
            for (&x, &gx) in z.iter().zip(&g) {
                let expect = if x < -4.0 { -1.0 / n } else if x > 4.0 { 1.0 / n } else { 0.0 };
                prop_assert_eq!(gx, expect);
            }
        }

        #[test]
        fn total_loss_linear_in_lambda(t in -5.0f64..5.0, a in 0.0f64..5.0, l1 in 0.0f64..4.0, l2 in 0.0f64..4.0) {
            let lhs = total_loss(t, a, l1 + l2);
            let rhs = total_loss(t, a, l1) + l2 * a;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
