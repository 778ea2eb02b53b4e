#![allow(dead_code)]

use std::sync::Arc;

use nna_aat::activation_tables::ActivationTables;
use nna_aat::autodiff::Tape;
use nna_aat::fixed_point::DynamicScaleSet;
use nna_aat::nna_engine::SequenceInput;
use nna_aat::qnn::{InputSpec, Model, ModelSpec, QuantPolicy, SequenceBatch, StepInput};
use nna_aat::tensor::Tensor;
use nna_aat::training::{task_loss_var, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, b: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect()).unwrap()
}

pub fn nna_policy() -> QuantPolicy {
    QuantPolicy::nna(Arc::new(ActivationTables::standard()), DynamicScaleSet::standard())
}

/// Model with every tensor redrawn from `±weight_bound`; biases from
/// `±bias_bound`.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    input: InputSpec,
    layers: usize,
    hidden: usize,
    outputs: usize,
    weight_bound: f64,
    bias_bound: f64,
) -> Model {
    let spec = ModelSpec {
        input,
        layers,
        hidden,
        outputs,
    };
    let mut m = Model::init(spec, rng.gen()).unwrap();
    if let Some(e) = &mut m.embedding {
        *e = uniform(rng, e.rows(), e.cols(), 2.0 * weight_bound);
    }
    for l in &mut m.lstm {
        l.w = uniform(rng, l.w.rows(), l.w.cols(), weight_bound);
        l.u = uniform(rng, l.u.rows(), l.u.cols(), weight_bound);
        l.b = uniform(rng, 1, l.b.cols(), bias_bound);
    }
    m.head.w = uniform(rng, m.head.w.rows(), m.head.w.cols(), weight_bound);
    m.head.b = uniform(rng, 1, m.head.b.cols(), bias_bound);
    m
}

pub fn random_features(rng: &mut ChaCha8Rng, steps: usize, dim: usize, amp: f64) -> SequenceInput {
    SequenceInput::Features(uniform(rng, steps, dim, amp))
}

pub fn random_tokens(rng: &mut ChaCha8Rng, steps: usize, vocab: usize) -> SequenceInput {
    SequenceInput::Tokens((0..steps).map(|_| rng.gen_range(0..vocab)).collect())
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub fn loss_and_grads(model: &Model, batch: &SequenceBatch, targets: &Targets) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, &QuantPolicy::off()).unwrap();
    let l = task_loss_var(&mut tape, out.output, targets).unwrap();
    let g = tape.backward(l).unwrap();
    (tape.value(l).item(), out.params.iter().map(|&p| g.get(p)).collect())
}

fn loss_only(model: &Model, batch: &SequenceBatch, targets: &Targets) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, &QuantPolicy::off()).unwrap();
    let l = task_loss_var(&mut tape, out.output, targets).unwrap();
    tape.value(l).item()
}

/// Worst relative error over all parameters of one random network, with
/// `|a - n| / max(|a|, |n|)` and near-zero pairs compared absolutely.
pub fn fd_worst_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(1..=2);
    let hidden = rng.gen_range(1..=4);
    let steps = rng.gen_range(1..=4);
    let batch = rng.gen_range(1..=3);
    let tokens = rng.gen_bool(0.3);
    let (input, step_inputs): (InputSpec, Vec<StepInput>) = if tokens {
        let vocab = 5;
        (
            InputSpec::Tokens { vocab, embed_dim: 3 },
            (0..steps)
                .map(|_| StepInput::Tokens((0..batch).map(|_| rng.gen_range(0..vocab)).collect()))
                .collect(),
        )
    } else {
        let dim = rng.gen_range(1..=3);
        (
            InputSpec::Features { dim },
            (0..steps).map(|_| StepInput::Features(uniform(&mut rng, batch, dim, 1.5))).collect(),
        )
    };
    let classes = rng.gen_bool(0.5);
    let outputs = if classes { 3 } else { 1 };
    let mut model = random_model(&mut rng, input, layers, hidden, outputs, 0.8, 0.5);
    let targets = if classes {
        Targets::Classes((0..batch).map(|_| rng.gen_range(0..outputs)).collect())
    } else {
        Targets::Values((0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let data = SequenceBatch {
        steps: step_inputs,
        batch,
    };

    let (_, analytic) = loss_and_grads(&model, &data, &targets);
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = model.tensors_mut()[ti].data()[k];
            model.tensors_mut()[ti].data_mut()[k] = orig + FD_STEP;
            let up = loss_only(&model, &data, &targets);
            model.tensors_mut()[ti].data_mut()[k] = orig - FD_STEP;
            let down = loss_only(&model, &data, &targets);
            model.tensors_mut()[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[k];
            let scale = a.abs().max(numeric.abs());
            // Below this the difference quotient itself is rounding noise.
            let err = if scale < 1e-4 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}
