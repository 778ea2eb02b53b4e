//! Integer-only LSTM and dense kernels operating on Q1.7 codes.
//!
//! Number formats:
//!
//! | quantity            | container | scale      |
//! |---------------------|-----------|------------|
//! | weights, x, h       | `i8`      | `2^-7`     |
//! | MAC accumulator, b  | `i32`     | `2^-14`    |
//! | activation levels   | `i32`     | `2^-15`    |
//! | cell state          | `i32`     | `2^-26`, saturating at ±16 |
//!
//! Every accumulation is checked; overflow is an error, never a wrap.

use std::sync::Arc;

use crate::activation_tables::{ActivationTables, PwlTable, LEVEL_FRAC_BITS};
use crate::error::{Error, Result};
use crate::fixed_point::{DynamicScaleSet, QFormat, RoundingMode};
use crate::qnn::{
    ActivationMode, CellStateMode, DenseParams, HiddenQuant, InputQuant, LstmLayerParams, Model,
    QuantPolicy, ACC_FRAC_BITS, CELL_FRAC_BITS,
};
use crate::tensor::Tensor;

const CODE_FRAC_BITS: u32 = 7;

/// How a layer receives its input.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineInputMode {
    /// Raw reals from the CPU, scaled per step by a power of two.
    Dynamic(DynamicScaleSet),
    /// Q1.7 codes from a previous layer.
    Static,
}

#[derive(Debug, Clone, Copy)]
pub enum EngineInput<'a> {
    Codes(&'a [i8]),
    Raw(&'a [f64]),
}

/// Weight code of `x`: Q1.7, round to nearest.
fn weight_code(x: f64) -> i8 {
    let c = (x * 128.0).round().clamp(-128.0, 127.0);
    c as i8
}

fn bias_code(x: f64) -> Result<i32> {
    let c = (x * (1u64 << ACC_FRAC_BITS) as f64).round();
    if !(c >= i32::MIN as f64 && c <= i32::MAX as f64) {
        return Err(Error::Overflow("bias conversion"));
    }
    Ok(c as i32)
}

/// Pick the scale exponent and Q1.7 codes (toward zero) for raw inputs.
fn dynamic_codes(xs: &[f64], scales: &DynamicScaleSet) -> Result<(u32, Vec<i8>)> {
    if let Some((index, &value)) = xs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let max_code = 127.0 / 128.0;
    let exps = scales.exponents();
    let mut chosen = *exps.last().expect("non-empty scale set");
    for &e in exps {
        let s = (1u64 << e) as f64;
        if xs.iter().all(|&x| x / s >= -1.0 && x / s <= max_code) {
            chosen = e;
            break;
        }
    }
    let s = (1u64 << chosen) as f64;
    let codes = xs
        .iter()
        .map(|&x| ((x / s).clamp(-1.0, max_code) * 128.0).trunc() as i8)
        .collect();
    Ok((chosen, codes))
}

/// Integer LSTM layer.
#[derive(Debug, Clone)]
pub struct IntLayer {
    hidden: usize,
    input_dim: usize,
    /// `4H x D`, row-major.
    w: Vec<i8>,
    /// `4H x H`, row-major.
    u: Vec<i8>,
    /// `4H`, units of `2^-14`.
    bias: Vec<i32>,
    tables: Arc<ActivationTables>,
    input: EngineInputMode,
    /// Saturation bound of the cell state in `2^-26` units (inclusive
    /// range `[-bound, bound - 1]`).
    cell_bound: i64,
}

impl IntLayer {
    pub fn from_codes(
        hidden: usize,
        input_dim: usize,
        w: Vec<i8>,
        u: Vec<i8>,
        bias: Vec<i32>,
        tables: Arc<ActivationTables>,
        input: EngineInputMode,
    ) -> Result<Self> {
        if w.len() != 4 * hidden * input_dim {
            return Err(Error::shape("IntLayer.w", &[w.len()], &[4 * hidden, input_dim]));
        }
        if u.len() != 4 * hidden * hidden {
            return Err(Error::shape("IntLayer.u", &[u.len()], &[4 * hidden, hidden]));
        }
        if bias.len() != 4 * hidden {
            return Err(Error::shape("IntLayer.bias", &[bias.len()], &[4 * hidden]));
        }
        for t in [&tables.tanh, &tables.sigmoid] {
            if t.grid_exp() > ACC_FRAC_BITS + 12 {
                return Err(Error::Policy("table grid finer than the engine supports".into()));
            }
        }
        Ok(IntLayer {
            hidden,
            input_dim,
            w,
            u,
            bias,
            tables,
            input,
            cell_bound: 16i64 << CELL_FRAC_BITS,
        })
    }

    /// Quantize float parameters into a layer.
    pub fn from_params(
        params: &LstmLayerParams,
        tables: Arc<ActivationTables>,
        input: EngineInputMode,
    ) -> Result<Self> {
        let w = params.w.data().iter().map(|&x| weight_code(x)).collect();
        let u = params.u.data().iter().map(|&x| weight_code(x)).collect();
        let bias = params
            .b
            .data()
            .iter()
            .map(|&x| bias_code(x))
            .collect::<Result<_>>()?;
        Self::from_codes(params.hidden(), params.input_dim(), w, u, bias, tables, input)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input_mode(&self) -> &EngineInputMode {
        &self.input
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    /// Q1.7 codes.
    pub h: Vec<i8>,
    /// `2^-26` units.
    pub c: Vec<i32>,
}

impl EngineState {
    pub fn zeros(hidden: usize) -> Self {
        EngineState {
            h: vec![0; hidden],
            c: vec![0; hidden],
        }
    }
}

/// Every intermediate code of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepCodes {
    /// Scale exponent chosen for a dynamic input.
    pub input_exponent: Option<u32>,
    pub x: Vec<i8>,
    pub h_prev: Vec<i8>,
    /// Pre-activations in accumulator units (`2^-14`).
    pub z_acc: Vec<i32>,
    /// Pre-activations snapped onto the activation grid.
    pub z_grid: Vec<i64>,
    /// Activation output codes, gates `i, f, g, o`.
    pub gates: Vec<u8>,
    pub c: Vec<i32>,
    pub tanh_c: Vec<u8>,
    pub h: Vec<i8>,
    /// Cell elements that hit the saturation bound this step.
    pub saturations: usize,
}

/// Move a fixed-point value from `from` to `to` fractional bits, shifting
/// toward zero when dropping bits.
#[inline]
fn requantize(v: i64, from: u32, to: u32) -> i64 {
    if from >= to {
        v / (1i64 << (from - to))
    } else {
        v << (to - from)
    }
}

fn dot(weights: &[i8], codes: &[i8]) -> Result<i32> {
    weights.iter().zip(codes).try_fold(0i32, |acc, (&w, &x)| {
        acc.checked_add(w as i32 * x as i32)
            .ok_or(Error::Overflow("MAC accumulator"))
    })
}

fn activation_code(table: &PwlTable, acc: i64, frac_bits: u32) -> (i64, u8) {
    let k = requantize(acc, frac_bits, table.grid_exp());
    (k, table.code_at_grid(k))
}

/// One integer LSTM step.
pub fn engine_lstm_step(
    layer: &IntLayer,
    input: EngineInput<'_>,
    state: &EngineState,
) -> Result<(EngineState, StepCodes)> {
    let n = layer.hidden;
    if state.h.len() != n || state.c.len() != n {
        return Err(Error::shape("engine state", &[state.h.len(), state.c.len()], &[n, n]));
    }
    let (input_exponent, x) = match (input, &layer.input) {
        (EngineInput::Raw(xs), EngineInputMode::Dynamic(scales)) => {
            let (e, codes) = dynamic_codes(xs, scales)?;
            (Some(e), codes)
        }
        (EngineInput::Raw(xs), EngineInputMode::Static) => {
            (None, dynamic_codes(xs, &DynamicScaleSet::new(&[1.0])?)?.1)
        }
        (EngineInput::Codes(c), EngineInputMode::Static) => (None, c.to_vec()),
        (EngineInput::Codes(_), EngineInputMode::Dynamic(_)) => {
            return Err(Error::Policy("dynamic layer expects raw inputs".into()))
        }
    };
    if x.len() != layer.input_dim {
        return Err(Error::shape("engine input", &[x.len()], &[layer.input_dim]));
    }
    let d = layer.input_dim;
    let shift = input_exponent.unwrap_or(0);
    let mut z_acc = Vec::with_capacity(4 * n);
    for r in 0..4 * n {
        let ax = dot(&layer.w[r * d..(r + 1) * d], &x)?;
        let ax = ax
            .checked_mul(1 << shift)
            .ok_or(Error::Overflow("scaled input accumulator"))?;
        let ah = dot(&layer.u[r * n..(r + 1) * n], &state.h)?;
        let z = ax
            .checked_add(ah)
            .and_then(|s| s.checked_add(layer.bias[r]))
            .ok_or(Error::Overflow("MAC accumulator"))?;
        z_acc.push(z);
    }

    let tables = &layer.tables;
    let mut z_grid = Vec::with_capacity(4 * n);
    let mut gates = Vec::with_capacity(4 * n);
    for (r, &z) in z_acc.iter().enumerate() {
        let table = if r / n == 2 { &tables.tanh } else { &tables.sigmoid };
        let (k, code) = activation_code(table, z as i64, ACC_FRAC_BITS);
        z_grid.push(k);
        gates.push(code);
    }
    let level = |t: &PwlTable, code: u8| t.codebook()[code as usize] as i64;

    let mut next = EngineState::zeros(n);
    let mut tanh_c = Vec::with_capacity(n);
    let mut saturations = 0;
    // f·c is in 2^-41 units, i·g in 2^-30.
    let prod_frac = LEVEL_FRAC_BITS + CELL_FRAC_BITS;
    for k in 0..n {
        let i = level(&tables.sigmoid, gates[k]);
        let f = level(&tables.sigmoid, gates[n + k]);
        let g = level(&tables.tanh, gates[2 * n + k]);
        let o = level(&tables.sigmoid, gates[3 * n + k]);
        let fc = f * state.c[k] as i64;
        let ig = (i * g) << (prod_frac - 2 * LEVEL_FRAC_BITS);
        let raw = requantize(fc + ig, prod_frac, CELL_FRAC_BITS);
        let c = raw.clamp(-layer.cell_bound, layer.cell_bound - 1);
        if c != raw {
            saturations += 1;
        }
        next.c[k] = c as i32;
        let (_, tc) = activation_code(&tables.tanh, c, CELL_FRAC_BITS);
        tanh_c.push(tc);
        let h = requantize(o * level(&tables.tanh, tc), 2 * LEVEL_FRAC_BITS, CODE_FRAC_BITS);
        next.h[k] = h.clamp(-128, 127) as i8;
    }
    let codes = StepCodes {
        input_exponent,
        x,
        h_prev: state.h.clone(),
        z_acc,
        z_grid,
        gates,
        c: next.c.clone(),
        tanh_c,
        h: next.h.clone(),
        saturations,
    };
    Ok((next, codes))
}

/// Integer dense layer with a dynamically quantized input.
#[derive(Debug, Clone)]
pub struct IntDense {
    outputs: usize,
    inputs: usize,
    w: Vec<i8>,
    bias: Vec<i32>,
    scales: DynamicScaleSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseCodes {
    pub input_exponent: u32,
    pub x: Vec<i8>,
    /// Outputs in accumulator units with the input scale folded back.
    pub acc: Vec<i32>,
}

impl DenseCodes {
    pub fn decode(&self) -> Vec<f64> {
        self.acc
            .iter()
            .map(|&a| a as f64 / (1u64 << ACC_FRAC_BITS) as f64)
            .collect()
    }
}

impl IntDense {
    pub fn from_codes(
        outputs: usize,
        inputs: usize,
        w: Vec<i8>,
        bias: Vec<i32>,
        scales: DynamicScaleSet,
    ) -> Result<Self> {
        if w.len() != outputs * inputs || bias.len() != outputs {
            return Err(Error::shape("IntDense", &[w.len(), bias.len()], &[outputs, inputs]));
        }
        Ok(IntDense {
            outputs,
            inputs,
            w,
            bias,
            scales,
        })
    }

    pub fn from_params(params: &DenseParams, scales: DynamicScaleSet) -> Result<Self> {
        let w = params.w.data().iter().map(|&x| weight_code(x)).collect();
        let bias = params
            .b
            .data()
            .iter()
            .map(|&x| bias_code(x))
            .collect::<Result<_>>()?;
        Self::from_codes(params.w.rows(), params.w.cols(), w, bias, scales)
    }
}

pub fn engine_dense(layer: &IntDense, x: &[f64]) -> Result<DenseCodes> {
    if x.len() != layer.inputs {
        return Err(Error::shape("engine dense input", &[x.len()], &[layer.inputs]));
    }
    let (e, codes) = dynamic_codes(x, &layer.scales)?;
    let mut acc = Vec::with_capacity(layer.outputs);
    for r in 0..layer.outputs {
        let a = dot(&layer.w[r * layer.inputs..(r + 1) * layer.inputs], &codes)?
            .checked_mul(1 << e)
            .and_then(|a| a.checked_add(layer.bias[r]))
            .ok_or(Error::Overflow("dense accumulator"))?;
        acc.push(a);
    }
    Ok(DenseCodes {
        input_exponent: e,
        x: codes,
        acc,
    })
}

/// A whole network in integer form.
#[derive(Debug, Clone)]
pub struct IntNetwork {
    /// Embedding codes, `vocab x dim`.
    embedding: Option<(usize, Vec<i8>)>,
    layers: Vec<IntLayer>,
    head: IntDense,
}

/// One input sequence: feature rows (`T x D`) or token ids.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceInput {
    Features(Tensor),
    Tokens(Vec<usize>),
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        match self {
            SequenceInput::Features(t) => t.rows(),
            SequenceInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-step codes of every layer plus the head output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineRun {
    /// `steps[t][layer]`.
    pub steps: Vec<Vec<StepCodes>>,
    /// `None` for an empty sequence.
    pub head: Option<DenseCodes>,
}

impl EngineRun {
    pub fn saturations(&self) -> usize {
        self.steps.iter().flatten().map(|s| s.saturations).sum()
    }
}

/// Check that `policy` is the accelerator placement the engine implements
/// and return its tables and dynamic scale set.
pub fn engine_policy_parts(policy: &QuantPolicy) -> Result<(Arc<ActivationTables>, DynamicScaleSet)> {
    let bad = |what: &str| Err(Error::Policy(format!("engine requires {what}")));
    match policy.weights {
        Some(w) if w.format == QFormat::Q1_7 && w.rounding == RoundingMode::NearestTiesAwayFromZero => {}
        _ => return bad("Q1.7 round-to-nearest weights"),
    }
    if policy.hidden != HiddenQuant::Static(QFormat::Q1_7) {
        return bad("static Q1.7 hidden states");
    }
    if policy.cell_state != CellStateMode::Saturate(16.0) {
        return bad("a saturating cell state bounded at 16");
    }
    if policy.bias_frac_bits != Some(ACC_FRAC_BITS) {
        return bad("biases in accumulator format");
    }
    let scales = match &policy.input {
        InputQuant::Dynamic(q, s) if *q == QFormat::Q1_7 => s.clone(),
        _ => return bad("dynamic Q1.7 network inputs"),
    };
    match &policy.activations {
        ActivationMode::Pwl(t) => Ok((t.clone(), scales)),
        ActivationMode::Exact => bad("table-based activations"),
    }
}

impl IntNetwork {
    pub fn from_model(model: &Model, policy: &QuantPolicy) -> Result<Self> {
        let (tables, scales) = engine_policy_parts(policy)?;
        let embedding = model.embedding.as_ref().map(|e| {
            (e.cols(), e.data().iter().map(|&x| weight_code(x)).collect())
        });
        let layers = model
            .lstm
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mode = if i == 0 {
                    EngineInputMode::Dynamic(scales.clone())
                } else {
                    EngineInputMode::Static
                };
                IntLayer::from_params(p, tables.clone(), mode)
            })
            .collect::<Result<_>>()?;
        let head = IntDense::from_params(&model.head, scales)?;
        Ok(IntNetwork {
            embedding,
            layers,
            head,
        })
    }

    pub fn layers(&self) -> &[IntLayer] {
        &self.layers
    }

    pub fn run(&self, input: &SequenceInput) -> Result<EngineRun> {
        let mut states: Vec<EngineState> = self
            .layers
            .iter()
            .map(|l| EngineState::zeros(l.hidden))
            .collect();
        let mut steps = Vec::with_capacity(input.len());
        for t in 0..input.len() {
            let raw: Vec<f64> = match (input, &self.embedding) {
                (SequenceInput::Features(x), None) => x.row_slice(t).to_vec(),
                (SequenceInput::Tokens(ids), Some((dim, codes))) => {
                    let id = ids[t];
                    let row = codes
                        .get(id * dim..(id + 1) * dim)
                        .ok_or_else(|| Error::Config(format!("token id {id} outside vocabulary")))?;
                    row.iter().map(|&c| c as f64 / 128.0).collect()
                }
                _ => return Err(Error::Config("input kind does not match the network".into())),
            };
            let mut per_layer = Vec::with_capacity(self.layers.len());
            let mut h_codes: Vec<i8> = Vec::new();
            for (li, layer) in self.layers.iter().enumerate() {
                let input = if li == 0 {
                    EngineInput::Raw(&raw)
                } else {
                    EngineInput::Codes(&h_codes)
                };
                let (next, codes) = engine_lstm_step(layer, input, &states[li])?;
                h_codes = next.h.clone();
                states[li] = next;
                per_layer.push(codes);
            }
            steps.push(per_layer);
        }
        let head = if input.is_empty() {
            None
        } else {
            let last = states.last().expect("non-empty network");
            let h: Vec<f64> = last.h.iter().map(|&c| c as f64 / 128.0).collect();
            Some(engine_dense(&self.head, &h)?)
        };
        Ok(EngineRun { steps, head })
    }
}
