//! Quantized LSTM, dense and embedding layers built on the tape, with the
//! accelerator's quantization placement:
//!
//! * weights: static Q1.7, round to nearest;
//! * first LSTM layer input: dynamic Q1.7; deeper LSTM inputs: static Q1.7;
//! * hidden states: static Q1.7, round toward zero;
//! * gate activations: PWL tables with 8-bit outputs;
//! * dense inputs: dynamic Q1.7.
//!
//! With [`QuantPolicy::nna`] every intermediate value is exactly what the
//! integer engine computes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation_tables::ActivationTables;
use crate::autodiff::{SteKind, Tape, Var};
use crate::error::{Error, Result};
use crate::fixed_point::{DynamicScaleSet, QFormat, RoundingMode};
use crate::tensor::Tensor;

/// Fractional bits of the cell state in saturating mode.
pub const CELL_FRAC_BITS: u32 = 26;
/// Fractional bits of the MAC accumulator (Q1.7 x Q1.7 products).
pub const ACC_FRAC_BITS: u32 = 14;

#[derive(Debug, Clone, PartialEq)]
pub enum InputQuant {
    Off,
    Static(QFormat),
    Dynamic(QFormat, DynamicScaleSet),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HiddenQuant {
    Off,
    /// Rounds toward zero.
    Static(QFormat),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActivationMode {
    Exact,
    Pwl(Arc<ActivationTables>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellStateMode {
    Exact,
    /// Saturating fixed point with `bound` a power of two and 26
    /// fractional bits.
    Saturate(f64),
}

impl CellStateMode {
    pub fn format(&self) -> Result<Option<QFormat>> {
        match *self {
            CellStateMode::Exact => Ok(None),
            CellStateMode::Saturate(bound) => {
                let log = bound.log2();
                if !(bound >= 1.0) || log.fract() != 0.0 {
                    return Err(Error::Policy(format!(
                        "cell saturation bound {bound} is not a power of two >= 1"
                    )));
                }
                QFormat::new(log as u32 + 1, CELL_FRAC_BITS)
                    .map(Some)
                    .map_err(|e| Error::Policy(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightQuant {
    pub format: QFormat,
    pub rounding: RoundingMode,
}

/// Where and how a network is quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPolicy {
    pub weights: Option<WeightQuant>,
    /// Network input mode. The first LSTM layer and dense layers quantize
    /// dynamically with this format; deeper LSTM layers statically.
    pub input: InputQuant,
    pub hidden: HiddenQuant,
    pub activations: ActivationMode,
    pub cell_state: CellStateMode,
    /// Biases snap to this many fractional bits (the accumulator format).
    pub bias_frac_bits: Option<u32>,
    /// Backward rule for input and hidden-state quantization.
    pub ste: SteKind,
}

impl QuantPolicy {
    /// Full precision everywhere.
    pub fn off() -> Self {
        QuantPolicy {
            weights: None,
            input: InputQuant::Off,
            hidden: HiddenQuant::Off,
            activations: ActivationMode::Exact,
            cell_state: CellStateMode::Exact,
            bias_frac_bits: None,
            ste: SteKind::Identity,
        }
    }

    /// Weights quantized with a plain straight-through estimator, all else
    /// in full precision.
    pub fn weights_only() -> Self {
        QuantPolicy {
            weights: Some(WeightQuant {
                format: QFormat::Q1_7,
                rounding: RoundingMode::NearestTiesAwayFromZero,
            }),
            ..QuantPolicy::off()
        }
    }

    /// The accelerator's full placement, bit-exact with the integer engine.
    pub fn nna(tables: Arc<ActivationTables>, scales: DynamicScaleSet) -> Self {
        QuantPolicy {
            weights: Some(WeightQuant {
                format: QFormat::Q1_7,
                rounding: RoundingMode::NearestTiesAwayFromZero,
            }),
            input: InputQuant::Dynamic(QFormat::Q1_7, scales),
            hidden: HiddenQuant::Static(QFormat::Q1_7),
            activations: ActivationMode::Pwl(tables),
            cell_state: CellStateMode::Saturate(16.0),
            bias_frac_bits: Some(ACC_FRAC_BITS),
            ste: SteKind::clipped_cosine(),
        }
    }

    pub fn with_ste(mut self, ste: SteKind) -> Self {
        self.ste = ste;
        self
    }

    pub fn is_off(&self) -> bool {
        *self == QuantPolicy::off()
    }

    pub fn validate(&self) -> Result<()> {
        self.cell_state.format()?;
        if let Some(bits) = self.bias_frac_bits {
            if bits > 24 {
                return Err(Error::Policy(format!("bias fractional bits {bits} > 24")));
            }
        }
        match self.ste {
            SteKind::ClippedCosine { frequency, .. } if !(frequency > 0.0) => Err(Error::Policy(
                "clipped-cosine frequency must be positive".into(),
            )),
            SteKind::TrueTanh | SteKind::TrueSigmoid => Err(Error::Policy(
                "linear quantization nodes take a clipped-cosine or identity estimator".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn bias_format(&self) -> Option<QFormat> {
        self.bias_frac_bits
            .map(|n| QFormat::new(32 - n, n).expect("valid accumulator format"))
    }
}

/// LSTM weights. Gate order is `(i, f, g, o)` along the `4H` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    /// `4H x D`.
    pub w: Tensor,
    /// `4H x H`.
    pub u: Tensor,
    /// `1 x 4H`.
    pub b: Tensor,
}

impl LstmLayerParams {
    pub fn new(w: Tensor, u: Tensor, b: Tensor) -> Result<Self> {
        let h4 = w.rows();
        if h4 % 4 != 0 || h4 == 0 {
            return Err(Error::shape("lstm.w", &w.shape(), &[4, 0]));
        }
        let h = h4 / 4;
        if u.shape() != [h4, h] {
            return Err(Error::shape("lstm.u", &u.shape(), &[h4, h]));
        }
        if b.shape() != [1, h4] {
            return Err(Error::shape("lstm.b", &b.shape(), &[1, h4]));
        }
        Ok(LstmLayerParams { w, u, b })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayerParams {
            w: Tensor::zeros(4 * hidden, input),
            u: Tensor::zeros(4 * hidden, hidden),
            b: Tensor::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Affine layer `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `out x in`.
    pub w: Tensor,
    /// `1 x out`.
    pub b: Tensor,
}

/// Tape handles of one LSTM layer's (possibly quantized) weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

/// Every value produced by one cell step, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub x_q: Var,
    pub h_q: Var,
    /// Pre-activations `[z_i, z_f, z_g, z_o]`, `B x 4H`.
    pub z: Var,
    /// Gate outputs `i, f, g, o`.
    pub gates: [Var; 4],
    pub c: Var,
    pub tanh_c: Var,
    pub h: Var,
}

/// Pre-activation gate inputs of one step: the `z` the activity
/// regularizer acts on.
#[derive(Debug, Clone, Copy)]
pub struct GateActivations(pub Var);

fn quantize_weight(tape: &mut Tape, v: Var, policy: &QuantPolicy) -> Result<Var> {
    match policy.weights {
        None => Ok(v),
        Some(wq) => tape.quantize(v, wq.format, wq.rounding, None, SteKind::Identity),
    }
}

fn quantize_bias(tape: &mut Tape, v: Var, policy: &QuantPolicy) -> Result<Var> {
    match policy.bias_format() {
        None => Ok(v),
        Some(q) => tape.quantize(v, q, RoundingMode::NearestTiesAwayFromZero, None, SteKind::Identity),
    }
}

/// Put LSTM weights on the tape, quantized per policy.
pub fn lstm_vars(tape: &mut Tape, params: &LstmLayerParams, policy: &QuantPolicy) -> Result<(LstmVars, [Var; 3])> {
    let leaves = [
        tape.leaf(params.w.clone()),
        tape.leaf(params.u.clone()),
        tape.leaf(params.b.clone()),
    ];
    let vars = LstmVars {
        w: quantize_weight(tape, leaves[0], policy)?,
        u: quantize_weight(tape, leaves[1], policy)?,
        b: quantize_bias(tape, leaves[2], policy)?,
    };
    Ok((vars, leaves))
}

pub fn dense_vars(tape: &mut Tape, params: &DenseParams, policy: &QuantPolicy) -> Result<(DenseVars, [Var; 2])> {
    let leaves = [tape.leaf(params.w.clone()), tape.leaf(params.b.clone())];
    let vars = DenseVars {
        w: quantize_weight(tape, leaves[0], policy)?,
        b: quantize_bias(tape, leaves[1], policy)?,
    };
    Ok((vars, leaves))
}

fn quantize_input(tape: &mut Tape, x: Var, mode: &InputQuant, ste: SteKind) -> Result<Var> {
    match mode {
        InputQuant::Off => Ok(x),
        InputQuant::Static(q) => tape.quantize(x, *q, RoundingMode::TowardZero, None, ste),
        InputQuant::Dynamic(q, set) => {
            tape.quantize(x, *q, RoundingMode::TowardZero, Some(set), ste)
        }
    }
}

fn activate(tape: &mut Tape, x: Var, policy: &QuantPolicy, tanh: bool) -> Var {
    match (&policy.activations, tanh) {
        (ActivationMode::Exact, true) => tape.tanh(x),
        (ActivationMode::Exact, false) => tape.sigmoid(x),
        (ActivationMode::Pwl(t), true) => tape.activation(x, &t.tanh),
        (ActivationMode::Pwl(t), false) => tape.activation(x, &t.sigmoid),
    }
}

/// One LSTM step for a batch:
///
/// 1. `x` and `h_prev` quantized per the layer input mode / hidden mode;
/// 2. `z = x_q Wᵀ + h_q Uᵀ + b`;
/// 3. `i, f, o = σ(z)`, `g = tanh(z)` (table-based under `Pwl`);
/// 4. `c = f ⊙ c_prev + i ⊙ g`, optionally saturated;
/// 5. `h = o ⊙ tanh(c)`, quantized per the hidden mode.
pub fn lstm_cell_step(
    tape: &mut Tape,
    weights: &LstmVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    input_mode: &InputQuant,
    policy: &QuantPolicy,
) -> Result<(Var, Var, GateActivations, CellVars)> {
    let hidden = tape.shape(weights.u)[1];
    let x_q = quantize_input(tape, x, input_mode, policy.ste)?;
    let h_q = match policy.hidden {
        HiddenQuant::Off => h_prev,
        HiddenQuant::Static(q) => {
            tape.quantize(h_prev, q, RoundingMode::TowardZero, None, policy.ste)?
        }
    };
    let zx = tape.matmul_bt(x_q, weights.w)?;
    let zh = tape.matmul_bt(h_q, weights.u)?;
    let zxh = tape.add(zx, zh)?;
    let z = tape.add(zxh, weights.b)?;
    let mut gates = [z; 4];
    for (k, gate) in gates.iter_mut().enumerate() {
        let zk = tape.slice(z, k * hidden, hidden)?;
        *gate = activate(tape, zk, policy, k == 2);
    }
    let [i, f, g, o] = gates;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let mut c = tape.add(fc, ig)?;
    if let Some(q) = policy.cell_state.format()? {
        c = tape.quantize(c, q, RoundingMode::TowardZero, None, SteKind::Identity)?;
    }
    let tanh_c = activate(tape, c, policy, true);
    let mut h = tape.mul(o, tanh_c)?;
    if let HiddenQuant::Static(q) = policy.hidden {
        h = tape.quantize(h, q, RoundingMode::TowardZero, None, policy.ste)?;
    }
    let cell = CellVars {
        x_q,
        h_q,
        z,
        gates,
        c,
        tanh_c,
        h,
    };
    Ok((h, c, GateActivations(z), cell))
}

/// Dense layer with a dynamically quantized input (when the policy
/// quantizes inputs). Returns the output and the quantized input.
pub fn dense_forward(
    tape: &mut Tape,
    weights: &DenseVars,
    x: Var,
    policy: &QuantPolicy,
) -> Result<(Var, Var)> {
    let mode = match &policy.input {
        InputQuant::Off => InputQuant::Off,
        InputQuant::Static(q) => InputQuant::Dynamic(*q, DynamicScaleSet::standard()),
        dynamic => dynamic.clone(),
    };
    let x_q = quantize_input(tape, x, &mode, policy.ste)?;
    let y = tape.matmul_bt(x_q, weights.w)?;
    Ok((tape.add(y, weights.b)?, x_q))
}

/// Rows `ids` of the statically quantized embedding matrix.
pub fn embedding_lookup(tape: &mut Tape, table: Var, ids: &[usize], policy: &QuantPolicy) -> Result<Var> {
    let rows = tape.shape(table)[0];
    if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
        return Err(Error::Config(format!(
            "token id {bad} outside vocabulary of {rows}"
        )));
    }
    let q = quantize_weight(tape, table, policy)?;
    tape.rows(q, ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub hidden: usize,
}

/// Per-layer input quantization chosen from a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct StackPlan {
    pub layers: Vec<(LayerSpec, InputQuant)>,
}

/// First LSTM layer dynamic, the rest static (or all off).
pub fn build_stack(specs: &[LayerSpec], policy: &QuantPolicy) -> Result<StackPlan> {
    if specs.is_empty() {
        return Err(Error::Config("an LSTM stack needs at least one layer".into()));
    }
    for w in specs.windows(2) {
        if w[1].input != w[0].hidden {
            return Err(Error::Config(format!(
                "layer input {} does not match previous hidden size {}",
                w[1].input, w[0].hidden
            )));
        }
    }
    let (first, rest) = match &policy.input {
        InputQuant::Off => (InputQuant::Off, InputQuant::Off),
        InputQuant::Static(q) => (
            InputQuant::Dynamic(*q, DynamicScaleSet::standard()),
            InputQuant::Static(*q),
        ),
        InputQuant::Dynamic(q, s) => (InputQuant::Dynamic(*q, s.clone()), InputQuant::Static(*q)),
    };
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, if i == 0 { first.clone() } else { rest.clone() }))
        .collect();
    Ok(StackPlan { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    Features { dim: usize },
    Tokens { vocab: usize, embed_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub layers: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl ModelSpec {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let first = match self.input {
            InputSpec::Features { dim } => dim,
            InputSpec::Tokens { embed_dim, .. } => embed_dim,
        };
        (0..self.layers)
            .map(|i| LayerSpec {
                input: if i == 0 { first } else { self.hidden },
                hidden: self.hidden,
            })
            .collect()
    }
}

/// Embedding (optional) → LSTM stack → dense head on the last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub embedding: Option<Tensor>,
    pub lstm: Vec<LstmLayerParams>,
    pub head: DenseParams,
}

/// One time step of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    Features(Tensor),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub steps: Vec<StepInput>,
    pub batch: usize,
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Var,
    /// Head input after dynamic quantization.
    pub head_input: Var,
    /// Gate pre-activations of every step of every layer.
    pub z: Vec<GateActivations>,
    /// `cells[layer][step]`.
    pub cells: Vec<Vec<CellVars>>,
    /// Parameter leaves, in [`Model::tensors`] order.
    pub params: Vec<Var>,
}

impl Model {
    /// Uniform `±1/sqrt(H)` initialization, forget-gate bias 1.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.layers == 0 || spec.hidden == 0 || spec.outputs == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (spec.hidden as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize, b: f64| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect();
            Tensor::new(rows, cols, data).expect("shape")
        };
        let embedding = match spec.input {
            InputSpec::Features { .. } => None,
            InputSpec::Tokens { vocab, embed_dim } => Some(uniform(vocab, embed_dim, 0.5)),
        };
        let h = spec.hidden;
        let lstm = spec
            .layer_specs()
            .iter()
            .map(|l| {
                let w = uniform(4 * h, l.input, bound);
                let u = uniform(4 * h, h, bound);
                let mut b = Tensor::zeros(1, 4 * h);
                for x in &mut b.data_mut()[h..2 * h] {
                    *x = 1.0;
                }
                LstmLayerParams { w, u, b }
            })
            .collect();
        let head = DenseParams {
            w: uniform(spec.outputs, h, bound),
            b: Tensor::zeros(1, spec.outputs),
        };
        Ok(Model {
            spec,
            embedding,
            lstm,
            head,
        })
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".to_string(), e));
        }
        for (i, l) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{i}.w"), &l.w));
            out.push((format!("lstm.{i}.u"), &l.u));
            out.push((format!("lstm.{i}.b"), &l.b));
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(e);
        }
        for l in &mut self.lstm {
            out.push(&mut l.w);
            out.push(&mut l.u);
            out.push(&mut l.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Whether a tensor (by [`Model::tensors`] name) is a weight matrix
    /// rather than a bias.
    pub fn is_weight(name: &str) -> bool {
        !name.ends_with(".b")
    }

    /// Clip weight matrices into the representable range of `q`.
    pub fn clamp_weights(&mut self, q: QFormat) {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            if Model::is_weight(name) {
                for x in t.data_mut() {
                    *x = x.clamp(q.f_min(), q.f_max());
                }
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, batch: &SequenceBatch, policy: &QuantPolicy) -> Result<ForwardOutput> {
        policy.validate()?;
        let plan = build_stack(&self.spec.layer_specs(), policy)?;
        let mut params = Vec::new();
        let embedding = match &self.embedding {
            Some(e) => {
                let leaf = tape.leaf(e.clone());
                params.push(leaf);
                Some(leaf)
            }
            None => None,
        };
        let mut layer_vars = Vec::with_capacity(self.lstm.len());
        for l in &self.lstm {
            let (vars, leaves) = lstm_vars(tape, l, policy)?;
            params.extend(leaves);
            layer_vars.push(vars);
        }
        let (head_vars, head_leaves) = dense_vars(tape, &self.head, policy)?;
        params.extend(head_leaves);

        let b = batch.batch;
        let h = self.spec.hidden;
        let mut state: Vec<(Var, Var)> = (0..self.lstm.len())
            .map(|_| (tape.leaf(Tensor::zeros(b, h)), tape.leaf(Tensor::zeros(b, h))))
            .collect();
        let mut z = Vec::new();
        let mut cells = vec![Vec::with_capacity(batch.steps.len()); self.lstm.len()];
        for step in &batch.steps {
            let mut x = match (step, embedding) {
                (StepInput::Features(t), None) => {
                    if t.rows() != b {
                        return Err(Error::shape("batch", &t.shape(), &[b]));
                    }
                    tape.leaf(t.clone())
                }
                (StepInput::Tokens(ids), Some(e)) => embedding_lookup(tape, e, ids, policy)?,
                _ => return Err(Error::Config("step input kind does not match the model".into())),
            };
            for (li, (vars, (_, mode))) in layer_vars.iter().zip(&plan.layers).enumerate() {
                let (h_prev, c_prev) = state[li];
                let (h_t, c_t, zg, cell) = lstm_cell_step(tape, vars, x, h_prev, c_prev, mode, policy)?;
                state[li] = (h_t, c_t);
                z.push(zg);
                cells[li].push(cell);
                x = h_t;
            }
        }
        let last_h = state.last().expect("at least one layer").0;
        let (output, head_input) = dense_forward(tape, &head_vars, last_h, policy)?;
        Ok(ForwardOutput {
            output,
            head_input,
            z,
            cells,
            params,
        })
    }
}
