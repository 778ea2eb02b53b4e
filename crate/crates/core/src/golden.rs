//! Golden traces: every intermediate integer code of an engine run, and a
//! verifier that replays the same network through the float emulator.
//!
//! Byte layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "NNAGOLD\0"
//! version  u32      1
//! layers   u32
//! hidden   u32
//! steps    u32
//! records  u32
//! records x {
//!   probe  u16   (see `Probe`)
//!   layer  u16
//!   step   u32
//!   count  u32
//!   values count x i32
//! }
//! ```
//!
//! Records are ordered by step, then layer, then probe id. Head records use
//! `layer = layers` and `step = steps`. An empty sequence yields a trace
//! with no records.

use std::fmt;
use std::path::Path;

use crate::activation_tables::PwlTable;
use crate::autodiff::Tape;
use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::nna_engine::{EngineRun, IntNetwork, SequenceInput};
use crate::qnn::{Model, QuantPolicy, SequenceBatch, StepInput, ACC_FRAC_BITS, CELL_FRAC_BITS};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NNAGOLD\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum Probe {
    /// Dynamic scale exponent of the first layer input.
    InputScale = 1,
    InputCodes = 2,
    HiddenIn = 3,
    /// Gate pre-activations in accumulator units.
    ZAcc = 4,
    /// Gate pre-activations on the activation grid.
    ZGrid = 5,
    GateCodes = 6,
    Cell = 7,
    TanhCell = 8,
    HiddenOut = 9,
    HeadScale = 10,
    HeadInput = 11,
    HeadAcc = 12,
}

impl Probe {
    pub const ALL: [Probe; 12] = [
        Probe::InputScale,
        Probe::InputCodes,
        Probe::HiddenIn,
        Probe::ZAcc,
        Probe::ZGrid,
        Probe::GateCodes,
        Probe::Cell,
        Probe::TanhCell,
        Probe::HiddenOut,
        Probe::HeadScale,
        Probe::HeadInput,
        Probe::HeadAcc,
    ];

    pub fn from_id(id: u16) -> Option<Probe> {
        Probe::ALL.into_iter().find(|p| *p as u16 == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Probe::InputScale => "input_scale",
            Probe::InputCodes => "input_codes",
            Probe::HiddenIn => "hidden_in",
            Probe::ZAcc => "z_acc",
            Probe::ZGrid => "z_grid",
            Probe::GateCodes => "gate_codes",
            Probe::Cell => "cell",
            Probe::TanhCell => "tanh_cell",
            Probe::HiddenOut => "hidden_out",
            Probe::HeadScale => "head_scale",
            Probe::HeadInput => "head_input",
            Probe::HeadAcc => "head_acc",
        }
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub probe: Probe,
    pub layer: u16,
    pub step: u32,
    pub values: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenTrace {
    pub layers: u32,
    pub hidden: u32,
    pub steps: u32,
    pub records: Vec<TraceRecord>,
}

/// Where two traces first disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub record: usize,
    pub probe: Option<Probe>,
    pub layer: u16,
    pub step: u32,
    pub index: Option<usize>,
    pub expected: Option<i32>,
    pub actual: Option<i32>,
    pub detail: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}", self.record)?;
        if let Some(p) = self.probe {
            write!(f, " probe {p}")?;
        }
        write!(f, " layer {} step {}", self.layer, self.step)?;
        if let Some(i) = self.index {
            write!(f, " index {i}")?;
        }
        if let (Some(e), Some(a)) = (self.expected, self.actual) {
            write!(f, ": expected {e}, got {a}")?;
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

impl GoldenTrace {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.layers, self.hidden, self.steps, self.records.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&(r.probe as u16).to_le_bytes());
            out.extend_from_slice(&r.layer.to_le_bytes());
            out.extend_from_slice(&r.step.to_le_bytes());
            out.extend_from_slice(&(r.values.len() as u32).to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("trace truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        if take(8)? != MAGIC {
            return Err(Error::Format("not a golden trace (bad magic)".into()));
        }
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported trace version {version}")));
        }
        let layers = u32_at(take(4)?);
        let hidden = u32_at(take(4)?);
        let steps = u32_at(take(4)?);
        let count = u32_at(take(4)?) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = u16::from_le_bytes(take(2)?.try_into().unwrap());
            let probe =
                Probe::from_id(id).ok_or_else(|| Error::Format(format!("unknown probe id {id}")))?;
            let layer = u16::from_le_bytes(take(2)?.try_into().unwrap());
            let step = u32_at(take(4)?);
            let n = u32_at(take(4)?) as usize;
            let raw = take(n.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(TraceRecord {
                probe,
                layer,
                step,
                values,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(GoldenTrace {
            layers,
            hidden,
            steps,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn narrow(v: i64, what: &'static str) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::Overflow(what))
}

fn bytes_to_i32(v: &[u8]) -> Vec<i32> {
    v.iter().map(|&c| c as i32).collect()
}

fn i8_to_i32(v: &[i8]) -> Vec<i32> {
    v.iter().map(|&c| c as i32).collect()
}

/// Convert an engine run into a trace.
pub fn engine_trace(run: &EngineRun, layers: usize, hidden: usize) -> Result<GoldenTrace> {
    let mut records = Vec::new();
    for (t, per_layer) in run.steps.iter().enumerate() {
        for (l, s) in per_layer.iter().enumerate() {
            let mut push = |probe, values| {
                records.push(TraceRecord {
                    probe,
                    layer: l as u16,
                    step: t as u32,
                    values,
                })
            };
            if let Some(e) = s.input_exponent {
                push(Probe::InputScale, vec![e as i32]);
            }
            push(Probe::InputCodes, i8_to_i32(&s.x));
            push(Probe::HiddenIn, i8_to_i32(&s.h_prev));
            push(Probe::ZAcc, s.z_acc.clone());
            let grid = s
                .z_grid
                .iter()
                .map(|&k| narrow(k, "z grid index"))
                .collect::<Result<_>>()?;
            push(Probe::ZGrid, grid);
            push(Probe::GateCodes, bytes_to_i32(&s.gates));
            push(Probe::Cell, s.c.clone());
            push(Probe::TanhCell, bytes_to_i32(&s.tanh_c));
            push(Probe::HiddenOut, i8_to_i32(&s.h));
        }
    }
    if let Some(h) = &run.head {
        let (layer, step) = (layers as u16, run.steps.len() as u32);
        records.push(TraceRecord { probe: Probe::HeadScale, layer, step, values: vec![h.input_exponent as i32] });
        records.push(TraceRecord { probe: Probe::HeadInput, layer, step, values: i8_to_i32(&h.x) });
        records.push(TraceRecord { probe: Probe::HeadAcc, layer, step, values: h.acc.clone() });
    }
    Ok(GoldenTrace {
        layers: layers as u32,
        hidden: hidden as u32,
        steps: run.steps.len() as u32,
        records,
    })
}

/// Run the integer engine over one sequence and record every probe.
pub fn golden_run(model: &Model, policy: &QuantPolicy, input: &SequenceInput) -> Result<GoldenTrace> {
    let net = IntNetwork::from_model(model, policy)?;
    let run = net.run(input)?;
    engine_trace(&run, model.lstm.len(), model.spec.hidden)
}

/// `v * 2^frac` as an exact integer, or an error naming the probe.
fn fixed(values: &[f64], frac: u32, probe: Probe) -> Result<Vec<i32>> {
    let s = (1u64 << frac) as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = v * s;
            if x.fract() != 0.0 || !(x >= i32::MIN as f64 && x <= i32::MAX as f64) {
                Err(Error::Invariant {
                    field: "trace",
                    msg: format!("{probe}[{i}] = {v} is not on the {frac}-bit grid"),
                })
            } else {
                Ok(x as i32)
            }
        })
        .collect()
}

fn grid(table: &PwlTable, values: &[f64]) -> Result<Vec<i32>> {
    values
        .iter()
        .map(|&v| narrow(table.grid_index(v), "z grid index"))
        .collect()
}

fn sequence_batch(input: &SequenceInput) -> SequenceBatch {
    let steps = match input {
        SequenceInput::Features(x) => (0..x.rows())
            .map(|t| StepInput::Features(Tensor::row(x.row_slice(t).to_vec())))
            .collect(),
        SequenceInput::Tokens(ids) => ids.iter().map(|&id| StepInput::Tokens(vec![id])).collect(),
    };
    SequenceBatch { steps, batch: 1 }
}

/// Produce the same trace from the float emulator.
pub fn emulator_trace(model: &Model, policy: &QuantPolicy, input: &SequenceInput) -> Result<GoldenTrace> {
    let (tables, _) = crate::nna_engine::engine_policy_parts(policy)?;
    let layers = model.lstm.len();
    let hidden = model.spec.hidden;
    let steps = input.len();
    let mut records = Vec::new();
    if steps > 0 {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &sequence_batch(input), policy)?;
        let codes = |tape: &Tape, v| -> Result<Vec<i32>> {
            tape.activation_codes(v)
                .map(bytes_to_i32)
                .ok_or_else(|| Error::Invariant { field: "trace", msg: "activation node expected".into() })
        };
        for t in 0..steps {
            for (l, cells) in out.cells.iter().enumerate() {
                let cell = &cells[t];
                let mut push = |probe, values| {
                    records.push(TraceRecord { probe, layer: l as u16, step: t as u32, values })
                };
                if let Some(e) = tape.dynamic_exponents(cell.x_q) {
                    push(Probe::InputScale, e.iter().map(|&e| e as i32).collect());
                    let s = f64::from(1u32 << e[0]);
                    let scaled: Vec<f64> = tape.value(cell.x_q).data().iter().map(|v| v / s).collect();
                    push(Probe::InputCodes, fixed(&scaled, 7, Probe::InputCodes)?);
                } else {
                    push(Probe::InputCodes, fixed(tape.value(cell.x_q).data(), 7, Probe::InputCodes)?);
                }
                push(Probe::HiddenIn, fixed(tape.value(cell.h_q).data(), 7, Probe::HiddenIn)?);
                let z = tape.value(cell.z).data();
                push(Probe::ZAcc, fixed(z, ACC_FRAC_BITS, Probe::ZAcc)?);
                let mut zg = Vec::with_capacity(z.len());
                for (k, chunk) in z.chunks(hidden).enumerate() {
                    let table = if k == 2 { &tables.tanh } else { &tables.sigmoid };
                    zg.extend(grid(table, chunk)?);
                }
                push(Probe::ZGrid, zg);
                let mut gates = Vec::with_capacity(4 * hidden);
                for g in cell.gates {
                    gates.extend(codes(&tape, g)?);
                }
                push(Probe::GateCodes, gates);
                push(Probe::Cell, fixed(tape.value(cell.c).data(), CELL_FRAC_BITS, Probe::Cell)?);
                push(Probe::TanhCell, codes(&tape, cell.tanh_c)?);
                push(Probe::HiddenOut, fixed(tape.value(cell.h).data(), 7, Probe::HiddenOut)?);
            }
        }
        let (layer, step) = (layers as u16, steps as u32);
        let e = tape
            .dynamic_exponents(out.head_input)
            .ok_or_else(|| Error::Invariant { field: "trace", msg: "head input is not dynamic".into() })?[0];
        let s = f64::from(1u32 << e);
        let x: Vec<f64> = tape.value(out.head_input).data().iter().map(|v| v / s).collect();
        records.push(TraceRecord { probe: Probe::HeadScale, layer, step, values: vec![e as i32] });
        records.push(TraceRecord { probe: Probe::HeadInput, layer, step, values: fixed(&x, 7, Probe::HeadInput)? });
        records.push(TraceRecord {
            probe: Probe::HeadAcc,
            layer,
            step,
            values: fixed(tape.value(out.output).data(), ACC_FRAC_BITS, Probe::HeadAcc)?,
        });
    }
    Ok(GoldenTrace {
        layers: layers as u32,
        hidden: hidden as u32,
        steps: steps as u32,
        records,
    })
}

/// First point where `actual` departs from `expected`, if any.
pub fn compare_traces(expected: &GoldenTrace, actual: &GoldenTrace) -> Option<Divergence> {
    let header = |detail: String| Divergence {
        record: 0,
        probe: None,
        layer: 0,
        step: 0,
        index: None,
        expected: None,
        actual: None,
        detail,
    };
    if (expected.layers, expected.hidden, expected.steps) != (actual.layers, actual.hidden, actual.steps) {
        return Some(header(format!(
            "header differs: {}x{}x{} vs {}x{}x{}",
            expected.layers, expected.hidden, expected.steps, actual.layers, actual.hidden, actual.steps
        )));
    }
    for (i, (e, a)) in expected.records.iter().zip(&actual.records).enumerate() {
        let at = |index, exp, act, detail: &str| Divergence {
            record: i,
            probe: Some(e.probe),
            layer: e.layer,
            step: e.step,
            index,
            expected: exp,
            actual: act,
            detail: detail.to_string(),
        };
        if (e.probe, e.layer, e.step) != (a.probe, a.layer, a.step) {
            return Some(at(None, None, None, "record order differs"));
        }
        if let Some(k) = e.values.iter().zip(&a.values).position(|(x, y)| x != y) {
            return Some(at(Some(k), Some(e.values[k]), Some(a.values[k]), ""));
        }
        if e.values.len() != a.values.len() {
            return Some(at(None, None, None, "record length differs"));
        }
    }
    if expected.records.len() != actual.records.len() {
        return Some(header(format!(
            "record count differs: {} vs {}",
            expected.records.len(),
            actual.records.len()
        )));
    }
    None
}

/// Replay through the emulator and compare against a stored trace.
pub fn verify(trace: &GoldenTrace, model: &Model, policy: &QuantPolicy, input: &SequenceInput) -> Result<Option<Divergence>> {
    let replay = emulator_trace(model, policy, input)?;
    Ok(compare_traces(trace, &replay))
}

/// Input sequences are stored in the tensor container under `features`
/// (`T x D`) or `tokens` (`T x 1`, integer-valued).
pub fn input_to_file(input: &SequenceInput) -> TensorFile {
    let mut f = TensorFile::default();
    match input {
        SequenceInput::Features(x) => f.push("features", None, x.clone()),
        SequenceInput::Tokens(ids) => {
            let t = Tensor::new(ids.len(), 1, ids.iter().map(|&i| i as f64).collect()).expect("shape");
            f.push("tokens", None, t)
        }
    }
    f
}

pub fn input_from_file(file: &TensorFile) -> Result<SequenceInput> {
    if let Some(t) = file.get("features") {
        return Ok(SequenceInput::Features(t.tensor.clone()));
    }
    let t = file
        .get("tokens")
        .ok_or_else(|| Error::Format("input file has neither 'features' nor 'tokens'".into()))?;
    t.tensor
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("token id {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<_>>()
        .map(SequenceInput::Tokens)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::activation_tables::ActivationTables;
    use crate::fixed_point::DynamicScaleSet;
    use crate::qnn::{InputSpec, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, steps: usize) -> (Model, QuantPolicy, SequenceInput) {
        let spec = ModelSpec {
            input: InputSpec::Features { dim: 3 },
            layers: 2,
            hidden: 4,
            outputs: 2,
        };
        let model = Model::init(spec, seed).unwrap();
        let policy = QuantPolicy::nna(Arc::new(ActivationTables::standard()), DynamicScaleSet::standard());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..steps * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        (model, policy, SequenceInput::Features(Tensor::new(steps, 3, data).unwrap()))
    }

    #[test]
    fn generate_then_verify_passes() {
        let (model, policy, input) = setup(1, 6);
        let trace = golden_run(&model, &policy, &input).unwrap();
        assert_eq!(trace.steps, 6);
        assert_eq!(verify(&trace, &model, &policy, &input).unwrap(), None);
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let (model, policy, input) = setup(2, 5);
        let a = golden_run(&model, &policy, &input).unwrap().to_bytes();
        let b = golden_run(&model, &policy, &input).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_eq!(GoldenTrace::from_bytes(&a).unwrap().to_bytes(), a);
    }

    #[test]
    fn empty_sequence_is_header_only() {
        let (model, policy, _) = setup(3, 0);
        let input = SequenceInput::Features(Tensor::zeros(0, 3));
        let trace = golden_run(&model, &policy, &input).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.to_bytes().len(), 8 + 5 * 4);
        assert_eq!(verify(&trace, &model, &policy, &input).unwrap(), None);
    }

    #[test]
    fn flipped_bit_is_located() {
        let (model, policy, input) = setup(4, 4);
        let trace = golden_run(&model, &policy, &input).unwrap();
        let target = trace
            .records
            .iter()
            .position(|r| r.probe == Probe::Cell && r.step == 2)
            .unwrap();
        let mut bad = trace.clone();
        bad.records[target].values[1] ^= 1 << 3;
        let d = verify(&bad, &model, &policy, &input).unwrap().unwrap();
        assert_eq!(d.record, target);
        assert_eq!(d.probe, Some(Probe::Cell));
        assert_eq!(d.step, 2);
        assert_eq!(d.index, Some(1));
    }

    #[test]
    fn truncated_trace_rejected() {
        let (model, policy, input) = setup(5, 2);
        let bytes = golden_run(&model, &policy, &input).unwrap().to_bytes();
        assert!(GoldenTrace::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn token_inputs_roundtrip_and_verify() {
        let spec = ModelSpec {
            input: InputSpec::Tokens { vocab: 6, embed_dim: 4 },
            layers: 1,
            hidden: 8,
            outputs: 3,
        };
        let model = Model::init(spec, 7).unwrap();
        let policy = QuantPolicy::nna(Arc::new(ActivationTables::standard()), DynamicScaleSet::hardware());
        let input = SequenceInput::Tokens(vec![0, 5, 2, 2, 1]);
        let back = input_from_file(&TensorFile::from_bytes(&input_to_file(&input).to_bytes()).unwrap()).unwrap();
        assert_eq!(back, input);
        let trace = golden_run(&model, &policy, &input).unwrap();
        assert_eq!(verify(&trace, &model, &policy, &input).unwrap(), None);
    }
}
