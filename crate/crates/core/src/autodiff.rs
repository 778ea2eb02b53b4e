//! Reverse-mode differentiation over a flat tape of matrix operations,
//! including quantization nodes with surrogate (straight-through) backward
//! rules.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::activation_tables::{ActivationKind, PwlTable};
use crate::error::{Error, Result};
use crate::fixed_point::{pow2, quantize_unchecked, DynamicScaleSet, QFormat, RoundingMode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What the cosine in the clipped-cosine estimator is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineUnit {
    /// `u = x / bin_width`: one period per quantization bin.
    #[default]
    Bin,
    /// `u = x`, the formula read literally on the raw input.
    Raw,
}

/// Backward rule of a quantization or activation node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteKind {
    /// `clip(cos(2π f u), 0, 1)`.
    ClippedCosine { frequency: f64, unit: CosineUnit },
    /// Plain straight-through: factor 1.
    Identity,
    /// `1 - tanh²(x)` of the exact function.
    TrueTanh,
    /// `σ(x)(1 - σ(x))` of the exact function.
    TrueSigmoid,
}

impl SteKind {
    pub fn clipped_cosine() -> Self {
        SteKind::ClippedCosine {
            frequency: 1.0,
            unit: CosineUnit::Bin,
        }
    }
}

/// `clip(cos(2π f u), 0, 1)`, with the phase reduced to `[-1/2, 1/2]`
/// before the cosine so bin centers give exactly 1 and quarter points and
/// midpoints exactly 0.
#[inline]
pub fn clipped_cosine(u: f64, frequency: f64) -> f64 {
    let p = frequency * u;
    let r = (p - p.round()).abs();
    if r >= 0.25 {
        0.0
    } else {
        (2.0 * PI * r).cos()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    /// `b` either matches `a` or is a single row broadcast over `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Rows { input: Var, ids: Vec<usize> },
    Quantize {
        input: Var,
        factor: Vec<f64>,
        exponents: Option<Vec<u32>>,
    },
    Activation {
        input: Var,
        kind: ActivationKind,
        codes: Vec<u8>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer computation record. Build with the op methods, then call
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of leaf `v`; zeros when the loss does not depend on it.
    /// Interior gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Per-row scale exponents chosen by a dynamic quantization node.
    pub fn dynamic_exponents(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::Quantize { exponents, .. } => exponents.as_deref(),
            _ => None,
        }
    }

    /// Output codes of an activation node.
    pub fn activation_codes(&self, v: Var) -> Option<&[u8]> {
        match &self.nodes[v.0].op {
            Op::Activation { codes, .. } => Some(codes),
            _ => None,
        }
    }

    /// Local backward factor stored by a quantization node.
    pub fn ste_factor(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Quantize { factor, .. } => Some(factor),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let v = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + y)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut out = va.clone();
            let cols = va.cols();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += vb.data()[i % cols];
            }
            out
        } else {
            return Err(Error::shape("add", &va.shape(), &vb.shape()));
        };
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("sub", &va.shape(), &vb.shape()));
        }
        let v = va.zip_map(vb, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", &va.shape(), &vb.shape()));
        }
        let v = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::activation_tables::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::shape("concat", &self.shape(*first), &s));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                let dst = &mut out.data_mut()[r * cols + offset..r * cols + offset + v.cols()];
                dst.copy_from_slice(v.row_slice(r));
            }
            offset += v.cols();
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::shape("slice", &va.shape(), &[start, len]));
        }
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row_slice(r)[start..start + len]);
        }
        let v = Tensor::new(rows, len, data)?;
        Ok(self.push(v, Op::Slice { input: a, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Gather rows `ids` of `a` (embedding lookup).
    pub fn rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(ids.len() * va.cols());
        for &i in ids {
            if i >= va.rows() {
                return Err(Error::shape("rows", &va.shape(), &[i]));
            }
            data.extend_from_slice(va.row_slice(i));
        }
        let v = Tensor::new(ids.len(), va.cols(), data)?;
        Ok(self.push(
            v,
            Op::Rows {
                input: a,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (one row per example).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() || targets.iter().any(|&t| t >= vl.cols()) {
            return Err(Error::shape("softmax_cross_entropy", &vl.shape(), &[targets.len()]));
        }
        let mut probs = Tensor::zeros(vl.rows(), vl.cols());
        let mut loss = 0.0;
        for r in 0..vl.rows() {
            let row = vl.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for (c, &x) in row.iter().enumerate() {
                probs.data_mut()[r * vl.cols() + c] = (x - m).exp() / z;
            }
            loss += z.ln() + m - row[targets[r]];
        }
        loss /= vl.rows().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Quantize `x` in the forward pass (statically, or dynamically per row
    /// when `dynamic` is given) and apply `ste` in the backward pass.
    ///
    /// For dynamic nodes the chosen scale is a constant of the forward pass
    /// and the rounding is always toward zero.
    pub fn quantize(
        &mut self,
        x: Var,
        q: QFormat,
        mode: RoundingMode,
        dynamic: Option<&DynamicScaleSet>,
        ste: SteKind,
    ) -> Result<Var> {
        let vx = self.value(x);
        if let Some((index, &value)) = vx.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(rows, cols);
        let mut factor = vec![0.0; rows * cols];
        let mut exponents = dynamic.map(|_| Vec::with_capacity(rows));
        let base_bin = q.resolution();
        for r in 0..rows {
            let row = vx.row_slice(r);
            let (scale, row_mode) = match dynamic {
                Some(set) => {
                    let e = set.select_exponent(row, q);
                    exponents.as_mut().unwrap().push(e);
                    (pow2(e as i32), RoundingMode::TowardZero)
                }
                None => (1.0, mode),
            };
            let bin = base_bin * scale;
            for (c, &v) in row.iter().enumerate() {
                let i = r * cols + c;
                out.data_mut()[i] = scale * quantize_unchecked(v / scale, q, row_mode);
                factor[i] = match ste {
                    SteKind::ClippedCosine { frequency, unit } => {
                        let u = match unit {
                            CosineUnit::Bin => v / bin,
                            CosineUnit::Raw => v,
                        };
                        clipped_cosine(u, frequency)
                    }
                    SteKind::Identity => 1.0,
                    SteKind::TrueTanh => ActivationKind::Tanh.derivative(v),
                    SteKind::TrueSigmoid => ActivationKind::Sigmoid.derivative(v),
                };
            }
        }
        Ok(self.push(
            out,
            Op::Quantize {
                input: x,
                factor,
                exponents,
            },
        ))
    }

    /// Table-based activation in the forward pass, exact-function
    /// derivative in the backward pass.
    pub fn activation(&mut self, x: Var, table: &PwlTable) -> Var {
        let vx = self.value(x);
        let codes: Vec<u8> = vx.data().iter().map(|&v| table.code(v)).collect();
        let data = codes.iter().map(|&c| table.level(c)).collect();
        let out = Tensor::new(vx.rows(), vx.cols(), data).expect("same shape");
        self.push(
            out,
            Op::Activation {
                input: x,
                kind: table.kind(),
                codes,
            },
        )
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::shape("backward", &shape, &[1, 1]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                self.propagate(node, g, &mut grads)?;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_bt(vb)?);
                acc(*b, va.matmul_at(&g)?);
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(vb)?);
                acc(*b, g.matmul_at(va)?);
            }
            Op::Add(a, b) => {
                let vb = self.value(*b);
                if vb.shape() == g.shape() {
                    acc(*b, g.clone());
                    acc(*a, g);
                } else {
                    let mut col = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, x) in g.row_slice(r).iter().enumerate() {
                            col.data_mut()[c] += x;
                        }
                    }
                    acc(*b, col);
                    acc(*a, g);
                }
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|x| -x));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y));
                acc(*b, g.zip_map(va, |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t))),
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |x, v| if v > 0.0 { x } else { 0.0 }));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    let mut d = Tensor::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.data_mut()[r * cols..(r + 1) * cols]
                            .copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                    }
                    acc(p, d);
                    offset += cols;
                }
            }
            Op::Slice { input, start } => {
                let [rows, cols] = self.shape(*input);
                let d = grads[input.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
                for r in 0..rows {
                    let dst = &mut d.data_mut()[r * cols + start..r * cols + start + g.cols()];
                    for (x, y) in dst.iter_mut().zip(g.row_slice(r)) {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::Rows { input, ids } => {
                let [rows, cols] = self.shape(*input);
                let mut d = Tensor::zeros(rows, cols);
                for (k, &i) in ids.iter().enumerate() {
                    for (c, x) in g.row_slice(k).iter().enumerate() {
                        d.data_mut()[i * cols + c] += x;
                    }
                }
                acc(*input, d);
            }
            Op::Quantize { input, factor, .. } => {
                let mut d = g;
                for (x, f) in d.data_mut().iter_mut().zip(factor) {
                    *x *= f;
                }
                acc(*input, d);
            }
            Op::Activation { input, kind, .. } => {
                let vx = self.value(*input);
                acc(*input, g.zip_map(vx, |x, v| x * kind.derivative(v)));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len().max(1) as f64;
                let mut d = probs.clone();
                let cols = d.cols();
                for (r, &t) in targets.iter().enumerate() {
                    d.data_mut()[r * cols + t] -= 1.0;
                }
                for x in d.data_mut() {
                    *x *= scale;
                }
                acc(*logits, d);
            }
        }
        Ok(())
    }
}
