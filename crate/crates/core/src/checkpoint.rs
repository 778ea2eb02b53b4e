//! Versioned container of named tensors, used for model checkpoints and
//! golden-run input sequences.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NNATENS\0"
//! version  u32      1
//! count    u32
//! count x {
//!   name_len  u16, name (UTF-8)
//!   has_q     u8 (0 or 1), int_bits u8, frac_bits u8
//!   rows u32, cols u32
//!   values    rows*cols x f64 bit patterns
//! }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fixed_point::QFormat;
use crate::qnn::{DenseParams, InputSpec, LstmLayerParams, Model, ModelSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NNATENS\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub format: Option<QFormat>,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, format: Option<QFormat>, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            format,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|t| &t.tensor)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            match t.format {
                Some(q) => out.extend_from_slice(&[1, q.int_bits() as u8, q.frac_bits() as u8]),
                None => out.extend_from_slice(&[0, 0, 0]),
            }
            out.extend_from_slice(&(t.tensor.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.tensor.cols() as u32).to_le_bytes());
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a tensor container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let q = r.take(3)?;
            let format = match q[0] {
                0 => None,
                1 => Some(QFormat::new(q[1] as u32, q[2] as u32)?),
                other => return Err(Error::Format(format!("bad format flag {other}"))),
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("tensor '{name}' is implausibly large")))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push(NamedTensor {
                name,
                format,
                tensor: Tensor::new(rows, cols, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(TensorFile { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Checkpoint of `model`; weight tensors carry `weight_format` when given.
pub fn model_to_file(model: &Model, weight_format: Option<QFormat>) -> TensorFile {
    let mut file = TensorFile::default();
    for (name, t) in model.tensors() {
        let format = if Model::is_weight(&name) { weight_format } else { None };
        file.push(name, format, t.clone());
    }
    file
}

/// Rebuild a model from a checkpoint; dimensions come from tensor shapes.
pub fn model_from_file(file: &TensorFile) -> Result<Model> {
    let embedding = file.get("embedding").map(|t| t.tensor.clone());
    let mut lstm = Vec::new();
    while let Some(w) = file.get(&format!("lstm.{}.w", lstm.len())) {
        let i = lstm.len();
        let u = file.require(&format!("lstm.{i}.u"))?;
        let b = file.require(&format!("lstm.{i}.b"))?;
        lstm.push(LstmLayerParams::new(w.tensor.clone(), u.clone(), b.clone())?);
    }
    let first = lstm
        .first()
        .ok_or_else(|| Error::Format("checkpoint has no LSTM layers".into()))?;
    let hidden = first.hidden();
    for (i, l) in lstm.iter().enumerate() {
        if l.hidden() != hidden || (i > 0 && l.input_dim() != hidden) {
            return Err(Error::Format(format!("layer {i} dimensions are inconsistent")));
        }
    }
    let head = DenseParams {
        w: file.require("head.w")?.clone(),
        b: file.require("head.b")?.clone(),
    };
    if head.w.cols() != hidden || head.b.shape() != [1, head.w.rows()] {
        return Err(Error::shape("head", &head.w.shape(), &[head.w.rows(), hidden]));
    }
    let input = match &embedding {
        Some(e) => {
            if e.cols() != first.input_dim() {
                return Err(Error::shape("embedding", &e.shape(), &[e.rows(), first.input_dim()]));
            }
            InputSpec::Tokens {
                vocab: e.rows(),
                embed_dim: e.cols(),
            }
        }
        None => InputSpec::Features {
            dim: first.input_dim(),
        },
    };
    let spec = ModelSpec {
        input,
        layers: lstm.len(),
        hidden,
        outputs: head.w.rows(),
    };
    Ok(Model {
        spec,
        embedding,
        lstm,
        head,
    })
}
