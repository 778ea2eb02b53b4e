//! Signed Q-format fixed point: static (clip, scale, round) and dynamic
//! (power-of-two pre-scaled) quantization, plus integer code conversion.
//!
//! All quantized values are carried as `f64`. Every value of a format with
//! `m + n <= 32` is exactly representable there, so float emulation and
//! integer code arithmetic agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signed fixed-point format `Qm.n`: `m` integer bits (sign included) and
/// `n` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "QFormatRepr", into = "QFormatRepr")]
pub struct QFormat {
    int_bits: u32,
    frac_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct QFormatRepr {
    int_bits: u32,
    frac_bits: u32,
}

impl TryFrom<QFormatRepr> for QFormat {
    type Error = Error;
    fn try_from(r: QFormatRepr) -> Result<Self> {
        QFormat::new(r.int_bits, r.frac_bits)
    }
}

impl From<QFormat> for QFormatRepr {
    fn from(q: QFormat) -> Self {
        QFormatRepr {
            int_bits: q.int_bits,
            frac_bits: q.frac_bits,
        }
    }
}

impl QFormat {
    /// The 8-bit format used for weights, inputs and hidden states.
    pub const Q1_7: QFormat = QFormat {
        int_bits: 1,
        frac_bits: 7,
    };

    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self> {
        let err = |reason| Error::InvalidFormat {
            int_bits,
            frac_bits,
            reason,
        };
        if int_bits < 1 {
            return Err(err("at least one integer (sign) bit is required"));
        }
        if int_bits + frac_bits > 32 {
            return Err(err("total width exceeds 32 bits"));
        }
        Ok(QFormat {
            int_bits,
            frac_bits,
        })
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn f_min(&self) -> f64 {
        -pow2(self.int_bits as i32 - 1)
    }

    pub fn f_max(&self) -> f64 {
        pow2(self.int_bits as i32 - 1) - self.resolution()
    }

    pub fn resolution(&self) -> f64 {
        pow2(-(self.frac_bits as i32))
    }

    /// `(f_min, f_max, resolution)`.
    pub fn range(&self) -> (f64, f64, f64) {
        (self.f_min(), self.f_max(), self.resolution())
    }

    pub fn code_min(&self) -> i64 {
        -(1i64 << (self.total_bits() - 1))
    }

    pub fn code_max(&self) -> i64 {
        (1i64 << (self.total_bits() - 1)) - 1
    }

    /// Whether `x` is exactly a value of this format.
    pub fn is_representable(&self, x: f64) -> bool {
        if !x.is_finite() || x < self.f_min() || x > self.f_max() {
            return false;
        }
        let scaled = x * pow2(self.frac_bits as i32);
        scaled == scaled.trunc()
    }
}

impl std::fmt::Display for QFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.int_bits, self.frac_bits)
    }
}

/// Integer rounding applied after scaling by `2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundingMode {
    /// Round half away from zero. Used for weights.
    NearestTiesAwayFromZero,
    /// Truncate. Used for inputs, hidden states and other activations.
    TowardZero,
}

impl RoundingMode {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            RoundingMode::NearestTiesAwayFromZero => x.round(),
            RoundingMode::TowardZero => x.trunc(),
        }
    }
}

/// Exact power of two as `f64`.
#[inline]
pub fn pow2(e: i32) -> f64 {
    f64::powi(2.0, e)
}

#[inline]
fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Integer code of a finite `x`; no finiteness check.
#[inline]
pub(crate) fn code_unchecked(x: f64, q: QFormat, mode: RoundingMode) -> i64 {
    let c = clip(x, q.f_min(), q.f_max());
    mode.apply(c * pow2(q.frac_bits as i32)) as i64
}

/// Quantize a finite `x`; no finiteness check.
#[inline]
pub(crate) fn quantize_unchecked(x: f64, q: QFormat, mode: RoundingMode) -> f64 {
    let c = clip(x, q.f_min(), q.f_max());
    mode.apply(c * pow2(q.frac_bits as i32)) * pow2(-(q.frac_bits as i32))
}

/// Static quantization: clip to `[f_min, f_max]`, scale by `2^n`, round,
/// scale back.
pub fn quantize_static(x: f64, q: QFormat, mode: RoundingMode) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite { index: 0, value: x });
    }
    Ok(quantize_unchecked(x, q, mode))
}

/// Integer code of the statically quantized `x`.
pub fn encode(x: f64, q: QFormat, mode: RoundingMode) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::NonFinite { index: 0, value: x });
    }
    Ok(code_unchecked(x, q, mode))
}

/// Real value of an integer code.
pub fn decode(code: i64, q: QFormat) -> Result<f64> {
    if code < q.code_min() || code > q.code_max() {
        return Err(Error::CodeOutOfRange {
            code,
            min: q.code_min(),
            max: q.code_max(),
        });
    }
    Ok(code as f64 * q.resolution())
}

/// Allowed power-of-two multipliers for dynamic quantization, stored as
/// exponents in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DynamicScaleSet {
    exponents: Vec<u32>,
}

impl TryFrom<Vec<f64>> for DynamicScaleSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        DynamicScaleSet::new(&v)
    }
}

impl From<DynamicScaleSet> for Vec<f64> {
    fn from(s: DynamicScaleSet) -> Self {
        s.scales().collect()
    }
}

impl Default for DynamicScaleSet {
    fn default() -> Self {
        Self::standard()
    }
}

impl DynamicScaleSet {
    pub fn new(scales: &[f64]) -> Result<Self> {
        let mut exponents = Vec::with_capacity(scales.len());
        for &s in scales {
            if !(s >= 1.0) || !s.is_finite() || s.log2().fract() != 0.0 || s > pow2(30) {
                return Err(Error::InvalidScaleSet(format!(
                    "{s} is not a power of two in [1, 2^30]"
                )));
            }
            exponents.push(s.log2() as u32);
        }
        if !exponents.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidScaleSet(
                "scales must be strictly ascending".into(),
            ));
        }
        if exponents.first() != Some(&0) {
            return Err(Error::InvalidScaleSet("scale set must contain 1".into()));
        }
        Ok(DynamicScaleSet { exponents })
    }

    /// `{1, 2, 4, 8, 16}`.
    pub fn standard() -> Self {
        DynamicScaleSet {
            exponents: vec![0, 1, 2, 3, 4],
        }
    }

    /// `{1, 2, 4, 16}`, the set listed for the hardware input path.
    pub fn hardware() -> Self {
        DynamicScaleSet {
            exponents: vec![0, 1, 2, 4],
        }
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.exponents.iter().map(|&e| pow2(e as i32))
    }

    pub fn largest(&self) -> f64 {
        pow2(*self.exponents.last().expect("non-empty") as i32)
    }

    /// Exponent of the smallest scale that brings every value into range,
    /// or of the largest scale when none does.
    pub fn select_exponent(&self, xs: &[f64], q: QFormat) -> u32 {
        let (lo, hi) = xs
            .iter()
            .fold((0.0f64, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        for &e in &self.exponents {
            let s = pow2(e as i32);
            if lo / s >= q.f_min() && hi / s <= q.f_max() {
                return e;
            }
        }
        *self.exponents.last().expect("non-empty")
    }
}

/// Dynamic quantization of one tensor: picks `S`, then
/// `S * quantize_static(x / S, q, TowardZero)` elementwise.
pub fn quantize_dynamic(
    xs: &[f64],
    q: QFormat,
    scales: &DynamicScaleSet,
) -> Result<(Vec<f64>, f64)> {
    if let Some((index, &value)) = xs.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    if xs.is_empty() {
        return Ok((Vec::new(), 1.0));
    }
    let e = scales.select_exponent(xs, q) as i32;
    let s = pow2(e);
    let out = xs
        .iter()
        .map(|&x| s * quantize_unchecked(x / s, q, RoundingMode::TowardZero))
        .collect();
    Ok((out, s))
}
