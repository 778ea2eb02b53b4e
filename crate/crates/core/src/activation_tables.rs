//! Piecewise-linear tanh/sigmoid approximators with a non-uniform 8-bit
//! output codebook.
//!
//! Evaluation is defined entirely on integers:
//!
//! 1. the input is snapped toward zero onto a grid of step `2^-grid_exp`,
//!    giving a grid index `k`;
//! 2. `k` outside `(x_lo, x_hi)` saturates to code 0 or 255;
//! 3. otherwise the segment containing `k` yields a value in units of
//!    `2^-30`: `anchor_value + trunc(slope * (k - anchor) / 2^20)`;
//! 4. that value snaps to the nearest codebook level (units of `2^-15`).
//!    Distance ties go to the level nearer the function's center (0 for
//!    tanh, 1/2 for sigmoid); among equal levels the lowest code wins.
//!
//! Both the float emulator and the integer engine call the same
//! [`PwlTable::code_at_grid`], so they agree as long as they agree on `k`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::pow2;

/// Number of output levels.
pub const CODEBOOK_LEN: usize = 256;
/// Codebook levels are integer multiples of `2^-LEVEL_FRAC_BITS`.
pub const LEVEL_FRAC_BITS: u32 = 15;
/// Interpolated values are integer multiples of `2^-VALUE_FRAC_BITS`.
pub const VALUE_FRAC_BITS: u32 = 30;
/// Slope mantissas carry this many extra fractional bits per grid step.
pub const SLOPE_FRAC_BITS: u32 = 20;
/// Max absolute error allowed for a constructed table on `[-8, 8]`.
pub const ERROR_BUDGET: f64 = 0.01;

const FILE_MAGIC: &str = "nna-pwl";
const FILE_VERSION: u32 = 1;
const MIN_GRID_EXP: u32 = 10;
const MAX_GRID_EXP: u32 = 20;
const TANH_SATURATION: f64 = 4.0;
const SIGMOID_SATURATION: f64 = 7.0;
/// Extra breakpoint density on top of the derivative, as a fraction of the
/// peak derivative. Pure gradient-proportional placement leaves the tails
/// too coarse.
const BREAKPOINT_DENSITY_FLOOR: f64 = 0.12;
/// Extra codebook density near the steep part of the function.
const CODEBOOK_DENSITY_BOOST: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    Sigmoid,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative of the exact function.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Center of point symmetry in value units of `2^-30`.
    fn center_value(self) -> i64 {
        match self {
            ActivationKind::Tanh => 0,
            ActivationKind::Sigmoid => 1 << (VALUE_FRAC_BITS - 1),
        }
    }

    fn default_saturation(self) -> f64 {
        match self {
            ActivationKind::Tanh => TANH_SATURATION,
            ActivationKind::Sigmoid => SIGMOID_SATURATION,
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            other => Err(Error::TableParams(format!("unknown function '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One linear piece. `start` and `anchor` are grid indices, `anchor_value`
/// is in units of `2^-30` and `slope` in units of `2^-50` per grid step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: i64,
    pub anchor: i64,
    pub anchor_value: i64,
    pub slope: i64,
}

impl Segment {
    #[inline]
    fn value_at(&self, k: i64) -> i64 {
        // Integer division truncates toward zero, which keeps mirrored
        // segments exactly symmetric.
        let delta = self.slope as i128 * (k - self.anchor) as i128;
        self.anchor_value + (delta / (1i128 << SLOPE_FRAC_BITS)) as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PwlTable {
    kind: ActivationKind,
    grid_exp: u32,
    x_lo: i64,
    x_hi: i64,
    segments: Vec<Segment>,
    codebook: Vec<i32>,
}

impl PwlTable {
    /// Assemble a table from raw parts, checking every invariant.
    pub fn from_parts(
        kind: ActivationKind,
        grid_exp: u32,
        x_lo: i64,
        x_hi: i64,
        segments: Vec<Segment>,
        codebook: Vec<i32>,
    ) -> Result<Self> {
        let table = PwlTable {
            kind,
            grid_exp,
            x_lo,
            x_hi,
            segments,
            codebook,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn grid_exp(&self) -> u32 {
        self.grid_exp
    }

    pub fn grid_step(&self) -> f64 {
        pow2(-(self.grid_exp as i32))
    }

    /// Saturation bounds in grid units.
    pub fn saturation_grid(&self) -> (i64, i64) {
        (self.x_lo, self.x_hi)
    }

    /// Saturation bounds as reals.
    pub fn saturation(&self) -> (f64, f64) {
        (
            self.x_lo as f64 * self.grid_step(),
            self.x_hi as f64 * self.grid_step(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segment start points as reals.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| s.start as f64 * self.grid_step())
            .collect()
    }

    /// Output levels in units of `2^-15`.
    pub fn codebook(&self) -> &[i32] {
        &self.codebook
    }

    #[inline]
    pub fn level(&self, code: u8) -> f64 {
        self.codebook[code as usize] as f64 * pow2(-(LEVEL_FRAC_BITS as i32))
    }

    /// Grid index of `x`, snapped toward zero. Saturates for huge or
    /// non-finite inputs (NaN maps to 0).
    #[inline]
    pub fn grid_index(&self, x: f64) -> i64 {
        let scaled = (x * pow2(self.grid_exp as i32)).trunc();
        let limit = 1i64 << 40;
        (scaled as i64).clamp(-limit, limit)
    }

    /// Interpolated value at grid index `k` in units of `2^-30`, before
    /// snapping. `None` in the saturated regions.
    pub fn raw_value_at_grid(&self, k: i64) -> Option<i64> {
        if k <= self.x_lo || k >= self.x_hi {
            return None;
        }
        let idx = self.segments.partition_point(|s| s.start <= k);
        let seg = &self.segments[idx.saturating_sub(1)];
        Some(seg.value_at(k))
    }

    /// Output code at grid index `k`.
    pub fn code_at_grid(&self, k: i64) -> u8 {
        match self.raw_value_at_grid(k) {
            None if k <= self.x_lo => 0,
            None => (CODEBOOK_LEN - 1) as u8,
            Some(v) => self.snap(v),
        }
    }

    pub fn code(&self, x: f64) -> u8 {
        self.code_at_grid(self.grid_index(x))
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.level(self.code(x))
    }

    pub fn eval_grid(&self, k: i64) -> f64 {
        self.level(self.code_at_grid(k))
    }

    /// Nearest codebook level to a value in units of `2^-30`.
    fn snap(&self, v: i64) -> u8 {
        let shift = VALUE_FRAC_BITS - LEVEL_FRAC_BITS;
        let level_value = |i: usize| (self.codebook[i] as i64) << shift;
        let above = self.codebook.partition_point(|&l| ((l as i64) << shift) < v);
        if above == 0 {
            return 0;
        }
        if above == CODEBOOK_LEN {
            return self.first_code_of(CODEBOOK_LEN - 1);
        }
        let below = above - 1;
        let d_below = v - level_value(below);
        let d_above = level_value(above) - v;
        let pick = if d_below < d_above {
            below
        } else if d_above < d_below {
            above
        } else {
            let center = self.kind.center_value();
            if (level_value(below) - center).abs() <= (level_value(above) - center).abs() {
                below
            } else {
                above
            }
        };
        self.first_code_of(pick)
    }

    fn first_code_of(&self, i: usize) -> u8 {
        let target = self.codebook[i];
        self.codebook.partition_point(|&l| l < target) as u8
    }

    fn validate(&self) -> Result<()> {
        let inv = |field: &'static str, msg: String| Err(Error::Invariant { field, msg });
        if !(MIN_GRID_EXP..=MAX_GRID_EXP).contains(&self.grid_exp) {
            return inv(
                "grid_exp",
                format!("{} outside [{MIN_GRID_EXP}, {MAX_GRID_EXP}]", self.grid_exp),
            );
        }
        if self.x_lo >= self.x_hi {
            return inv("saturation", format!("x_lo {} >= x_hi {}", self.x_lo, self.x_hi));
        }
        if self.segments.is_empty() {
            return inv("breakpoints", "no segments".into());
        }
        if !self.segments.windows(2).all(|w| w[0].start < w[1].start) {
            return inv("breakpoints", "segment starts are not strictly increasing".into());
        }
        let first = self.segments[0].start;
        let last = self.segments[self.segments.len() - 1].start;
        if self.x_lo > first || self.x_hi <= last {
            return inv(
                "saturation",
                format!("bounds [{}, {}] do not enclose breakpoints", self.x_lo, self.x_hi),
            );
        }
        for (i, s) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map_or(self.x_hi, |n| n.start);
            if s.anchor < s.start || s.anchor > end {
                return inv("anchors", format!("segment {i} anchor outside its span"));
            }
            if s.slope < 0 {
                return inv("slopes", format!("segment {i} has negative slope"));
            }
            if s.anchor_value.abs() > 1i64 << (VALUE_FRAC_BITS + 1) {
                return inv("anchors", format!("segment {i} anchor value out of range"));
            }
        }
        if self.codebook.len() != CODEBOOK_LEN {
            return inv(
                "codebook",
                format!("{} entries, expected {CODEBOOK_LEN}", self.codebook.len()),
            );
        }
        if !self.codebook.windows(2).all(|w| w[0] <= w[1]) {
            return inv("codebook", "levels are not sorted".into());
        }
        let one = 1i32 << LEVEL_FRAC_BITS;
        match self.kind {
            ActivationKind::Tanh => {
                if self.codebook.iter().any(|l| l.abs() > one) {
                    return inv("codebook", "tanh level outside [-1, 1]".into());
                }
                for k in 0..CODEBOOK_LEN {
                    if self.codebook[k] != -self.codebook[CODEBOOK_LEN - 1 - k] {
                        return inv("codebook", format!("tanh levels not odd-symmetric at {k}"));
                    }
                }
                if !self.codebook.contains(&0) {
                    return inv("codebook", "tanh codebook lacks 0".into());
                }
            }
            ActivationKind::Sigmoid => {
                if self.codebook.iter().any(|&l| !(0..=one).contains(&l)) {
                    return inv("codebook", "sigmoid level outside [0, 1]".into());
                }
            }
        }
        // Monotone across segment joins (each piece is monotone on its own).
        for (i, pair) in self.segments.windows(2).enumerate() {
            let join = pair[1].start;
            if join - 1 > self.x_lo && pair[0].value_at(join - 1) > pair[1].value_at(join) {
                return inv("slopes", format!("evaluation decreases at the join after segment {i}"));
            }
        }
        Ok(())
    }

    /// Accuracy and occupancy statistics against the exact function over
    /// `[-range, range]`. The error is the exact supremum over reals: every
    /// real snaps to a grid index whose cell endpoints bound the true
    /// function.
    pub fn accuracy(&self, range: f64) -> TableReport {
        let step = self.grid_step();
        let kmax = (range / step).ceil() as i64;
        let mut max_err = 0.0f64;
        let mut argmax = 0.0;
        let mut sum_err = 0.0;
        let mut used = vec![false; CODEBOOK_LEN];
        let mut monotone = true;
        let mut prev = f64::NEG_INFINITY;
        for k in -kmax..=kmax {
            let code = self.code_at_grid(k);
            used[code as usize] = true;
            let v = self.level(code);
            if v < prev {
                monotone = false;
            }
            prev = v;
            // Reals mapping to k: [k, k+1) for k > 0, (k-1, k] for k < 0,
            // (-1, 1) for k = 0 (in grid steps).
            let (a, b) = match k.signum() {
                1 => (k as f64 * step, (k + 1) as f64 * step),
                -1 => ((k - 1) as f64 * step, k as f64 * step),
                _ => (-step, step),
            };
            let a = a.max(-range);
            let b = b.min(range);
            let fa = self.kind.eval(a);
            let fb = self.kind.eval(b);
            let e = (v - fa).abs().max((v - fb).abs());
            if e > max_err {
                max_err = e;
                argmax = k as f64 * step;
            }
            sum_err += (v - self.kind.eval(k as f64 * step)).abs();
        }
        TableReport {
            function: self.kind,
            max_abs_error: max_err,
            argmax_error: argmax,
            mean_abs_error: sum_err / (2 * kmax + 1) as f64,
            codes_used: used.iter().filter(|&&u| u).count(),
            monotone,
        }
    }

    /// Plain-text serialization; see the module docs of the file layout in
    /// the README.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let slope_exp = self.grid_exp as i64 - (VALUE_FRAC_BITS + SLOPE_FRAC_BITS) as i64;
        writeln!(out, "{FILE_MAGIC} {FILE_VERSION}").unwrap();
        writeln!(out, "function {}", self.kind.name()).unwrap();
        writeln!(out, "grid_exp {}", self.grid_exp).unwrap();
        writeln!(out, "x_lo {}", self.x_lo).unwrap();
        writeln!(out, "x_hi {}", self.x_hi).unwrap();
        writeln!(out, "segments {}", self.segments.len()).unwrap();
        for s in &self.segments {
            writeln!(
                out,
                "segment {} {} {} -{} {} {}",
                s.start, s.anchor, s.anchor_value, VALUE_FRAC_BITS, s.slope, slope_exp
            )
            .unwrap();
        }
        writeln!(out, "codebook {CODEBOOK_LEN} -{LEVEL_FRAC_BITS}").unwrap();
        for row in self.codebook.chunks(8) {
            let line: Vec<String> = row.iter().map(|l| l.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_text().into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("not UTF-8: {e}"),
        })?;
        Self::from_text(text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let header = lines.expect_key(FILE_MAGIC)?;
        let version: u32 = lines.parse_one(&header)?;
        if version != FILE_VERSION {
            return Err(lines.error(format!("unsupported version {version}")));
        }
        let f = lines.expect_key("function")?;
        let kind: ActivationKind = f
            .first()
            .ok_or_else(|| lines.error("missing function tag".into()))?
            .parse()
            .map_err(|_| lines.error(format!("unknown function {:?}", f)))?;
        let grid_exp: u32 = {
            let v = lines.expect_key("grid_exp")?;
            lines.parse_one(&v)?
        };
        let x_lo: i64 = {
            let v = lines.expect_key("x_lo")?;
            lines.parse_one(&v)?
        };
        let x_hi: i64 = {
            let v = lines.expect_key("x_hi")?;
            lines.parse_one(&v)?
        };
        let n_seg: usize = {
            let v = lines.expect_key("segments")?;
            lines.parse_one(&v)?
        };
        if n_seg > 1 << 16 {
            return Err(lines.error(format!("implausible segment count {n_seg}")));
        }
        let slope_exp = grid_exp as i64 - (VALUE_FRAC_BITS + SLOPE_FRAC_BITS) as i64;
        let mut segments = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            let f = lines.expect_key("segment")?;
            let nums: Vec<i64> = lines.parse_all(&f)?;
            if nums.len() != 6 {
                return Err(lines.error("segment needs 6 fields".into()));
            }
            if nums[3] != -(VALUE_FRAC_BITS as i64) || nums[5] != slope_exp {
                return Err(lines.error("unexpected exponent in segment".into()));
            }
            segments.push(Segment {
                start: nums[0],
                anchor: nums[1],
                anchor_value: nums[2],
                slope: nums[4],
            });
        }
        let cb = lines.expect_key("codebook")?;
        let cb: Vec<i64> = lines.parse_all(&cb)?;
        if cb != [CODEBOOK_LEN as i64, -(LEVEL_FRAC_BITS as i64)] {
            return Err(lines.error("unexpected codebook header".into()));
        }
        let mut codebook = Vec::with_capacity(CODEBOOK_LEN);
        while codebook.len() < CODEBOOK_LEN {
            let fields = lines.next_fields()?;
            if fields.first() == Some(&"end") {
                break;
            }
            let vals: Vec<i32> = lines.parse_all(&fields)?;
            codebook.extend(vals);
        }
        lines.expect_key("end")?;
        PwlTable::from_parts(kind, grid_exp, x_lo, x_hi, segments, codebook)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            iter: text.lines().enumerate(),
            line: 0,
        }
    }

    fn error(&self, msg: String) -> Error {
        Error::Parse {
            line: self.line,
            msg,
        }
    }

    fn next_fields(&mut self) -> Result<Vec<&'a str>> {
        for (i, l) in self.iter.by_ref() {
            self.line = i + 1;
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            return Ok(l.split_whitespace().collect());
        }
        Err(self.error("unexpected end of file".into()))
    }

    fn expect_key(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let mut f = self.next_fields()?;
        if f.first() != Some(&key) {
            return Err(self.error(format!("expected '{key}', found {:?}", f.first())));
        }
        f.remove(0);
        Ok(f)
    }

    fn parse_all<T: std::str::FromStr>(&self, fields: &[&str]) -> Result<Vec<T>> {
        fields
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| self.error(format!("invalid number '{s}'")))
            })
            .collect()
    }

    fn parse_one<T: std::str::FromStr>(&self, fields: &[&str]) -> Result<T> {
        match fields {
            [one] => one
                .parse()
                .map_err(|_| self.error(format!("invalid number '{one}'"))),
            _ => Err(self.error("expected exactly one value".into())),
        }
    }
}

/// Accuracy summary of a table against its exact function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableReport {
    pub function: ActivationKind,
    pub max_abs_error: f64,
    pub argmax_error: f64,
    pub mean_abs_error: f64,
    pub codes_used: usize,
    pub monotone: bool,
}

/// Build the mirrored segment list from the non-negative half nodes.
/// `nodes[0]` must sit at grid index 0 with the center value.
fn mirrored_segments(nodes: &[(i64, i64)], center: i64) -> Vec<Segment> {
    let mut positive = Vec::with_capacity(nodes.len() - 1);
    for w in nodes.windows(2) {
        let ((k0, y0), (k1, y1)) = (w[0], w[1]);
        let slope = (((y1 - y0) as i128) << SLOPE_FRAC_BITS) / (k1 - k0) as i128;
        positive.push(Segment {
            start: k0,
            anchor: k0,
            anchor_value: y0,
            slope: slope as i64,
        });
    }
    let mut out: Vec<Segment> = positive
        .iter()
        .rev()
        .zip(nodes.iter().skip(1).rev())
        .map(|(s, &(end, _))| Segment {
            start: -end,
            anchor: -s.anchor,
            anchor_value: 2 * center - s.anchor_value,
            slope: s.slope,
        })
        .collect();
    out.extend(positive);
    out
}

/// Place `count` breakpoints over `(0, hi]` with density proportional to
/// `|f'(x)|` plus a floor, snapped to the grid. Returns grid indices
/// starting at 0 and ending at `hi`.
fn place_breakpoints(kind: ActivationKind, count: usize, hi: f64, grid_exp: u32) -> Vec<i64> {
    let peak = kind.derivative(0.0);
    let floor = BREAKPOINT_DENSITY_FLOOR * peak;
    let cumulative = |x: f64| (kind.eval(x) - kind.eval(0.0)) + floor * x;
    let total = cumulative(hi);
    let scale = pow2(grid_exp as i32);
    let mut out = vec![0i64];
    for j in 1..count {
        let target = total * j as f64 / count as f64;
        let (mut a, mut b) = (0.0, hi);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if cumulative(m) < target {
                a = m;
            } else {
                b = m;
            }
        }
        let k = (0.5 * (a + b) * scale).round() as i64;
        let prev = *out.last().unwrap();
        out.push(k.max(prev + 1));
    }
    out.push((hi * scale).round() as i64);
    out
}

/// Odd-symmetric level set on `[-top, top]` with `2^-frac` resolution. The
/// density in value space is `1 + boost * (1 - y^2)`, which packs more
/// levels where the function is steep.
fn symmetric_levels(top: f64, frac: u32) -> Vec<i64> {
    let half = CODEBOOK_LEN / 2;
    let w = |y: f64| y + CODEBOOK_DENSITY_BOOST * (y - y * y * y / 3.0);
    let total = w(top);
    let scale = pow2(frac as i32);
    let mut positive = Vec::with_capacity(half);
    for i in 0..half {
        let target = total * i as f64 / (half - 1) as f64;
        let (mut a, mut b) = (0.0, top);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if w(m) < target {
                a = m;
            } else {
                b = m;
            }
        }
        positive.push((0.5 * (a + b) * scale).round() as i64);
    }
    let mut levels: Vec<i64> = positive.iter().rev().map(|&l| -l).collect();
    levels.extend(positive);
    levels
}

/// Per-node offsets that center each chord on the (concave) function: a
/// node is raised by a quarter of the summed sag of its two neighbouring
/// chords, which roughly halves the worst interpolation error. The node at
/// the origin stays fixed.
fn chord_lift(kind: ActivationKind, xs: &[f64]) -> Vec<f64> {
    let sag: Vec<f64> = xs
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (kind.eval(a), kind.eval(b));
            (1..64)
                .map(|i| {
                    let t = i as f64 / 64.0;
                    kind.eval(a + t * (b - a)) - (fa + t * (fb - fa))
                })
                .fold(0.0, f64::max)
        })
        .collect();
    (0..xs.len())
        .map(|j| {
            if j == 0 {
                return 0.0;
            }
            let left = sag[j - 1];
            let right = sag.get(j).copied().unwrap_or(0.0);
            (left + right) / 4.0
        })
        .collect()
}

fn check_grid_step(grid_step: f64) -> Result<u32> {
    if !(grid_step > 0.0) || grid_step.log2().fract() != 0.0 {
        return Err(Error::TableParams(format!(
            "grid step {grid_step} is not a power of two"
        )));
    }
    let exp = -grid_step.log2();
    if exp < MIN_GRID_EXP as f64 || exp > MAX_GRID_EXP as f64 {
        return Err(Error::TableParams(format!(
            "grid step must lie in [2^-{MAX_GRID_EXP}, 2^-{MIN_GRID_EXP}]"
        )));
    }
    Ok(exp as u32)
}

fn check_budget(table: PwlTable) -> Result<PwlTable> {
    let report = table.accuracy(8.0);
    if report.max_abs_error > ERROR_BUDGET {
        return Err(Error::TableBudget {
            max_error: report.max_abs_error,
            budget: ERROR_BUDGET,
        });
    }
    Ok(table)
}

/// Build the tanh table: `segments` pieces (half per sign) over `[-4, 4]`.
pub fn build_tanh_table(segments: usize, grid_step: f64) -> Result<PwlTable> {
    if segments < 4 || !segments.is_power_of_two() {
        return Err(Error::TableParams(format!(
            "segment count {segments} must be a power of two >= 4"
        )));
    }
    let grid_exp = check_grid_step(grid_step)?;
    let kind = ActivationKind::Tanh;
    let sat = kind.default_saturation();
    let ks = place_breakpoints(kind, segments / 2, sat, grid_exp);
    let value_scale = pow2(VALUE_FRAC_BITS as i32);
    let xs: Vec<f64> = ks.iter().map(|&k| k as f64 * grid_step).collect();
    let lift = chord_lift(kind, &xs);
    let nodes: Vec<(i64, i64)> = ks
        .iter()
        .zip(xs.iter().zip(&lift))
        .map(|(&k, (&x, &dy))| {
            // Even values so the derived sigmoid halves exactly.
            let y = ((x.tanh() + dy) * value_scale / 2.0).round() as i64 * 2;
            (k, y)
        })
        .collect();
    let x_hi = *ks.last().unwrap();
    let segs = mirrored_segments(&nodes, 0);
    // Top level sits between tanh(4) and 1 so the saturated tails stay close.
    let codebook = symmetric_levels(1.0 - pow2(-12), LEVEL_FRAC_BITS)
        .into_iter()
        .map(|l| l as i32)
        .collect();
    let table = PwlTable::from_parts(kind, grid_exp, -x_hi, x_hi, segs, codebook)?;
    check_budget(table)
}

/// Derive the sigmoid table from a tanh table via
/// `sigmoid(x) = (1 + tanh(x / 2)) / 2`, saturating at `±7`.
pub fn derive_sigmoid_table(tanh: &PwlTable) -> Result<PwlTable> {
    if tanh.kind != ActivationKind::Tanh {
        return Err(Error::TableParams(
            "sigmoid tables derive from a tanh table".into(),
        ));
    }
    let kind = ActivationKind::Sigmoid;
    let grid_exp = tanh.grid_exp;
    let x_hi = (kind.default_saturation() * pow2(grid_exp as i32)) as i64;
    let center = kind.center_value();
    let value_from_tanh = |k_tanh: i64| -> i64 {
        let t = tanh
            .raw_value_at_grid(k_tanh)
            .unwrap_or_else(|| tanh.codebook[CODEBOOK_LEN - 1] as i64 * (1 << 15));
        center + t / 2
    };
    let mut nodes: Vec<(i64, i64)> = tanh
        .segments
        .iter()
        .filter(|s| s.start >= 0 && 2 * s.start < x_hi)
        .map(|s| (2 * s.start, value_from_tanh(s.start)))
        .collect();
    nodes.push((x_hi, value_from_tanh(x_hi / 2)));
    let segs = mirrored_segments(&nodes, center);
    let half = 1i64 << (LEVEL_FRAC_BITS - 1);
    let codebook = symmetric_levels(0.9991, LEVEL_FRAC_BITS - 1)
        .into_iter()
        .map(|u| (half + u) as i32)
        .collect();
    let table = PwlTable::from_parts(kind, grid_exp, -x_hi, x_hi, segs, codebook)?;
    check_budget(table)
}

/// Default segment count.
pub const DEFAULT_SEGMENTS: usize = 32;
/// Default grid step exponent (`2^-12`).
pub const DEFAULT_GRID_EXP: u32 = 12;

/// The tanh and sigmoid tables used together by an LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTables {
    pub tanh: PwlTable,
    pub sigmoid: PwlTable,
}

impl ActivationTables {
    pub fn new(tanh: PwlTable, sigmoid: PwlTable) -> Result<Self> {
        if tanh.kind != ActivationKind::Tanh || sigmoid.kind != ActivationKind::Sigmoid {
            return Err(Error::TableParams("expected a tanh and a sigmoid table".into()));
        }
        Ok(ActivationTables { tanh, sigmoid })
    }

    /// Default tables: 32 segments on a `2^-12` grid.
    pub fn standard() -> Self {
        let tanh = build_tanh_table(DEFAULT_SEGMENTS, pow2(-(DEFAULT_GRID_EXP as i32)))
            .expect("default tanh table meets its budget");
        let sigmoid = derive_sigmoid_table(&tanh).expect("default sigmoid table");
        ActivationTables { tanh, sigmoid }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables() -> ActivationTables {
        ActivationTables::standard()
    }

    #[test]
    fn tanh_examples() {
        let t = tables().tanh;
        assert_eq!(t.eval(0.0), 0.0);
        assert_eq!(t.code(1e300), 255);
        assert_eq!(t.eval(10.0), t.level(255));
        assert!((t.eval(10.0) - 1.0).abs() <= 0.01);
        let v = t.eval(0.5);
        assert!((v - 0.5f64.tanh()).abs() <= 0.01);
        assert!(t.codebook().iter().any(|&l| l as f64 / 32768.0 == v));
        assert_eq!(t.eval(-0.5), -t.eval(0.5));
        assert_eq!(t.level(t.code(0.0)), 0.0);
    }

    #[test]
    fn sigmoid_examples() {
        let s = tables().sigmoid;
        assert_eq!(s.eval(0.0), 0.5);
        assert_eq!(s.code(-10.0), 0);
        assert!(s.eval(-10.0).abs() <= 0.01);
        assert!((s.eval(1.0) - 0.7310586).abs() <= 0.01);
        assert!((s.eval(7.0) - sigmoid(7.0)).abs() <= 0.01);
        assert!((s.eval(-7.0) - sigmoid(-7.0)).abs() <= 0.01);
    }

    #[test]
    fn reports_meet_budget() {
        let t = tables();
        for table in [&t.tanh, &t.sigmoid] {
            let r = table.accuracy(8.0);
            assert!(r.max_abs_error <= ERROR_BUDGET, "{r:?}");
            assert!(r.monotone);
            assert!(r.codes_used >= 200, "{r:?}");
        }
    }

    #[test]
    fn too_few_segments_reports_error() {
        match build_tanh_table(4, pow2(-12)) {
            Err(Error::TableBudget { max_error, .. }) => assert!(max_error > ERROR_BUDGET),
            other => panic!("expected budget error, got {other:?}"),
        }
        assert!(matches!(build_tanh_table(6, pow2(-12)), Err(Error::TableParams(_))));
        assert!(matches!(build_tanh_table(32, 0.01), Err(Error::TableParams(_))));
        assert!(matches!(build_tanh_table(32, pow2(-8)), Err(Error::TableParams(_))));
    }

    #[test]
    fn sigmoid_requires_tanh_input() {
        let s = tables().sigmoid;
        assert!(derive_sigmoid_table(&s).is_err());
    }

    #[test]
    fn codebook_shapes() {
        let t = tables();
        let cb = t.tanh.codebook();
        assert_eq!(cb.len(), 256);
        for k in 0..256 {
            assert_eq!(cb[k], -cb[255 - k]);
        }
        assert!(t.sigmoid.codebook().iter().all(|&l| (0..=32768).contains(&l)));
    }

    #[test]
    fn text_roundtrip() {
        let t = tables();
        for table in [&t.tanh, &t.sigmoid] {
            let back = PwlTable::from_bytes(&table.to_bytes()).unwrap();
            assert_eq!(&back, table);
        }
    }

    #[test]
    fn truncated_file_fails() {
        let bytes = tables().tanh.to_bytes();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(PwlTable::from_bytes(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn unsorted_breakpoints_named() {
        let text = tables().tanh.to_text();
        let mut lines: Vec<&str> = text.lines().collect();
        let first = lines.iter().position(|l| l.starts_with("segment ")).unwrap();
        lines.swap(first, first + 1);
        let corrupted = lines.join("\n");
        match PwlTable::from_text(&corrupted) {
            Err(Error::Invariant { field, .. }) => assert_eq!(field, "breakpoints"),
            other => panic!("expected breakpoints violation, got {other:?}"),
        }
    }

    #[test]
    fn odd_symmetry_on_grid() {
        let t = tables().tanh;
        for k in (0..20_000).step_by(7) {
            assert_eq!(t.eval_grid(-k), -t.eval_grid(k), "k = {k}");
        }
    }

    #[test]
    fn sigmoid_tracks_half_tanh() {
        let t = tables();
        let cb = t.sigmoid.codebook();
        for k in (-30_000i64..30_000).step_by(11) {
            let sig = t.sigmoid.eval_grid(k);
            let via_tanh = (1.0 + t.tanh.eval_grid(k / 2)) / 2.0;
            let code = t.sigmoid.code_at_grid(k) as usize;
            let lo = cb[code.saturating_sub(1)];
            let hi = cb[(code + 1).min(255)];
            let step = (hi - lo) as f64 / 32768.0;
            assert!((sig - via_tanh).abs() <= step, "k = {k}");
        }
    }
}
