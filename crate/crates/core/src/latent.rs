//! Latent spaces: row schedules, style-space and W+ codes, mixing masks and
//! the masked style-mixing operation.

use std::fmt;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nets::{MappingNetwork, StyleMapper};
use crate::real::Real;
use crate::rng;

/// Ordered row widths of a style space.
///
/// Widths are powers of two and never increase along the list; each distinct
/// width gets its own transformation matrix in an STN.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RowSchedule {
    widths: Vec<usize>,
}

impl RowSchedule {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() {
            return Err(arg_err!("row schedule must not be empty"));
        }
        if let Some(w) = widths.iter().find(|w| !w.is_power_of_two()) {
            return Err(arg_err!("row width {w} is not a power of two"));
        }
        if widths.windows(2).any(|p| p[1] > p[0]) {
            return Err(arg_err!("row widths must be non-increasing: {widths:?}"));
        }
        Ok(Self { widths })
    }

    /// Desk-scale default: ten rows tapering 64 -> 16.
    pub fn toy() -> Self {
        Self::new(vec![64, 64, 64, 64, 64, 64, 32, 32, 16, 16]).expect("valid preset")
    }

    /// Full-scale 26-row layout (15 x 512, then 256, 128, 64, 32).
    ///
    /// Per-width counts after the first fifteen rows are a reconstruction;
    /// only the 26-row total and the five distinct widths are fixed.
    pub fn full_scale() -> Self {
        let mut w = vec![512; 15];
        w.extend([256; 3]);
        w.extend([128; 3]);
        w.extend([64; 3]);
        w.extend([32; 2]);
        Self::new(w).expect("valid preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" | "full_scale" => Ok(Self::full_scale()),
            other => Err(Error::Config(format!("unknown schedule preset `{other}`"))),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    /// Distinct widths, widest first.
    pub fn unique_widths(&self) -> Vec<usize> {
        let mut u = self.widths.clone();
        u.dedup();
        u
    }

    pub fn total_width(&self) -> usize {
        self.widths.iter().sum()
    }
}

impl TryFrom<Vec<usize>> for RowSchedule {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RowSchedule> for Vec<usize> {
    fn from(s: RowSchedule) -> Self {
        s.widths
    }
}

/// A style-space code: one row per synthesis block.
#[derive(Debug, Clone, PartialEq)]
pub struct SCode<T> {
    rows: Vec<Array1<T>>,
    schedule: RowSchedule,
}

impl<T: Real> SCode<T> {
    pub fn new(schedule: RowSchedule, rows: Vec<Array1<T>>) -> Result<Self> {
        if rows.len() != schedule.len() {
            return Err(shape_err!(
                "code has {} rows, schedule has {}",
                rows.len(),
                schedule.len()
            ));
        }
        for (i, (r, &w)) in rows.iter().zip(schedule.widths()).enumerate() {
            if r.len() != w {
                return Err(shape_err!("row {i} has width {}, expected {w}", r.len()));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("row {i} has non-finite entries")));
            }
        }
        Ok(Self { rows, schedule })
    }

    pub fn zeros(schedule: &RowSchedule) -> Self {
        let rows = schedule.widths().iter().map(|&w| Array1::zeros(w)).collect();
        Self {
            rows,
            schedule: schedule.clone(),
        }
    }

    pub fn from_flat(schedule: &RowSchedule, flat: &[T]) -> Result<Self> {
        if flat.len() != schedule.total_width() {
            return Err(shape_err!(
                "flat code has {} entries, schedule needs {}",
                flat.len(),
                schedule.total_width()
            ));
        }
        let mut off = 0;
        let rows = schedule
            .widths()
            .iter()
            .map(|&w| {
                let r = Array1::from(flat[off..off + w].to_vec());
                off += w;
                r
            })
            .collect();
        Self::new(schedule.clone(), rows)
    }

    pub fn schedule(&self) -> &RowSchedule {
        &self.schedule
    }

    pub fn rows(&self) -> &[Array1<T>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Array1<T> {
        &self.rows[i]
    }

    pub fn into_rows(self) -> Vec<Array1<T>> {
        self.rows
    }

    pub fn flatten(&self) -> Vec<T> {
        self.rows.iter().flat_map(|r| r.iter().copied()).collect()
    }

    pub fn ensure_schedule(&self, expected: &RowSchedule) -> Result<()> {
        if &self.schedule != expected {
            return Err(shape_err!(
                "code schedule {:?} does not match {:?}",
                self.schedule.widths(),
                expected.widths()
            ));
        }
        Ok(())
    }

    /// `a * self + b * other`, row-wise.
    pub fn affine_combine(&self, a: T, other: &Self, b: T) -> Result<Self> {
        other.ensure_schedule(&self.schedule)?;
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(x, y)| x.mapv(|v| v * a) + &y.mapv(|v| v * b))
            .collect();
        Ok(Self {
            rows,
            schedule: self.schedule.clone(),
        })
    }

    pub fn sq_distance(&self, other: &Self) -> T {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(x, y)| (x - y).mapv(|v| v * v).sum())
            .fold(T::zero(), |a, b| a + b)
    }

    pub fn distance(&self, other: &Self) -> T {
        self.sq_distance(other).sqrt()
    }

    pub fn cast<U: Real>(&self) -> SCode<U> {
        SCode {
            rows: self
                .rows
                .iter()
                .map(|r| r.mapv(|v| U::lit(v.as_f64())))
                .collect(),
            schedule: self.schedule.clone(),
        }
    }
}

/// A W+ code: one vector per synthesis row, all of the same width.
#[derive(Debug, Clone, PartialEq)]
pub struct WCode<T> {
    rows: Vec<Array1<T>>,
}

impl<T: Real> WCode<T> {
    pub fn new(rows: Vec<Array1<T>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(arg_err!("W+ code needs at least one row"));
        };
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(shape_err!("W+ rows must share one width"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("W+ code has non-finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn broadcast(w: Array1<T>, rows: usize) -> Self {
        Self {
            rows: vec![w; rows],
        }
    }

    pub fn rows(&self) -> &[Array1<T>] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-row binary mask: rows with bit 1 keep the reference code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StyleMixMask {
    bits: Vec<bool>,
}

impl StyleMixMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn ones(rows: usize) -> Self {
        Self::new(vec![true; rows])
    }

    pub fn zeros(rows: usize) -> Self {
        Self::new(vec![false; rows])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self::new(self.bits.iter().map(|b| !b).collect())
    }

    pub fn with_bit(mut self, row: usize, value: bool) -> Result<Self> {
        let n = self.bits.len();
        let slot = self
            .bits
            .get_mut(row)
            .ok_or_else(|| Error::Bounds(format!("row {row} outside mask of {n} rows")))?;
        *slot = value;
        Ok(self)
    }

    pub fn ensure_rows(&self, rows: usize) -> Result<()> {
        if self.bits.len() != rows {
            return Err(shape_err!(
                "mask has {} bits, schedule has {rows} rows",
                self.bits.len()
            ));
        }
        Ok(())
    }
}

impl fmt::Display for StyleMixMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl TryFrom<String> for StyleMixMask {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for StyleMixMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Config(format!("mask bit `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(bits))
    }
}

impl From<StyleMixMask> for String {
    fn from(m: StyleMixMask) -> Self {
        m.to_string()
    }
}

/// `bits[i] = 0` for `i < start_row`, `1` otherwise.
pub fn make_tail_mask(schedule: &RowSchedule, start_row: usize) -> Result<StyleMixMask> {
    let n = schedule.len();
    if start_row > n {
        return Err(Error::Bounds(format!(
            "mask start row {start_row} exceeds row count {n}"
        )));
    }
    Ok(StyleMixMask::new((0..n).map(|i| i >= start_row).collect()))
}

/// Default tail mask: the first `ceil(0.45 * rows)` rows are randomized.
pub fn default_mask(schedule: &RowSchedule) -> StyleMixMask {
    let start = (0.45 * schedule.len() as f64).ceil() as usize;
    make_tail_mask(schedule, start).expect("start within range")
}

/// Row-wise selection: masked rows from `reference`, the rest from `random`.
pub fn mix_codes<T: Real>(
    reference: &SCode<T>,
    random: &SCode<T>,
    mask: &StyleMixMask,
) -> Result<SCode<T>> {
    random.ensure_schedule(reference.schedule())?;
    mask.ensure_rows(reference.schedule().len())?;
    let rows = reference
        .rows()
        .iter()
        .zip(random.rows())
        .zip(mask.bits())
        .map(|((r, z), &keep)| if keep { r.clone() } else { z.clone() })
        .collect();
    Ok(SCode {
        rows,
        schedule: reference.schedule().clone(),
    })
}

/// Masked style mixing of a reference code with the style of a noise draw.
pub fn style_mix<T: Real>(
    s_ref: &SCode<T>,
    z: &Array1<T>,
    mask: &StyleMixMask,
    mapper: &MappingNetwork<T>,
    styler: &StyleMapper<T>,
) -> Result<SCode<T>> {
    mask.ensure_rows(s_ref.schedule().len())?;
    let random = styler.to_style(&mapper.map_noise(z)?)?;
    mix_codes(s_ref, &random, mask)
}

/// A reference code together with a batch of mixed variants of it.
#[derive(Debug, Clone)]
pub struct ReferenceSet<T> {
    pub style_index: usize,
    pub reference_code: SCode<T>,
    pub mixed_codes: Vec<SCode<T>>,
    pub seed: u64,
}

pub fn build_reference_set<T: Real>(
    style_index: usize,
    s_ref: &SCode<T>,
    count: usize,
    mask: &StyleMixMask,
    seed: u64,
    mapper: &MappingNetwork<T>,
    styler: &StyleMapper<T>,
) -> Result<ReferenceSet<T>> {
    if count < 1 {
        return Err(arg_err!("reference set needs at least one code"));
    }
    let mixed_codes = (0..count)
        .map(|j| {
            let mut r = rng::stream(seed, &[style_index as u64, j as u64]);
            let z = rng::gaussian(&mut r, mapper.z_dim());
            style_mix(s_ref, &z, mask, mapper, styler)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceSet {
        style_index,
        reference_code: s_ref.clone(),
        mixed_codes,
        seed,
    })
}
