//! Diffraction profile data model and the two-column `xy` ASCII format.
//!
//! A [`Pattern`] is a 1-D profile sampled on a uniform 2θ grid. Every stage of
//! the pipeline consumes and produces patterns, so the grid invariants are
//! enforced once, at construction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted profile length.
pub const MIN_LEN: usize = 8;

/// Relative tolerance on the spacing of consecutive angles.
pub const GRID_TOL: f64 = 1e-9;

/// A 1-D diffraction profile on a uniform angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    theta: Vec<f64>,
    intensity: Vec<f64>,
    step: f64,
}

impl Pattern {
    /// Builds a pattern from explicit angles, validating length, uniformity
    /// and finiteness. Intensities may be negative here; the loader is the
    /// place where raw data is required to be non-negative.
    pub fn new(theta: Vec<f64>, intensity: Vec<f64>) -> Result<Self> {
        if theta.len() != intensity.len() {
            return Err(Error::Size(format!(
                "theta has {} samples but intensity has {}",
                theta.len(),
                intensity.len()
            )));
        }
        let n = theta.len();
        if n < MIN_LEN {
            return Err(Error::Size(format!(
                "pattern needs at least {MIN_LEN} samples, got {n}"
            )));
        }
        if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::Grid(format!("non-finite angle at sample {i}")));
        }
        if let Some(i) = intensity.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite intensity at sample {i}")));
        }
        let step = (theta[n - 1] - theta[0]) / (n - 1) as f64;
        if step <= 0.0 {
            return Err(Error::Grid("angles must be strictly increasing".into()));
        }
        for (i, w) in theta.windows(2).enumerate() {
            let d = w[1] - w[0];
            if (d - step).abs() > GRID_TOL * step {
                return Err(Error::Grid(format!(
                    "non-uniform spacing between samples {i} and {}: {d} vs mean step {step}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            theta,
            intensity,
            step,
        })
    }

    /// Builds a pattern on the grid `theta0 + i * step`.
    pub fn from_grid(theta0: f64, step: f64, intensity: Vec<f64>) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Grid(format!("step must be positive, got {step}")));
        }
        let theta = (0..intensity.len())
            .map(|i| theta0 + i as f64 * step)
            .collect();
        Self::new(theta, intensity)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn theta0(&self) -> f64 {
        self.theta[0]
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    /// Always false: a valid pattern has at least [`MIN_LEN`] samples.
    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn into_intensity(self) -> Vec<f64> {
        self.intensity
    }

    /// Same grid, new intensities.
    pub fn with_intensity(&self, intensity: Vec<f64>) -> Result<Self> {
        if intensity.len() != self.len() {
            return Err(Error::Size(format!(
                "expected {} samples, got {}",
                self.len(),
                intensity.len()
            )));
        }
        if let Some(i) = intensity.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite intensity at sample {i}")));
        }
        Ok(Self {
            theta: self.theta.clone(),
            intensity,
            step: self.step,
        })
    }

    /// Fails unless `other` lives on the same grid (length, origin and step).
    pub fn check_same_grid(&self, other: &Pattern) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Grid(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        self.check_same_step(other)?;
        if (self.theta0() - other.theta0()).abs() > GRID_TOL * self.step.max(1.0) {
            return Err(Error::Grid(format!(
                "origin mismatch: {} vs {}",
                self.theta0(),
                other.theta0()
            )));
        }
        Ok(())
    }

    /// Fails unless both patterns share the angle increment.
    pub fn check_same_step(&self, other: &Pattern) -> Result<()> {
        if (self.step - other.step).abs() > GRID_TOL * self.step {
            return Err(Error::Grid(format!(
                "step mismatch: {} vs {}",
                self.step, other.step
            )));
        }
        Ok(())
    }

    /// Fails if any intensity is negative.
    pub fn check_non_negative(&self) -> Result<()> {
        match self.intensity.iter().position(|&v| v < 0.0) {
            Some(i) => Err(Error::Domain(format!(
                "negative intensity {} at sample {i}",
                self.intensity[i]
            ))),
            None => Ok(()),
        }
    }

    /// Sub-pattern over the inclusive index range `lo..=hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<Self> {
        if lo > hi || hi >= self.len() {
            return Err(Error::Size(format!(
                "slice {lo}..={hi} outside 0..{}",
                self.len()
            )));
        }
        Self::new(
            self.theta[lo..=hi].to_vec(),
            self.intensity[lo..=hi].to_vec(),
        )
    }

    /// Sub-pattern holding the samples with `lo <= theta <= hi`.
    pub fn restrict(&self, lo: f64, hi: f64) -> Result<Self> {
        let first = self.theta.iter().position(|&t| t >= lo);
        let last = self.theta.iter().rposition(|&t| t <= hi);
        match (first, last) {
            (Some(a), Some(b)) if a <= b => self.slice(a, b),
            _ => Err(Error::Domain(format!(
                "range {lo}:{hi} holds no samples of the pattern"
            ))),
        }
    }

    /// Index of the grid sample closest to `angle`, clamped to the grid.
    pub fn index_of(&self, angle: f64) -> usize {
        let x = ((angle - self.theta0()) / self.step).round();
        x.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    pub fn sum(&self) -> f64 {
        self.intensity.iter().sum()
    }
}

/// Pipeline stage labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Denoised,
    Background,
    BackgroundFree,
    Deblurred,
    Reconvolved,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Raw,
        Stage::Denoised,
        Stage::Background,
        Stage::BackgroundFree,
        Stage::Deblurred,
        Stage::Reconvolved,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Denoised => "denoised",
            Stage::Background => "background",
            Stage::BackgroundFree => "background_free",
            Stage::Deblurred => "deblurred",
            Stage::Reconvolved => "reconvolved",
        }
    }

    /// File name used for the stage artifact inside a run directory.
    pub fn file_name(self) -> String {
        format!("{}.xy", self.as_str())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pipeline artifact: a stage label, its pattern and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub pattern: Pattern,
    pub metadata: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn new(stage: Stage, pattern: Pattern) -> Self {
        Self {
            stage,
            pattern,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }
}

/// Supported on-disk formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    XyAscii,
}

/// Parses two-column `xy` text. `#` starts a comment line; blank lines are
/// skipped; columns may be separated by spaces or tabs.
pub fn parse_xy(text: &str) -> Result<Pattern> {
    let mut theta = Vec::new();
    let mut intensity = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("`{s}`: {e}"),
            })
        };
        let t = parse(cols[0])?;
        let v = parse(cols[1])?;
        if !t.is_finite() || !v.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        if v < 0.0 {
            return Err(Error::Domain(format!(
                "negative intensity {v} at line {line_no}"
            )));
        }
        theta.push(t);
        intensity.push(v);
    }
    Pattern::new(theta, intensity)
}

pub fn load_pattern(path: impl AsRef<Path>, format: Format) -> Result<Pattern> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::XyAscii => parse_xy(&text),
    }
}

/// Serializes a pattern as `xy` text with 17 significant digits per value.
pub fn format_xy(pattern: &Pattern) -> String {
    let mut out = String::with_capacity(pattern.len() * 48);
    for (t, v) in pattern.theta().iter().zip(pattern.intensity()) {
        out.push_str(&format_g(*t, 17));
        out.push(' ');
        out.push_str(&format_g(*v, 17));
        out.push('\n');
    }
    out
}

pub fn save_pattern(pattern: &Pattern, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_xy(pattern).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// C-style `%.{precision}g` formatting.
pub fn format_g(x: f64, precision: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
