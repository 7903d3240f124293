//! Damped-sinusoid fitting by Hankel/Lanczos SVD.
//!
//! The profile is modeled as `I_n ≈ Σ a_k exp(−d_k θ_n) cos(2π f_k θ_n + φ_k)`.
//! The samples are embedded in a Hankel matrix whose leading right singular
//! vectors span the signal subspace; the shift structure of that subspace
//! yields the poles `z_k = exp((−d_k + i2πf_k)Δθ)`, and the amplitudes and
//! phases follow from a linear least-squares fit.

mod hankel;
mod lanczos;
mod modes;

pub use hankel::{hankel_operator, HankelOperator, LinearOperator};
pub use lanczos::{lanczos_bidiag, lanczos_bidiag_with, LanczosOptions, PartialSVD};
pub use modes::{estimate_modes, fit_amplitudes, reconstruct, AmplitudeFit, Mode};

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::Pattern;

/// Number of leading singular values inspected by automatic order selection.
pub const AUTO_K_WINDOW: usize = 20;

/// One damped cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidComponent {
    pub amplitude: f64,
    /// 1/degree
    pub damping: f64,
    /// cycles/degree
    pub frequency: f64,
    /// radians in (−π, π]
    pub phase: f64,
    /// The pole lies outside the unit circle (negative damping).
    #[serde(default)]
    pub growing: bool,
}

/// A sum of damped cosines on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidModel {
    pub components: Vec<SinusoidComponent>,
    pub theta0: f64,
    pub step: f64,
}

impl SinusoidModel {
    pub fn new(mut components: Vec<SinusoidComponent>, theta0: f64, step: f64) -> Self {
        sort_components(&mut components);
        Self {
            components,
            theta0,
            step,
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Model evaluated on `n` samples of its own grid.
    pub fn evaluate(&self, n: usize) -> Vec<f64> {
        let theta: Vec<f64> = (0..n).map(|i| self.theta0 + i as f64 * self.step).collect();
        reconstruct(self, &theta)
    }
}

pub(crate) fn sort_components(components: &mut [SinusoidComponent]) {
    components.sort_by(|a, b| {
        a.frequency
            .total_cmp(&b.frequency)
            .then(a.damping.total_cmp(&b.damping))
    });
}

/// Discrete analytic signal: the input plus `i` times its Hilbert transform,
/// computed by zeroing the negative half of the spectrum.
pub fn analytic_signal(pattern: &Pattern) -> Vec<Complex64> {
    analytic_from_real(pattern.intensity())
}

pub fn analytic_from_real(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    for (k, c) in buf.iter_mut().enumerate() {
        let weight = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *c *= weight / n as f64;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    // Real part is the input by construction; restore it exactly.
    for (c, &v) in buf.iter_mut().zip(x) {
        c.re = v;
    }
    buf
}

/// How the real profile is turned into a complex sequence for the Hankel
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bridge {
    /// Embed the real samples directly; each cosine contributes a conjugate
    /// pole pair, and only the non-negative-frequency member is kept.
    #[default]
    ConjugatePairs,
    /// Embed the analytic signal; each cosine maps to a single pole.
    Analytic,
}

/// Model-order selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrderSelection {
    /// Largest ratio `λ_i/λ_{i+1}` among the leading singular values.
    #[default]
    Auto,
    /// Fixed number of real damped cosines.
    Fixed(usize),
}

impl std::str::FromStr for OrderSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Self::Fixed(k)),
            _ => Err(Error::Domain(format!("K must be `auto` or a positive integer, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for OrderSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HlsvdOptions {
    pub order: OrderSelection,
    pub bridge: Bridge,
    pub reorth_threshold: f64,
}

impl Default for HlsvdOptions {
    fn default() -> Self {
        Self {
            order: OrderSelection::Auto,
            bridge: Bridge::ConjugatePairs,
            reorth_threshold: f64::EPSILON.sqrt(),
        }
    }
}

/// Diagnostics of the order-selection step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderDiagnostics {
    pub mode: String,
    /// Number of complex poles (signal-subspace dimension) retained.
    pub poles: usize,
    /// Number of real components in the final model.
    pub components: usize,
    pub singular_values: Vec<f64>,
    /// `λ_i/λ_{i+1}` for the inspected window (auto mode only).
    pub gap_ratios: Vec<f64>,
    pub lanczos_steps: usize,
    pub lanczos_converged: bool,
    pub lanczos_breakdown: bool,
    pub reorthogonalizations: usize,
}

/// Result of [`hlsvd_fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HlsvdFit {
    pub model: SinusoidModel,
    pub residual_norm: f64,
    /// `‖model − pattern‖₂ / ‖pattern‖₂`
    pub relative_residual: f64,
    pub condition: f64,
    pub bridge: Bridge,
    pub order: OrderDiagnostics,
}

/// Selects the signal-subspace dimension at the largest singular-value gap.
/// Values missing after a Lanczos breakdown count as zero.
pub fn select_order(values: &[f64], breakdown: bool) -> (usize, Vec<f64>) {
    let window = values.len().min(AUTO_K_WINDOW);
    if window == 0 {
        return (0, Vec::new());
    }
    let floor = f64::EPSILON * values[0];
    let mut ratios = Vec::with_capacity(window);
    for i in 0..window {
        let next = match values.get(i + 1) {
            Some(&v) if i + 1 < AUTO_K_WINDOW => v,
            Some(_) => break,
            None if breakdown => 0.0,
            None => break,
        };
        ratios.push(values[i] / next.max(floor));
    }
    let best = ratios
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc })
        .0;
    (best + 1, ratios)
}

/// End-to-end fit: complex embedding → Hankel operator → Lanczos SVD → pole
/// estimation → amplitude/phase least squares.
pub fn hlsvd_fit(pattern: &Pattern, opts: &HlsvdOptions) -> Result<HlsvdFit> {
    let signal: Vec<Complex64> = match opts.bridge {
        Bridge::ConjugatePairs => pattern
            .intensity()
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect(),
        Bridge::Analytic => analytic_signal(pattern),
    };
    let op = hankel_operator(&signal)?;
    let rmax = op.rows().min(op.cols());
    let poles_per_component = match opts.bridge {
        Bridge::ConjugatePairs => 2,
        Bridge::Analytic => 1,
    };
    let want = match opts.order {
        OrderSelection::Fixed(k) => {
            let poles = k * poles_per_component;
            if poles > rmax {
                return Err(Error::Domain(format!(
                    "K = {k} needs {poles} poles but the Hankel matrix has rank at most {rmax}"
                )));
            }
            poles
        }
        OrderSelection::Auto => (AUTO_K_WINDOW + 1).min(rmax),
    };
    let svd = lanczos_bidiag(&op, want, opts.reorth_threshold)?;
    let (poles, gap_ratios, mode) = match opts.order {
        OrderSelection::Fixed(_) => (want, Vec::new(), opts.order.to_string()),
        OrderSelection::Auto => {
            let (k, ratios) = select_order(&svd.values, svd.breakdown);
            (k, ratios, "auto".to_string())
        }
    };
    if poles == 0 || poles > svd.rank_used() {
        return Err(Error::Domain(format!(
            "signal subspace of dimension {poles} requested but only {} singular triplets were found",
            svd.rank_used()
        )));
    }
    let raw = estimate_modes(&svd, poles, pattern.step())?;
    let modes = match opts.bridge {
        Bridge::ConjugatePairs => keep_non_negative_frequencies(raw),
        Bridge::Analytic => raw
            .into_iter()
            .map(|m| Mode {
                frequency: m.frequency.abs(),
                ..m
            })
            .collect(),
    };
    let fit = fit_amplitudes(pattern, &modes)?;
    let norm = pattern.intensity().iter().map(|v| v * v).sum::<f64>().sqrt();
    let relative_residual = if norm > 0.0 { fit.residual_norm / norm } else { 0.0 };
    Ok(HlsvdFit {
        order: OrderDiagnostics {
            mode,
            poles,
            components: fit.model.len(),
            singular_values: svd.values.clone(),
            gap_ratios,
            lanczos_steps: svd.steps,
            lanczos_converged: svd.converged,
            lanczos_breakdown: svd.breakdown,
            reorthogonalizations: svd.reorthogonalizations,
        },
        model: fit.model,
        residual_norm: fit.residual_norm,
        relative_residual,
        condition: fit.condition,
        bridge: opts.bridge,
    })
}

/// From a real signal's pole set, keep one member of each conjugate pair and
/// every pole on the real axis.
fn keep_non_negative_frequencies(modes: Vec<Mode>) -> Vec<Mode> {
    modes
        .into_iter()
        .filter_map(|m| {
            if m.pole.im.abs() <= 1e-9 * m.pole.norm() {
                // On the real axis: DC (f = 0) or Nyquist.
                let frequency = if m.pole.re < 0.0 { m.frequency.abs() } else { 0.0 };
                Some(Mode { frequency, ..m })
            } else if m.frequency > 0.0 {
                Some(m)
            } else {
                None
            }
        })
        .collect()
}

/// Converts a pole to `(frequency, damping)` for grid step `step`.
pub fn pole_to_mode(z: Complex64, step: f64) -> (f64, f64) {
    let damping = -z.norm().ln() / step;
    let frequency = z.arg() / (2.0 * PI * step);
    (frequency, damping)
}
