//! Daubechies wavelet filters, periodic pyramid DWT and soft-threshold
//! denoising.
//!
//! Filters use the `Σ c_k² = 2` normalization; the transform divides by `√2`
//! so that each analysis step is orthonormal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pattern::Pattern;

/// Largest supported Daubechies order.
pub const MAX_ORDER: usize = 6;

/// MAD-to-sigma conversion for Gaussian noise.
const MAD_SCALE: f64 = 0.6745;

// Newton starting points (orthonormal filters scaled by √2). Only a few digits
// matter; the constraint solve polishes them to machine precision.
const SEEDS: [&[f64]; MAX_ORDER] = [
    &[1.0, 1.0],
    &[0.683013, 1.183013, 0.316987, -0.183013],
    &[0.470467, 1.141117, 0.650365, -0.190934, -0.120832, 0.049817],
    &[
        0.325803, 1.010946, 0.892200, -0.039575, -0.264507, 0.043616, 0.046504, -0.014987,
    ],
    &[
        0.226419, 0.853944, 1.024327, 0.195767, -0.342657, -0.045601, 0.109703, -0.008827,
        -0.017792, 0.004717,
    ],
    &[
        0.157742, 0.699504, 1.062264, 0.445832, -0.319986, -0.183518, 0.137888, 0.038923,
        -0.044663, 0.000783, 0.006756, -0.001524,
    ],
];

// Hölder regularity of the Daubechies scaling function; order 1 is Haar.
const REGULARITY: [f64; MAX_ORDER] = [0.0, 0.500, 0.915, 1.275, 1.596, 1.888];

/// Low-pass/high-pass filter pair of a Daubechies wavelet.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    order: usize,
    lowpass: Vec<f64>,
    highpass: Vec<f64>,
    regularity: f64,
}

impl WaveletBasis {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    pub fn highpass(&self) -> &[f64] {
        &self.highpass
    }

    /// Tabulated regularity exponent, kept for reference only.
    pub fn regularity(&self) -> f64 {
        self.regularity
    }

    fn taps(&self) -> usize {
        self.lowpass.len()
    }
}

/// Residuals of the filter constraint system: orthogonality for shifts
/// `m = 0..N` followed by the `N` vanishing moments.
pub fn constraint_residuals(c: &[f64]) -> Vec<f64> {
    let taps = c.len();
    let order = taps / 2;
    let mut r = Vec::with_capacity(taps);
    for m in 0..order {
        let s: f64 = (0..taps.saturating_sub(2 * m))
            .map(|k| c[k] * c[k + 2 * m])
            .sum();
        r.push(if m == 0 { s - 2.0 } else { s });
    }
    for m in 0..order {
        let s: f64 = c
            .iter()
            .enumerate()
            .map(|(k, &ck)| alt_sign(k) * (k as f64).powi(m as i32) * ck)
            .sum();
        r.push(s);
    }
    r
}

fn constraint_jacobian(c: &[f64]) -> DMatrix<f64> {
    let taps = c.len();
    let order = taps / 2;
    let mut jac = DMatrix::zeros(taps, taps);
    for m in 0..order {
        for j in 0..taps {
            let mut d = 0.0;
            if j + 2 * m < taps {
                d += c[j + 2 * m];
            }
            if j >= 2 * m {
                d += c[j - 2 * m];
            }
            jac[(m, j)] = d;
        }
    }
    for m in 0..order {
        for j in 0..taps {
            jac[(order + m, j)] = alt_sign(j) * (j as f64).powi(m as i32);
        }
    }
    jac
}

fn alt_sign(k: usize) -> f64 {
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Solves the orthogonality + vanishing-moment system for the Daubechies
/// filter of the given order by Newton iteration.
pub fn daubechies_filter(order: usize) -> Result<WaveletBasis> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::Domain(format!(
            "Daubechies order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    let mut c = DVector::from_column_slice(SEEDS[order - 1]);
    for _ in 0..50 {
        let r = DVector::from_vec(constraint_residuals(c.as_slice()));
        if r.amax() < 1e-15 {
            break;
        }
        let jac = constraint_jacobian(c.as_slice());
        let delta = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Numerical("singular Jacobian in filter solve".into()))?;
        c -= &delta;
        if delta.amax() < 1e-16 {
            break;
        }
    }
    let lowpass: Vec<f64> = c.iter().copied().collect();
    let worst = constraint_residuals(&lowpass)
        .into_iter()
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    if worst > 1e-10 {
        return Err(Error::Numerical(format!(
            "filter constraints not met for order {order}: residual {worst:e}"
        )));
    }
    let taps = lowpass.len();
    let highpass = (0..taps)
        .map(|k| alt_sign(k) * lowpass[taps - 1 - k])
        .collect();
    Ok(WaveletBasis {
        order,
        lowpass,
        highpass,
        regularity: REGULARITY[order - 1],
    })
}

/// Pyramid decomposition. `details` is ordered coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub levels: usize,
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
}

impl WaveletCoeffs {
    /// Total number of coefficients.
    pub fn len(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All coefficients in order of increasing frequency.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.approx.clone();
        for d in &self.details {
            out.extend_from_slice(d);
        }
        out
    }

    pub fn finest(&self) -> Option<&[f64]> {
        self.details.last().map(Vec::as_slice)
    }
}

fn analysis_step(x: &[f64], basis: &WaveletBasis) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for i in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for k in 0..basis.taps() {
            let v = x[(2 * i + k) % n];
            a += basis.lowpass[k] * v;
            d += basis.highpass[k] * v;
        }
        approx[i] = a * std::f64::consts::FRAC_1_SQRT_2;
        detail[i] = d * std::f64::consts::FRAC_1_SQRT_2;
    }
    (approx, detail)
}

fn synthesis_step(approx: &[f64], detail: &[f64], basis: &WaveletBasis) -> Vec<f64> {
    let n = approx.len() * 2;
    let mut x = vec![0.0; n];
    for i in 0..approx.len() {
        let (a, d) = (approx[i], detail[i]);
        for k in 0..basis.taps() {
            x[(2 * i + k) % n] += basis.lowpass[k] * a + basis.highpass[k] * d;
        }
    }
    for v in &mut x {
        *v *= std::f64::consts::FRAC_1_SQRT_2;
    }
    x
}

/// Forward periodic DWT over `levels` octaves.
pub fn dwt(signal: &[f64], basis: &WaveletBasis, levels: usize) -> Result<WaveletCoeffs> {
    if levels == 0 {
        return Err(Error::Size("at least one decomposition level is required".into()));
    }
    let block = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::Size(format!("{levels} levels is too deep")))?;
    if signal.is_empty() || signal.len() % block != 0 {
        return Err(Error::Size(format!(
            "signal length {} is not divisible by 2^{levels}",
            signal.len()
        )));
    }
    let mut current = signal.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = analysis_step(&current, basis);
        details.push(d);
        current = a;
    }
    details.reverse();
    Ok(WaveletCoeffs {
        levels,
        approx: current,
        details,
    })
}

/// Inverse of [`dwt`].
pub fn idwt(coeffs: &WaveletCoeffs, basis: &WaveletBasis) -> Result<Vec<f64>> {
    if coeffs.details.len() != coeffs.levels || coeffs.levels == 0 {
        return Err(Error::Size(format!(
            "{} detail arrays for {} levels",
            coeffs.details.len(),
            coeffs.levels
        )));
    }
    let mut current = coeffs.approx.clone();
    for (level, d) in coeffs.details.iter().enumerate() {
        if d.len() != current.len() {
            return Err(Error::Size(format!(
                "detail level {level} has {} coefficients, expected {}",
                d.len(),
                current.len()
            )));
        }
        current = synthesis_step(&current, d, basis);
    }
    Ok(current)
}

/// Median absolute deviation of the finest detail level, scaled to a
/// Gaussian standard deviation.
pub fn estimate_noise_sigma(coeffs: &WaveletCoeffs) -> Result<f64> {
    let finest = coeffs
        .finest()
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::Size("no finest detail level to estimate noise from".into()))?;
    let mut mags: Vec<f64> = finest.iter().map(|v| v.abs()).collect();
    Ok(median(&mut mags) / MAD_SCALE)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// `min(4, ⌊log2 N⌋ − 2)`, never below one.
pub fn default_levels(n: usize) -> usize {
    let log2 = (usize::BITS - 1 - n.max(1).leading_zeros()) as usize;
    log2.saturating_sub(2).clamp(1, 4)
}

/// Output of [`denoise`].
#[derive(Debug, Clone)]
pub struct Denoised {
    pub denoised: Pattern,
    pub noise: Pattern,
    pub sigma: f64,
    pub threshold: f64,
    pub levels: usize,
}

/// Soft-threshold wavelet denoising at the universal threshold.
///
/// The input is symmetrically extended to a multiple of `2^levels`, every
/// detail level is shrunk by `σ̂·√(2 ln N)` and the extension is stripped
/// after reconstruction. The noise output is exactly `input − denoised`.
pub fn denoise(pattern: &Pattern, basis: &WaveletBasis, levels: usize) -> Result<Denoised> {
    let n = pattern.len();
    if levels == 0 || levels >= usize::BITS as usize || (1usize << levels) > n {
        return Err(Error::Domain(format!(
            "{levels} decomposition levels do not fit a {n}-sample pattern"
        )));
    }
    let block = 1usize << levels;
    let padded_len = n.div_ceil(block) * block;
    let pad = padded_len - n;
    let left = pad / 2;
    let x = pattern.intensity();
    let padded: Vec<f64> = (0..padded_len)
        .map(|i| x[reflect(i as isize - left as isize, n)])
        .collect();

    let mut coeffs = dwt(&padded, basis, levels)?;
    let sigma = estimate_noise_sigma(&coeffs)?;
    let threshold = sigma * (2.0 * (n as f64).ln()).sqrt();
    for level in &mut coeffs.details {
        for v in level.iter_mut() {
            *v = soft_threshold(*v, threshold);
        }
    }
    let rec = idwt(&coeffs, basis)?;
    let clean: Vec<f64> = rec[left..left + n].to_vec();
    let noise: Vec<f64> = x.iter().zip(&clean).map(|(a, b)| a - b).collect();
    Ok(Denoised {
        denoised: pattern.with_intensity(clean)?,
        noise: pattern.with_intensity(noise)?,
        sigma,
        threshold,
        levels,
    })
}

/// Half-sample symmetric reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}
