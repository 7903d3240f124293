//! Damped Richardson–Lucy deconvolution against an instrumental standard.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::Pattern;

pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_PROMINENCE: f64 = 0.05;
/// A peak range extends to where the profile drops below this fraction of
/// the peak height.
pub const RANGE_FLOOR: f64 = 0.01;
const GUARD: f64 = 1e-12;

/// Angular bounds of one standard peak, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakRange {
    pub lo: f64,
    pub hi: f64,
}

impl PeakRange {
    /// Inclusive sample indices on `pattern`'s grid.
    pub fn indices(&self, pattern: &Pattern) -> (usize, usize) {
        (pattern.index_of(self.lo), pattern.index_of(self.hi))
    }

    pub fn contains(&self, angle: f64) -> bool {
        self.lo <= angle && angle <= self.hi
    }
}

/// Linear blur by a unit-sum kernel centered on its rounded centroid.
///
/// Near the grid ends part of the kernel falls outside; each input sample's
/// contribution is divided by the in-grid kernel mass so that every sample
/// keeps its flux.
pub struct BlurOperator {
    n: usize,
    kernel: Vec<f64>,
    center: usize,
    weights: Vec<f64>,
    plan: Option<FftPlan>,
}

struct FftPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    kernel: Vec<Complex64>,
    reversed: Vec<Complex64>,
}

impl std::fmt::Debug for BlurOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlurOperator")
            .field("n", &self.n)
            .field("kernel_len", &self.kernel.len())
            .field("center", &self.center)
            .finish()
    }
}

impl BlurOperator {
    /// `psf` need not be normalized; zero tails are trimmed.
    pub fn new(psf: &[f64], n: usize) -> Result<Self> {
        if let Some(v) = psf.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("PSF values must be finite and non-negative, found {v}")));
        }
        let first = psf.iter().position(|&v| v > 0.0);
        let last = psf.iter().rposition(|&v| v > 0.0);
        let (first, last) = match (first, last) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Domain("PSF has zero total intensity".into())),
        };
        let total: f64 = psf[first..=last].iter().sum();
        let kernel: Vec<f64> = psf[first..=last].iter().map(|v| v / total).collect();
        let centroid: f64 = kernel.iter().enumerate().map(|(i, v)| i as f64 * v).sum();
        let center = (centroid.round() as usize).min(kernel.len() - 1);

        let k = kernel.len();
        let mut prefix = vec![0.0; k + 1];
        for i in 0..k {
            prefix[i + 1] = prefix[i] + kernel[i];
        }
        // Column j of the blur covers kernel taps c − j ..= c − j + n − 1.
        let weights = (0..n)
            .map(|j| {
                let lo = (center as isize - j as isize).max(0) as usize;
                let hi = ((center + n) as isize - 1 - j as isize).min(k as isize - 1);
                if hi < lo as isize {
                    1.0
                } else {
                    let w = prefix[hi as usize + 1] - prefix[lo];
                    if w > 0.0 {
                        w
                    } else {
                        1.0
                    }
                }
            })
            .collect();

        let plan = (k > 1).then(|| {
            let len = (n + k - 1).next_power_of_two();
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(len);
            let inverse = planner.plan_fft_inverse(len);
            let mut kf = vec![Complex64::new(0.0, 0.0); len];
            let mut kr = kf.clone();
            for (i, &v) in kernel.iter().enumerate() {
                kf[i].re = v;
                kr[k - 1 - i].re = v;
            }
            forward.process(&mut kf);
            forward.process(&mut kr);
            FftPlan {
                len,
                forward,
                inverse,
                kernel: kf,
                reversed: kr,
            }
        });
        Ok(Self {
            n,
            kernel,
            center,
            weights,
            plan,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Normalized, trimmed kernel.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Kernel tap aligned with the output sample.
    pub fn center(&self) -> usize {
        self.center
    }

    pub fn is_identity(&self) -> bool {
        self.plan.is_none()
    }

    /// `out[i] = Σ_j f[j] k[i − j + c] / w[j]`
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.n, "blur operand length");
        let Some(plan) = &self.plan else {
            return f.to_vec();
        };
        let scaled: Vec<f64> = f.iter().zip(&self.weights).map(|(v, w)| v / w).collect();
        let full = fft_convolve(plan, &plan.kernel, &scaled);
        let out = &full[self.center..self.center + self.n];
        if f.iter().all(|&v| v >= 0.0) {
            // Clear FFT round-off so non-negative data stays non-negative.
            out.iter().map(|v| v.max(0.0)).collect()
        } else {
            out.to_vec()
        }
    }

    /// `out[j] = Σ_i r[i] k[i − j + c] / w[j]`
    pub fn apply_adjoint(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.n, "blur operand length");
        let Some(plan) = &self.plan else {
            return r.to_vec();
        };
        let full = fft_convolve(plan, &plan.reversed, r);
        let offset = self.kernel.len() - 1 - self.center;
        full[offset..offset + self.n]
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v / w)
            .collect()
    }
}

fn fft_convolve(plan: &FftPlan, spectrum: &[Complex64], x: &[f64]) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); plan.len];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    plan.forward.process(&mut buf);
    for (b, s) in buf.iter_mut().zip(spectrum) {
        *b *= s;
    }
    plan.inverse.process(&mut buf);
    let scale = 1.0 / plan.len as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// `f ⊗ psf` on `f`'s grid.
pub fn convolve(f: &Pattern, psf: &Pattern) -> Result<Pattern> {
    f.check_same_step(psf)?;
    let op = BlurOperator::new(psf.intensity(), f.len())?;
    f.with_intensity(op.apply(f.intensity()))
}

/// Inputs of [`richardson_lucy`].
#[derive(Debug, Clone)]
pub struct DeblurProblem {
    pub blurred: Pattern,
    pub psf: Pattern,
    pub iterations: usize,
    /// Misfit (counts) below which updates are suppressed; 0 disables.
    pub damping_threshold: f64,
}

impl DeblurProblem {
    pub fn new(blurred: Pattern, psf: Pattern, iterations: usize, damping_threshold: f64) -> Result<Self> {
        blurred.check_same_step(&psf)?;
        let p = Self {
            blurred,
            psf,
            iterations,
            damping_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Domain("at least one iteration is required".into()));
        }
        if !(self.damping_threshold >= 0.0) || !self.damping_threshold.is_finite() {
            return Err(Error::Domain(format!(
                "damping threshold must be finite and ≥ 0, got {}",
                self.damping_threshold
            )));
        }
        self.psf.check_non_negative()?;
        Ok(())
    }
}

/// The iteration state, exposed so callers can inspect every step.
#[derive(Debug)]
pub struct RichardsonLucy<'a> {
    op: &'a BlurOperator,
    g: &'a [f64],
    flux: f64,
    guard: f64,
    threshold: f64,
    estimate: Vec<f64>,
}

impl<'a> RichardsonLucy<'a> {
    /// Starts from the uniform estimate with the data's flux.
    pub fn new(op: &'a BlurOperator, g: &'a [f64], damping_threshold: f64) -> Result<Self> {
        if g.len() != op.len() {
            return Err(Error::Size(format!("data has {} samples, operator {}", g.len(), op.len())));
        }
        if let Some(i) = g.iter().position(|v| *v < 0.0) {
            return Err(Error::Domain(format!("blurred data is negative at sample {i}")));
        }
        let flux: f64 = g.iter().sum();
        let max = g.iter().fold(0.0_f64, |a, &b| a.max(b));
        if max <= 0.0 {
            return Err(Error::Domain("blurred data is identically zero".into()));
        }
        Ok(Self {
            op,
            g,
            flux,
            guard: GUARD * max,
            threshold: damping_threshold,
            estimate: vec![flux / g.len() as f64; g.len()],
        })
    }

    pub fn estimate(&self) -> &[f64] {
        &self.estimate
    }

    pub fn into_estimate(self) -> Vec<f64> {
        self.estimate
    }

    pub fn set_estimate(&mut self, f: Vec<f64>) {
        assert_eq!(f.len(), self.estimate.len());
        self.estimate = f;
    }

    /// Update weight for a data misfit: 0 up to the threshold, rising
    /// linearly to 1 at twice the threshold.
    fn weight(&self, misfit: f64) -> f64 {
        if self.threshold <= 0.0 {
            1.0
        } else {
            (misfit / self.threshold - 1.0).clamp(0.0, 1.0)
        }
    }

    /// One multiplicative update, rescaled to the data flux.
    pub fn step(&mut self) {
        let predicted = self.op.apply(&self.estimate);
        let ratio: Vec<f64> = self
            .g
            .iter()
            .zip(&predicted)
            .map(|(&g, &p)| {
                let r = g / p.max(self.guard);
                let w = self.weight((p - g).abs());
                1.0 + w * (r - 1.0)
            })
            .collect();
        let correction = self.op.apply_adjoint(&ratio);
        for (f, c) in self.estimate.iter_mut().zip(&correction) {
            *f = (*f * c).max(0.0);
        }
        let total: f64 = self.estimate.iter().sum();
        if total > 0.0 {
            let s = self.flux / total;
            self.estimate.iter_mut().for_each(|f| *f *= s);
        }
    }

    /// `‖A f − g‖₂` for the current estimate.
    pub fn misfit(&self) -> f64 {
        self.op
            .apply(&self.estimate)
            .iter()
            .zip(self.g)
            .map(|(p, g)| (p - g) * (p - g))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn richardson_lucy(problem: &DeblurProblem) -> Result<Pattern> {
    problem.validate()?;
    problem.blurred.check_same_step(&problem.psf)?;
    let op = BlurOperator::new(problem.psf.intensity(), problem.blurred.len())?;
    let f = run_rl(&op, problem.blurred.intensity(), problem.iterations, problem.damping_threshold)?;
    problem.blurred.with_intensity(f)
}

fn run_rl(op: &BlurOperator, g: &[f64], iterations: usize, damping: f64) -> Result<Vec<f64>> {
    let mut rl = RichardsonLucy::new(op, g, damping)?;
    for _ in 0..iterations {
        rl.step();
    }
    Ok(rl.into_estimate())
}

/// Peak ranges of a background-free standard, ordered by angle.
pub fn extract_peak_ranges(standard: &Pattern, prominence: f64) -> Result<Vec<PeakRange>> {
    if !(prominence > 0.0 && prominence <= 1.0) {
        return Err(Error::Domain(format!("prominence must be in (0, 1], got {prominence}")));
    }
    standard.check_non_negative()?;
    let y = standard.intensity();
    let n = y.len();
    let max = y.iter().fold(0.0_f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let level = prominence * max;
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            y[i] > level && (i == 0 || y[i] >= y[i - 1]) && (i == n - 1 || y[i] > y[i + 1])
        })
        .collect();
    peaks.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));

    let mut spans: Vec<(usize, usize)> = Vec::new();
    for i in peaks {
        if spans.iter().any(|&(lo, hi)| lo <= i && i <= hi) {
            continue;
        }
        let floor = RANGE_FLOOR * y[i];
        let mut l = i;
        while l > 0 && y[l - 1] >= floor {
            l -= 1;
        }
        let mut r = i;
        while r + 1 < n && y[r + 1] >= floor {
            r += 1;
        }
        let half = (i - l).max(r - i);
        let mut lo = i.saturating_sub(half);
        let mut hi = (i + half).min(n - 1);
        for &(a, b) in &spans {
            if b < i {
                lo = lo.max(b + 1);
            }
            if a > i {
                hi = hi.min(a - 1);
            }
        }
        spans.push((lo, hi));
    }
    spans.sort();
    let theta = standard.theta();
    Ok(spans
        .into_iter()
        .map(|(lo, hi)| PeakRange {
            lo: theta[lo],
            hi: theta[hi],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeblurOptions {
    pub iterations: usize,
    pub damping_threshold: f64,
    pub prominence: f64,
}

impl Default for DeblurOptions {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            damping_threshold: 0.0,
            prominence: DEFAULT_PROMINENCE,
        }
    }
}

/// Output of [`deblur_full_pattern`].
#[derive(Debug, Clone)]
pub struct Deblurred {
    pub pattern: Pattern,
    pub ranges: Vec<PeakRange>,
}

fn local_psf<'a>(standard: &'a Pattern, range: &PeakRange) -> &'a [f64] {
    let (lo, hi) = range.indices(standard);
    &standard.intensity()[lo..=hi]
}

/// Deconvolves the whole sample once per standard peak, with that peak as
/// the PSF, and keeps the result only inside the peak's range. Samples
/// outside every range are copied from the input.
pub fn deblur_full_pattern(sample: &Pattern, standard: &Pattern, opts: &DeblurOptions) -> Result<Deblurred> {
    sample.check_same_grid(standard)?;
    if opts.iterations == 0 {
        return Err(Error::Domain("at least one iteration is required".into()));
    }
    sample.check_non_negative()?;
    let ranges = extract_peak_ranges(standard, opts.prominence)?;
    if ranges.is_empty() {
        return Err(Error::Domain(format!(
            "no peaks above {} of the maximum in the standard; check the standard pattern",
            opts.prominence
        )));
    }
    let pieces: Vec<Vec<f64>> = ranges
        .par_iter()
        .map(|r| {
            let op = BlurOperator::new(local_psf(standard, r), sample.len())?;
            run_rl(&op, sample.intensity(), opts.iterations, opts.damping_threshold)
        })
        .collect::<Result<_>>()?;
    let mut out = sample.intensity().to_vec();
    for (r, f) in ranges.iter().zip(&pieces) {
        let (lo, hi) = r.indices(sample);
        out[lo..=hi].copy_from_slice(&f[lo..=hi]);
    }
    Ok(Deblurred {
        pattern: sample.with_intensity(out)?,
        ranges,
    })
}

/// Residue of re-blurring the deblurred pattern and adding back the removed
/// components.
#[derive(Debug, Clone)]
pub struct ReconvolveCheck {
    /// `original − (deblurred ⊗ psf + background + noise)` inside the
    /// ranges, zero outside.
    pub residue: Pattern,
    /// Over the full zero-filled residue.
    pub rms: f64,
    pub max_abs: f64,
    pub in_range_rms: f64,
    /// In-range residue RMS over in-range original RMS.
    pub relative_rms: f64,
    pub in_range_samples: usize,
}

pub fn reconvolve_check(
    deblurred: &Pattern,
    standard: &Pattern,
    background: &Pattern,
    noise: &Pattern,
    original: &Pattern,
    ranges: &[PeakRange],
) -> Result<ReconvolveCheck> {
    for p in [standard, background, noise, original] {
        deblurred.check_same_grid(p)?;
    }
    let n = deblurred.len();
    let mut residue = vec![0.0; n];
    let mut covered = 0usize;
    let (mut res_sq, mut orig_sq) = (0.0, 0.0);
    for r in ranges {
        let op = BlurOperator::new(local_psf(standard, r), n)?;
        let reblurred = op.apply(deblurred.intensity());
        let (lo, hi) = r.indices(deblurred);
        for i in lo..=hi {
            let v = original.intensity()[i]
                - (reblurred[i] + background.intensity()[i] + noise.intensity()[i]);
            residue[i] = v;
            res_sq += v * v;
            orig_sq += original.intensity()[i].powi(2);
        }
        covered += hi - lo + 1;
    }
    let rms = (residue.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let max_abs = residue.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let in_range_rms = if covered > 0 { (res_sq / covered as f64).sqrt() } else { 0.0 };
    let orig_rms = if covered > 0 { (orig_sq / covered as f64).sqrt() } else { 0.0 };
    Ok(ReconvolveCheck {
        residue: deblurred.with_intensity(residue)?,
        rms,
        max_abs,
        in_range_rms,
        relative_rms: if orig_rms > 0.0 { in_range_rms / orig_rms } else { 0.0 },
        in_range_samples: covered,
    })
}

/// Full width at half maximum of the highest sample in `values`, with the
/// half-height crossings located by linear interpolation. In samples.
pub fn fwhm_samples(values: &[f64]) -> Option<f64> {
    let (peak, &h) = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    if h <= 0.0 {
        return None;
    }
    let half = h / 2.0;
    let mut l = peak;
    while l > 0 && values[l - 1] > half {
        l -= 1;
    }
    let mut r = peak;
    while r + 1 < values.len() && values[r + 1] > half {
        r += 1;
    }
    if l == 0 || r + 1 == values.len() {
        return None;
    }
    let left = l as f64 - (values[l] - half) / (values[l] - values[l - 1]);
    let right = r as f64 + (values[r] - half) / (values[r] - values[r + 1]);
    Some(right - left)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(n: usize, center: f64, fwhm: f64, height: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = (i as f64 - center) / fwhm;
                height * (-4.0 * 2f64.ln() * x * x).exp()
            })
            .collect()
    }

    fn pattern(values: Vec<f64>) -> Pattern {
        Pattern::from_grid(10.0, 0.01, values).unwrap()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn rmse(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    // Direct evaluation of the boundary-renormalized blur.
    fn blur_oracle(f: &[f64], k: &[f64], c: usize) -> Vec<f64> {
        let n = f.len() as isize;
        let tap = |i: isize| if i >= 0 && (i as usize) < k.len() { k[i as usize] } else { 0.0 };
        let w: Vec<f64> = (0..n).map(|j| (0..n).map(|i| tap(i - j + c as isize)).sum()).collect();
        (0..n)
            .map(|i| (0..n).map(|j| f[j as usize] * tap(i - j + c as isize) / w[j as usize]).sum())
            .collect()
    }

    #[test]
    fn matches_direct_blur() {
        let k = [0.1, 0.5, 0.3, 0.1];
        let f: Vec<f64> = (0..40).map(|i| ((i * 7919) % 13) as f64).collect();
        let op = BlurOperator::new(&k, f.len()).unwrap();
        assert_eq!(op.center(), 1);
        let want = blur_oracle(&f, &k, 1);
        for (a, b) in op.apply(&f).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity() {
        let k = gaussian(21, 8.3, 4.0, 1.0);
        let n = 60;
        let op = BlurOperator::new(&k, n).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = op.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.apply_adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 3.0;
        let f = pattern(gaussian(64, 30.0, 5.0, 7.0));
        let out = convolve(&f, &pattern(k)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn delta_input_reproduces_kernel() {
        let k = [0.2, 0.5, 0.3];
        let mut f = vec![0.0; 32];
        f[10] = 1.0;
        let out = BlurOperator::new(&k, 32).unwrap().apply(&f);
        // Centroid 1.1 rounds to tap 1.
        for (i, v) in out.iter().enumerate() {
            let want = match i {
                9 => 0.2,
                10 => 0.5,
                11 => 0.3,
                _ => 0.0,
            };
            assert!((v - want).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn flux_is_conserved(f in prop::collection::vec(0.0..100.0f64, 8..200), width in 1.0..20.0f64) {
            let k = gaussian(61, 30.0, width, 1.0);
            let out = BlurOperator::new(&k, f.len()).unwrap().apply(&f);
            let (a, b): (f64, f64) = (out.iter().sum(), f.iter().sum());
            prop_assert!((a - b).abs() <= 1e-9 * b.max(1e-300));
        }
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(BlurOperator::new(&[0.0, 0.0], 10).is_err());
        assert!(BlurOperator::new(&[1.0, -0.1], 10).is_err());
        assert!(convolve(&pattern(vec![1.0; 10]), &Pattern::from_grid(0.0, 0.02, vec![1.0; 10]).unwrap()).is_err());
    }

    fn two_peak_truth(n: usize) -> Vec<f64> {
        add(&gaussian(n, 90.0, 10.0, 50.0), &gaussian(n, 200.0, 12.0, 30.0))
    }

    #[test]
    fn delta_psf_keeps_data() {
        let g = pattern(add(&two_peak_truth(300), &vec![1.0; 300]));
        let mut k = vec![0.0; 8];
        k[3] = 1.0;
        let op = BlurOperator::new(&k, g.len()).unwrap();
        let mut rl = RichardsonLucy::new(&op, g.intensity(), 0.0).unwrap();
        for _ in 0..5 {
            rl.step();
            for (a, b) in rl.estimate().iter().zip(g.intensity()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn improves_on_blurred_input() {
        let n = 300;
        let truth = two_peak_truth(n);
        let psf = pattern(gaussian(41, 20.0, 6.0, 1.0));
        let g = convolve(&pattern(truth.clone()), &psf).unwrap();
        let problem = DeblurProblem::new(g.clone(), psf, 5, 0.0).unwrap();
        let f = richardson_lucy(&problem).unwrap();
        assert!(rmse(f.intensity(), &truth) < rmse(g.intensity(), &truth));
        assert!(f.intensity().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn flux_and_monotone_misfit_each_iteration() {
        let n = 300;
        let psf = gaussian(41, 20.0, 6.0, 1.0);
        let op = BlurOperator::new(&psf, n).unwrap();
        let g = op.apply(&two_peak_truth(n));
        let flux: f64 = g.iter().sum();
        let mut rl = RichardsonLucy::new(&op, &g, 0.0).unwrap();
        let mut last = rl.misfit();
        for _ in 0..5 {
            rl.step();
            let s: f64 = rl.estimate().iter().sum();
            assert!((s - flux).abs() <= 1e-6 * flux);
            let m = rl.misfit();
            assert!(m <= last * (1.0 + 1e-12), "{m} > {last}");
            last = m;
        }
    }

    #[test]
    fn fixed_point() {
        let n = 256;
        let truth: Vec<f64> = add(&two_peak_truth(n), &vec![0.5; n]);
        let psf = gaussian(31, 15.0, 5.0, 1.0);
        let op = BlurOperator::new(&psf, n).unwrap();
        let g = op.apply(&truth);
        let mut rl = RichardsonLucy::new(&op, &g, 0.0).unwrap();
        rl.set_estimate(truth.clone());
        rl.step();
        for (a, b) in rl.estimate().iter().zip(&truth) {
            assert!((a - b).abs() <= 1e-10 * b.max(1.0));
        }
    }

    #[test]
    fn large_threshold_freezes_the_start() {
        let n = 200;
        let psf = gaussian(31, 15.0, 5.0, 1.0);
        let op = BlurOperator::new(&psf, n).unwrap();
        let g = op.apply(&two_peak_truth(n));
        let flux: f64 = g.iter().sum();
        let start = vec![flux / n as f64; n];
        let misfit = op.apply(&start).iter().zip(&g).fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()));
        let mut rl = RichardsonLucy::new(&op, &g, misfit).unwrap();
        for _ in 0..5 {
            rl.step();
        }
        for (a, b) in rl.estimate().iter().zip(&start) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
    }

    #[test]
    fn rejects_bad_data() {
        let op = BlurOperator::new(&[0.5, 0.5], 10).unwrap();
        assert!(RichardsonLucy::new(&op, &[0.0; 10], 0.0).is_err());
        let mut g = vec![1.0; 10];
        g[3] = -1.0;
        assert!(RichardsonLucy::new(&op, &g, 0.0).is_err());
    }

    #[test]
    fn ranges_of_one_and_two_peaks() {
        let one = pattern(gaussian(200, 80.0, 8.0, 10.0));
        let r = extract_peak_ranges(&one, 0.1).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].contains(one.theta()[80]));

        let two = pattern(add(&gaussian(400, 100.0, 8.0, 10.0), &gaussian(400, 280.0, 6.0, 4.0)));
        let r = extract_peak_ranges(&two, 0.1).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].hi < r[1].lo);
        assert!(r[0].contains(two.theta()[100]) && r[1].contains(two.theta()[280]));

        assert!(extract_peak_ranges(&pattern(vec![0.0; 50]), 0.1).unwrap().is_empty());
    }

    #[test]
    fn neighboring_ranges_are_clipped() {
        // Overlapping tails: the second range must stop short of the first.
        let p = pattern(add(&gaussian(300, 100.0, 20.0, 10.0), &gaussian(300, 150.0, 8.0, 5.0)));
        let r = extract_peak_ranges(&p, 0.05).unwrap();
        assert!(r.windows(2).all(|w| w[0].hi < w[1].lo));
    }

    #[test]
    fn self_deconvolution_sharpens() {
        let n = 500;
        let std = pattern(add(&gaussian(n, 120.0, 10.0, 40.0), &gaussian(n, 350.0, 12.0, 25.0)));
        let out = deblur_full_pattern(&std, &std, &DeblurOptions::default()).unwrap();
        assert_eq!(out.ranges.len(), 2);
        for r in &out.ranges {
            let (lo, hi) = r.indices(&std);
            let before = fwhm_samples(&std.intensity()[lo..=hi]).unwrap();
            let after = fwhm_samples(&out.pattern.intensity()[lo..=hi]).unwrap_or(0.0);
            assert!(after < before, "{after} vs {before}");
        }
    }

    #[test]
    fn forward_model_per_range_error_drops_and_outside_is_copied() {
        let n = 600;
        let truth = add(&gaussian(n, 150.0, 10.0, 40.0), &gaussian(n, 420.0, 11.0, 30.0));
        let standard = pattern(add(&gaussian(n, 150.0, 6.0, 10.0), &gaussian(n, 420.0, 6.0, 10.0)));
        // Both standard peaks share one shape, so one kernel blurs everything.
        let g = BlurOperator::new(&gaussian(41, 20.0, 6.0, 1.0), n).unwrap().apply(&truth);
        let sample = pattern(add(&g, &vec![0.2; n]));
        let out = deblur_full_pattern(&sample, &standard, &DeblurOptions::default()).unwrap();
        for r in &out.ranges {
            let (lo, hi) = r.indices(&sample);
            let t: Vec<f64> = truth[lo..=hi].iter().map(|v| v + 0.2).collect();
            let (a, b) = (rmse(&out.pattern.intensity()[lo..=hi], &t), rmse(&sample.intensity()[lo..=hi], &t));
            assert!(a < b, "range {r:?}: {a} vs {b}");
        }
        for (i, t) in sample.theta().iter().enumerate() {
            if !out.ranges.iter().any(|r| r.contains(*t)) {
                assert_eq!(out.pattern.intensity()[i], sample.intensity()[i]);
            }
        }
    }

    #[test]
    fn empty_standard_is_an_error() {
        let s = pattern(vec![1.0; 50]);
        let flat = pattern(vec![0.0; 50]);
        assert!(deblur_full_pattern(&s, &flat, &DeblurOptions::default()).is_err());
    }

    #[test]
    fn residue_identities() {
        let n = 200;
        let zeros = pattern(vec![0.0; n]);
        let mut k = vec![0.0; n];
        k[100] = 1.0;
        let delta = pattern(k);
        let orig = pattern(gaussian(n, 100.0, 9.0, 20.0));
        let ranges = extract_peak_ranges(&delta, 0.05).unwrap();
        let check = reconvolve_check(&orig, &delta, &zeros, &zeros, &orig, &ranges).unwrap();
        assert!(check.max_abs <= 1e-9);

        let bg = pattern(vec![2.0; n]);
        let noise = pattern((0..n).map(|i| 0.1 * (i as f64).sin()).collect());
        let std = pattern(gaussian(n, 100.0, 6.0, 1.0));
        let ranges = extract_peak_ranges(&std, 0.05).unwrap();
        let check = reconvolve_check(&zeros, &std, &bg, &noise, &orig, &ranges).unwrap();
        let (lo, hi) = ranges[0].indices(&orig);
        for i in 0..n {
            let want = if (lo..=hi).contains(&i) {
                orig.intensity()[i] - 2.0 - noise.intensity()[i]
            } else {
                0.0
            };
            assert!((check.residue.intensity()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fwhm_of_sampled_gaussian() {
        let g = gaussian(201, 100.0, 20.0, 1.0);
        assert!((fwhm_samples(&g).unwrap() - 20.0).abs() < 0.1);
        assert!(fwhm_samples(&[0.0; 5]).is_none());
    }
}
