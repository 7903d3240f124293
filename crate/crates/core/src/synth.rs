//! Synthetic patterns with known ground truth, and brute-force oracles.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hlsvd::{reconstruct, SinusoidComponent, SinusoidModel};
use crate::pattern::{Pattern, Stage, StageRecord, MIN_LEN};

/// Largest signal accepted by [`dense_hankel_svd`].
pub const DENSE_SVD_CAP: usize = 512;

/// `4 ln 2`: converts FWHM to the Gaussian exponent.
const FWHM_K: f64 = 2.772_588_722_239_781;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPeak {
    pub center: f64,
    pub height: f64,
    pub fwhm: f64,
}

impl GaussianPeak {
    pub fn eval(&self, theta: f64) -> f64 {
        let x = (theta - self.center) / self.fwhm;
        self.height * (-FWHM_K * x * x).exp()
    }

    /// The peak after convolution with a unit-area Gaussian of width `fwhm`.
    pub fn broadened(&self, fwhm: f64) -> Self {
        let w = self.fwhm.hypot(fwhm);
        Self {
            center: self.center,
            height: self.height * self.fwhm / w,
            fwhm: w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Counts drawn with rate equal to the clean intensity; `noise_sigma` is
    /// ignored.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub theta0: f64,
    pub step: f64,
    #[serde(default)]
    pub peaks: Vec<GaussianPeak>,
    #[serde(default)]
    pub sinusoids: Vec<SinusoidComponent>,
    /// Polynomial coefficients in θ, constant term first.
    #[serde(default)]
    pub background: Vec<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub seed: u64,
    /// When set, the peaks are broadened by a Gaussian instrument of this
    /// FWHM and a matching standard pattern is produced.
    #[serde(default)]
    pub instrument_fwhm: Option<f64>,
}

impl SynthSpec {
    pub fn new(n: usize, theta0: f64, step: f64) -> Self {
        Self {
            n,
            theta0,
            step,
            peaks: Vec::new(),
            sinusoids: Vec::new(),
            background: Vec::new(),
            noise_sigma: 0.0,
            noise: NoiseKind::Gaussian,
            seed: 0,
            instrument_fwhm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_LEN {
            return Err(Error::Size(format!("n must be at least {MIN_LEN}, got {}", self.n)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || !self.theta0.is_finite() {
            return Err(Error::Grid(format!("bad grid: theta0 {} step {}", self.theta0, self.step)));
        }
        if let Some(p) = self.peaks.iter().find(|p| !(p.fwhm > 0.0) || !p.height.is_finite()) {
            return Err(Error::Domain(format!("invalid peak {p:?}")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Domain(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        if let Some(w) = self.instrument_fwhm {
            if !(w > 0.0) {
                return Err(Error::Domain(format!("instrument_fwhm must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn theta(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.theta0 + i as f64 * self.step).collect()
    }

    fn observed_peaks(&self) -> Vec<GaussianPeak> {
        match self.instrument_fwhm {
            Some(w) => self.peaks.iter().map(|p| p.broadened(w)).collect(),
            None => self.peaks.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub pattern: Pattern,
    /// Clean references: `denoised` (no noise), `background`,
    /// `background_free` (observed peaks), `deblurred` (unbroadened peaks).
    pub truth: Vec<StageRecord>,
    /// Instrument-only pattern, when the spec has an instrument width.
    pub standard: Option<Pattern>,
}

impl SynthOutput {
    pub fn truth_for(&self, stage: Stage) -> Option<&Pattern> {
        self.truth.iter().find(|r| r.stage == stage).map(|r| &r.pattern)
    }
}

fn eval_peaks(peaks: &[GaussianPeak], theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&t| peaks.iter().map(|p| p.eval(t)).sum())
        .collect()
}

fn eval_poly(coeffs: &[f64], theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&t| coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c))
        .collect()
}

/// Peaks + sinusoids + background + noise, with every clean component kept.
pub fn synth_pattern(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let theta = spec.theta();
    let observed = eval_peaks(&spec.observed_peaks(), &theta);
    let sinusoids = reconstruct(
        &SinusoidModel::new(spec.sinusoids.clone(), spec.theta0, spec.step),
        &theta,
    );
    let signal: Vec<f64> = observed.iter().zip(&sinusoids).map(|(a, b)| a + b).collect();
    let intrinsic: Vec<f64> = if spec.instrument_fwhm.is_some() {
        let peaks = eval_peaks(&spec.peaks, &theta);
        peaks.iter().zip(&sinusoids).map(|(a, b)| a + b).collect()
    } else {
        signal.clone()
    };
    let background = eval_poly(&spec.background, &theta);
    let clean: Vec<f64> = signal.iter().zip(&background).map(|(a, b)| a + b).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noisy: Vec<f64> = match spec.noise {
        NoiseKind::Gaussian if spec.noise_sigma > 0.0 => {
            let dist = Normal::new(0.0, spec.noise_sigma)
                .map_err(|e| Error::Domain(format!("noise: {e}")))?;
            clean.iter().map(|v| v + dist.sample(&mut rng)).collect()
        }
        NoiseKind::Gaussian => clean.clone(),
        NoiseKind::Poisson => clean
            .iter()
            .map(|&v| {
                if v <= 0.0 {
                    Ok(0.0)
                } else {
                    Poisson::new(v)
                        .map(|d| d.sample(&mut rng))
                        .map_err(|e| Error::Domain(format!("poisson rate {v}: {e}")))
                }
            })
            .collect::<Result<_>>()?,
    };

    let grid = |values: Vec<f64>| Pattern::from_grid(spec.theta0, spec.step, values);
    let pattern = grid(noisy)?;
    let truth = vec![
        StageRecord::new(Stage::Raw, pattern.clone()),
        StageRecord::new(Stage::Denoised, grid(clean)?),
        StageRecord::new(Stage::Background, grid(background)?),
        StageRecord::new(Stage::BackgroundFree, grid(signal)?),
        StageRecord::new(Stage::Deblurred, grid(intrinsic)?),
    ];
    let standard = match spec.instrument_fwhm {
        Some(w) => {
            let peaks: Vec<GaussianPeak> = spec
                .peaks
                .iter()
                .map(|p| GaussianPeak {
                    center: p.center,
                    height: p.height * p.fwhm / w,
                    fwhm: w,
                })
                .collect();
            Some(grid(eval_peaks(&peaks, &theta))?)
        }
        None => None,
    };
    Ok(SynthOutput {
        pattern,
        truth,
        standard,
    })
}

/// Full SVD of the explicit Hankel matrix.
#[derive(Debug, Clone)]
pub struct DenseSvd {
    pub u: DMatrix<Complex64>,
    /// Non-increasing.
    pub values: Vec<f64>,
    pub v: DMatrix<Complex64>,
}

/// Dense SVD of `H[m][l] = s[m + l]` with the same split as the fast operator.
pub fn dense_hankel_svd(signal: &[Complex64]) -> Result<DenseSvd> {
    let n = signal.len();
    if n > DENSE_SVD_CAP {
        return Err(Error::Domain(format!(
            "dense Hankel SVD is capped at {DENSE_SVD_CAP} samples, got {n}"
        )));
    }
    if n < 2 {
        return Err(Error::Size(format!("need at least 2 samples, got {n}")));
    }
    let rows = (n + 2) / 2;
    let cols = n + 1 - rows;
    let h = DMatrix::from_fn(rows, cols, |m, l| signal[m + l]);
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").adjoint();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Ok(DenseSvd {
        u: DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]),
        values: order.iter().map(|&i| svd.singular_values[i]).collect(),
        v: DMatrix::from_fn(v.nrows(), order.len(), |i, j| v[(i, order[j])]),
    })
}

/// Piecewise-linear background through the pattern's values at `anchors`,
/// held constant beyond the outer anchors.
pub fn interp_background(pattern: &Pattern, anchors: &[f64]) -> Result<Pattern> {
    if anchors.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 anchors, got {}", anchors.len())));
    }
    let theta = pattern.theta();
    let (lo, hi) = (theta[0], theta[theta.len() - 1]);
    if anchors.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("anchors must be strictly increasing".into()));
    }
    if anchors[0] < lo || anchors[anchors.len() - 1] > hi {
        return Err(Error::Domain(format!("anchors must lie within [{lo}, {hi}]")));
    }
    let values: Vec<f64> = anchors.iter().map(|&a| sample_at(pattern, a)).collect();
    let bg = theta
        .iter()
        .map(|&t| {
            if t <= anchors[0] {
                return values[0];
            }
            if t >= anchors[anchors.len() - 1] {
                return values[values.len() - 1];
            }
            let j = anchors.partition_point(|&a| a <= t) - 1;
            let w = (t - anchors[j]) / (anchors[j + 1] - anchors[j]);
            values[j] + w * (values[j + 1] - values[j])
        })
        .collect();
    pattern.with_intensity(bg)
}

fn sample_at(pattern: &Pattern, angle: f64) -> f64 {
    let y = pattern.intensity();
    let x = (angle - pattern.theta0()) / pattern.step();
    let i = (x.floor().max(0.0) as usize).min(y.len() - 2);
    let w = (x - i as f64).clamp(0.0, 1.0);
    y[i] + w * (y[i + 1] - y[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_peak() -> SynthSpec {
        let mut s = SynthSpec::new(512, 20.0, 0.02);
        s.peaks.push(GaussianPeak {
            center: 25.0,
            height: 100.0,
            fwhm: 0.2,
        });
        s
    }

    #[test]
    fn noiseless_peak_is_analytic() {
        let out = synth_pattern(&one_peak()).unwrap();
        for (t, v) in out.pattern.theta().iter().zip(out.pattern.intensity()) {
            let x = (t - 25.0) / 0.2;
            let want = 100.0 * (-4.0 * 2f64.ln() * x * x).exp();
            assert!((v - want).abs() <= 1e-12 * 100.0);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut s = one_peak();
        s.noise_sigma = 2.0;
        s.seed = 99;
        let a = synth_pattern(&s).unwrap();
        let b = synth_pattern(&s).unwrap();
        assert_eq!(a.pattern, b.pattern);
        s.seed = 100;
        assert_ne!(synth_pattern(&s).unwrap().pattern, a.pattern);
    }

    #[test]
    fn noise_level_matches_sigma() {
        for seed in 0..20 {
            let mut s = one_peak();
            s.n = 4096;
            s.noise_sigma = 3.0;
            s.seed = seed;
            let out = synth_pattern(&s).unwrap();
            let clean = out.truth_for(Stage::Denoised).unwrap();
            let d: Vec<f64> = out
                .pattern
                .intensity()
                .iter()
                .zip(clean.intensity())
                .map(|(a, b)| a - b)
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            assert!((sd - 3.0).abs() <= 0.3, "seed {seed}: {sd}");
        }
    }

    #[test]
    fn poisson_counts_are_integers() {
        let mut s = one_peak();
        s.background = vec![50.0];
        s.noise = NoiseKind::Poisson;
        let out = synth_pattern(&s).unwrap();
        assert!(out.pattern.intensity().iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
    }

    #[test]
    fn instrument_broadening_keeps_area() {
        let mut s = one_peak();
        s.instrument_fwhm = Some(0.15);
        let out = synth_pattern(&s).unwrap();
        let area = |p: &Pattern| p.sum() * p.step();
        let blurred = out.truth_for(Stage::BackgroundFree).unwrap();
        let sharp = out.truth_for(Stage::Deblurred).unwrap();
        let standard = out.standard.as_ref().unwrap();
        assert!((area(blurred) - area(sharp)).abs() <= 1e-9 * area(sharp));
        assert!((area(standard) - area(sharp)).abs() <= 1e-9 * area(sharp));
    }

    #[test]
    fn components_add_up() {
        let mut s = one_peak();
        s.background = vec![5.0, 0.1, -0.001];
        s.noise_sigma = 1.0;
        let out = synth_pattern(&s).unwrap();
        let bg = out.truth_for(Stage::Background).unwrap();
        let sig = out.truth_for(Stage::BackgroundFree).unwrap();
        let clean = out.truth_for(Stage::Denoised).unwrap();
        for i in 0..s.n {
            let t = bg.theta()[i];
            assert!((bg.intensity()[i] - (5.0 + 0.1 * t - 0.001 * t * t)).abs() < 1e-12);
            assert!((clean.intensity()[i] - bg.intensity()[i] - sig.intensity()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = one_peak();
        s.peaks[0].fwhm = 0.0;
        assert!(synth_pattern(&s).is_err());
        assert!(synth_pattern(&SynthSpec::new(4, 0.0, 1.0)).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let mut s = one_peak();
        s.instrument_fwhm = Some(0.1);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&text).unwrap(), s);
        let minimal: SynthSpec = serde_json::from_str(r#"{"n": 64, "theta0": 0, "step": 0.1}"#).unwrap();
        assert_eq!(minimal, SynthSpec::new(64, 0.0, 0.1));
    }

    fn real(xs: &[f64]) -> Vec<Complex64> {
        xs.iter().map(|&x| Complex64::new(x, 0.0)).collect()
    }

    #[test]
    fn three_sample_svd() {
        let svd = dense_hankel_svd(&real(&[1.0, 2.0, 3.0])).unwrap();
        // [[1,2],[2,3]] is symmetric with eigenvalues 2 ± √5.
        let (a, b) = (2.0 + 5f64.sqrt(), (2.0 - 5f64.sqrt()).abs());
        assert!((svd.values[0] - a).abs() < 1e-12);
        assert!((svd.values[1] - b).abs() < 1e-12);
        assert!((svd.values[0] * svd.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_and_orthogonality() {
        let z = Complex64::new(-0.01, 0.3).exp();
        let s: Vec<Complex64> = (0..100).map(|k| z.powu(k)).collect();
        let svd = dense_hankel_svd(&s).unwrap();
        assert!(svd.values[1] <= 1e-12 * svd.values[0]);
        for m in [&svd.u, &svd.v] {
            let g = m.adjoint() * m;
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let t = if i == j { 1.0 } else { 0.0 };
                    assert!((g[(i, j)] - Complex64::new(t, 0.0)).norm() < 1e-10);
                }
            }
        }
        assert!(matches!(dense_hankel_svd(&vec![Complex64::new(1.0, 0.0); 600]), Err(Error::Domain(_))));
    }

    #[test]
    fn interpolation_cases() {
        let p = Pattern::from_grid(0.0, 0.5, (0..40).map(|i| 3.0 + 0.25 * i as f64).collect()).unwrap();
        let bg = interp_background(&p, &[2.0, 15.0]).unwrap();
        for (t, v) in p.theta().iter().zip(bg.intensity()) {
            let want = 3.0 + 0.5 * t.clamp(2.0, 15.0);
            assert!((v - want).abs() < 1e-12);
        }
        let every = interp_background(&p, p.theta()).unwrap();
        for (a, b) in every.intensity().iter().zip(p.intensity()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(interp_background(&p, &[1.0]).is_err());
        assert!(interp_background(&p, &[5.0, 1.0]).is_err());
        assert!(interp_background(&p, &[-1.0, 1.0]).is_err());
    }

    #[test]
    fn interpolation_recovers_linear_background() {
        let mut s = SynthSpec::new(1024, 10.0, 0.05);
        s.background = vec![40.0, 0.8];
        s.peaks.push(GaussianPeak {
            center: 35.0,
            height: 200.0,
            fwhm: 0.5,
        });
        let out = synth_pattern(&s).unwrap();
        let bg = interp_background(&out.pattern, &[12.0, 30.0, 40.0, 60.0]).unwrap();
        let truth = out.truth_for(Stage::Background).unwrap();
        let mean_rel: f64 = bg
            .intensity()
            .iter()
            .zip(truth.intensity())
            .map(|(a, b)| ((a - b) / b).abs())
            .sum::<f64>()
            / s.n as f64;
        assert!(mean_rel <= 0.01, "{mean_rel}");
    }
}
