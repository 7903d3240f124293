use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{pole_to_mode, sort_components, PartialSVD, SinusoidComponent, SinusoidModel};
use crate::error::{Error, Result};
use crate::pattern::Pattern;

/// Shift-equation systems worse conditioned than this are rejected.
const SHIFT_COND_LIMIT: f64 = 1e12;
/// Amplitude design matrices worse conditioned than this only warn.
const DESIGN_COND_WARN: f64 = 1e8;
const DESIGN_RANK_TOL: f64 = 1e-12;

/// One pole of the signal subspace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// cycles/degree
    pub frequency: f64,
    /// 1/degree
    pub damping: f64,
    pub pole: Complex64,
    /// `|z| > 1`
    pub growing: bool,
}

impl Mode {
    pub fn new(frequency: f64, damping: f64, step: f64) -> Self {
        let pole = Complex64::new(-damping * step, 2.0 * PI * frequency * step).exp();
        Self {
            frequency,
            damping,
            pole,
            growing: damping < 0.0,
        }
    }

    pub fn from_pole(pole: Complex64, step: f64) -> Self {
        let (frequency, damping) = pole_to_mode(pole, step);
        Self {
            frequency,
            damping,
            pole,
            growing: pole.norm() > 1.0,
        }
    }
}

/// Poles from the shift invariance of the leading `k` right singular vectors:
/// `V_bottom ≈ V_top X`, with the poles the conjugated eigenvalues of `X`.
pub fn estimate_modes(svd: &PartialSVD, k: usize, step: f64) -> Result<Vec<Mode>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    if k == 0 || k > svd.rank_used() {
        return Err(Error::Domain(format!(
            "K = {k} but only {} singular triplets are available",
            svd.rank_used()
        )));
    }
    let v = svd.v.columns(0, k);
    let m = v.nrows();
    if m < k + 1 {
        return Err(Error::Domain(format!(
            "K = {k} needs at least {} rows in V, have {m}",
            k + 1
        )));
    }
    let top = v.rows(0, m - 1).into_owned();
    let bottom = v.rows(1, m - 1).into_owned();
    let lsq = top.svd(true, true);
    let smax = lsq.singular_values.max();
    let smin = lsq.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > SHIFT_COND_LIMIT {
        return Err(Error::Numerical(format!(
            "shift equation is singular (condition {cond:.3e})"
        )));
    }
    let x = lsq
        .solve(&bottom, 0.0)
        .map_err(|e| Error::Numerical(format!("shift equation: {e}")))?;
    let eig = eigenvalues(&x)?;
    Ok(eig
        .into_iter()
        .map(|e| Mode::from_pole(e.conj(), step))
        .collect())
}

fn eigenvalues(x: &DMatrix<Complex64>) -> Result<Vec<Complex64>> {
    let scale = x.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let imag = x.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if imag <= 1e-12 * scale {
        let real = x.map(|c| c.re);
        let schur = nalgebra::linalg::Schur::try_new(real, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numerical("real Schur decomposition did not converge".into()))?;
        return Ok(schur.complex_eigenvalues().iter().copied().collect());
    }
    let schur = nalgebra::linalg::Schur::try_new(x.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("complex Schur decomposition did not converge".into()))?;
    let (_, t) = schur.unpack();
    let n = t.nrows();
    let tnorm = t.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].norm() > f64::EPSILON * tnorm {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let half_tr = (a + d) * 0.5;
            let disc = ((a - d) * 0.5 * ((a - d) * 0.5) + b * c).sqrt();
            out.push(half_tr + disc);
            out.push(half_tr - disc);
            i += 2;
        } else {
            out.push(t[(i, i)]);
            i += 1;
        }
    }
    Ok(out)
}

/// Output of [`fit_amplitudes`].
#[derive(Debug, Clone)]
pub struct AmplitudeFit {
    pub model: SinusoidModel,
    pub residual_norm: f64,
    /// Condition number of the column-normalized design matrix.
    pub condition: f64,
}

/// Linear least squares for amplitudes and phases with the poles held fixed.
///
/// Each mode contributes the columns `e^{−dθ}cos(2πfθ)` and `−e^{−dθ}sin(2πfθ)`;
/// their coefficients `(p, q)` give `a = hypot(p, q)` and `φ = atan2(q, p)`.
pub fn fit_amplitudes(pattern: &Pattern, modes: &[Mode]) -> Result<AmplitudeFit> {
    if modes.is_empty() {
        return Err(Error::Domain("no modes to fit".into()));
    }
    let theta = pattern.theta();
    let n = theta.len();
    // (mode index, is sine column)
    let mut columns: Vec<(usize, bool)> = Vec::with_capacity(2 * modes.len());
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(2 * modes.len());
    for (j, m) in modes.iter().enumerate() {
        let env: Vec<f64> = theta.iter().map(|t| (-m.damping * t).exp()).collect();
        let cos: Vec<f64> = theta
            .iter()
            .zip(&env)
            .map(|(t, e)| e * (2.0 * PI * m.frequency * t).cos())
            .collect();
        let sin: Vec<f64> = theta
            .iter()
            .zip(&env)
            .map(|(t, e)| -e * (2.0 * PI * m.frequency * t).sin())
            .collect();
        let cn = l2(&cos);
        let sn = l2(&sin);
        if !cn.is_finite() || !sn.is_finite() {
            return Err(Error::Numerical(format!(
                "mode {j} (f = {}, d = {}) overflows on this grid",
                m.frequency, m.damping
            )));
        }
        if cn > 0.0 {
            columns.push((j, false));
            data.push(cos);
        }
        if sn > 1e-10 * cn {
            columns.push((j, true));
            data.push(sin);
        }
    }
    if columns.len() > n {
        return Err(Error::Numerical(format!(
            "{} basis functions exceed {n} samples",
            columns.len()
        )));
    }
    let norms: Vec<f64> = data.iter().map(|c| l2(c)).collect();
    let a = DMatrix::from_fn(n, columns.len(), |i, c| data[c][i] / norms[c]);
    let b = DVector::from_column_slice(pattern.intensity());
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if smin <= DESIGN_RANK_TOL * smax {
        let vt = svd.v_t.as_ref().expect("requested");
        let null = vt.row(vt.nrows() - 1);
        let mut weight = vec![0.0; modes.len()];
        for (c, &(j, _)) in columns.iter().enumerate() {
            weight[j] += null[c].abs();
        }
        let mut order: Vec<usize> = (0..modes.len()).collect();
        order.sort_by(|&x, &y| weight[y].total_cmp(&weight[x]));
        let (i, j) = (order[0], *order.get(1).unwrap_or(&order[0]));
        return Err(Error::Numerical(format!(
            "design matrix is rank deficient (condition {condition:.3e}): modes {i} (f = {}, d = {}) and {j} (f = {}, d = {}) collide",
            modes[i].frequency, modes[i].damping, modes[j].frequency, modes[j].damping
        )));
    }
    if condition > DESIGN_COND_WARN {
        warn!("amplitude design matrix is ill conditioned ({condition:.3e})");
    }
    let coef = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Numerical(format!("amplitude solve: {e}")))?;
    let residual_norm = (&a * &coef - &b).norm();

    let mut pq = vec![(0.0, 0.0); modes.len()];
    for (c, &(j, is_sin)) in columns.iter().enumerate() {
        let v = coef[c] / norms[c];
        if is_sin {
            pq[j].1 = v;
        } else {
            pq[j].0 = v;
        }
    }
    let mut components: Vec<SinusoidComponent> = modes
        .iter()
        .zip(&pq)
        .map(|(m, &(p, q))| SinusoidComponent {
            amplitude: p.hypot(q),
            damping: m.damping,
            frequency: m.frequency,
            phase: wrap_phase(q.atan2(p)),
            growing: m.growing,
        })
        .collect();
    sort_components(&mut components);
    Ok(AmplitudeFit {
        model: SinusoidModel {
            components,
            theta0: pattern.theta0(),
            step: pattern.step(),
        },
        residual_norm,
        condition,
    })
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Maps to `(−π, π]`.
fn wrap_phase(phi: f64) -> f64 {
    if phi <= -PI {
        phi + 2.0 * PI
    } else {
        phi
    }
}

/// `Σ a_k exp(−d_k θ) cos(2π f_k θ + φ_k)` at each angle.
pub fn reconstruct(model: &SinusoidModel, theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&t| {
            model
                .components
                .iter()
                .map(|c| c.amplitude * (-c.damping * t).exp() * (2.0 * PI * c.frequency * t + c.phase).cos())
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hlsvd::{
        analytic_signal, hankel_operator, hlsvd_fit, lanczos_bidiag, Bridge, HlsvdOptions,
        OrderSelection,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn model(components: &[(f64, f64, f64, f64)], theta0: f64, step: f64) -> SinusoidModel {
        SinusoidModel::new(
            components
                .iter()
                .map(|&(amplitude, damping, frequency, phase)| SinusoidComponent {
                    amplitude,
                    damping,
                    frequency,
                    phase,
                    growing: false,
                })
                .collect(),
            theta0,
            step,
        )
    }

    fn pattern_of(m: &SinusoidModel, n: usize) -> Pattern {
        Pattern::from_grid(m.theta0, m.step, m.evaluate(n)).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    fn svd_of(signal: &[Complex64], rank: usize) -> PartialSVD {
        let op = hankel_operator(signal).unwrap();
        lanczos_bidiag(&op, rank, f64::EPSILON.sqrt()).unwrap()
    }

    // Three damped cosines, away from DC and Nyquist, on a 0.02° grid.
    fn three_peaks() -> SinusoidModel {
        model(
            &[
                (1.0, 0.05, 1.3, 0.4),
                (0.6, 0.12, 3.7, -1.1),
                (0.35, 0.02, 7.9, 2.5),
            ],
            10.0,
            0.02,
        )
    }

    #[test]
    fn single_exponential_pole() {
        let (d, f, dt) = (0.3, 2.1, 0.01);
        let s: Vec<Complex64> = (0..128)
            .map(|n| Complex64::new(-d * dt, 2.0 * PI * f * dt).scale(n as f64).exp())
            .collect();
        let modes = estimate_modes(&svd_of(&s, 1), 1, dt).unwrap();
        assert_eq!(modes.len(), 1);
        assert!(rel(modes[0].frequency, f) <= 1e-8);
        assert!(rel(modes[0].damping, d) <= 1e-8);
        assert!(!modes[0].growing);
    }

    #[test]
    fn growing_mode_is_flagged() {
        let (d, f, dt) = (-0.2, 1.0, 0.05);
        let s: Vec<Complex64> = (0..64)
            .map(|n| Complex64::new(-d * dt, 2.0 * PI * f * dt).scale(n as f64).exp())
            .collect();
        let modes = estimate_modes(&svd_of(&s, 1), 1, dt).unwrap();
        assert!(modes[0].growing);
        assert!(rel(modes[0].damping, d) <= 1e-8);
    }

    #[test]
    fn constant_signal_is_unit_pole() {
        let s = vec![Complex64::new(2.5, 0.0); 32];
        let modes = estimate_modes(&svd_of(&s, 1), 1, 0.1).unwrap();
        assert!(modes[0].frequency.abs() <= 1e-12);
        assert!(modes[0].damping.abs() <= 1e-12);
    }

    #[test]
    fn undamped_cosine_through_analytic_signal() {
        let (n, dt) = (512usize, 0.02);
        let f = 20.0 / (n as f64 * dt);
        let m = model(&[(1.0, 0.0, f, 0.0)], 0.0, dt);
        let p = pattern_of(&m, n);
        let modes = estimate_modes(&svd_of(&analytic_signal(&p), 1), 1, dt).unwrap();
        assert_eq!(modes.len(), 1);
        assert!(modes[0].damping.abs() <= 1e-4);
        assert!(rel(modes[0].frequency, f) <= 1e-6);
    }

    #[test]
    fn too_many_modes_is_domain_error() {
        let s = vec![Complex64::new(1.0, 0.0); 32];
        let svd = svd_of(&s, 2);
        assert!(matches!(estimate_modes(&svd, 5, 0.1), Err(Error::Domain(_))));
        assert!(matches!(estimate_modes(&svd, 1, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn amplitudes_from_exact_modes() {
        let m = model(&[(2.0, 0.1, 0.8, 0.7), (0.5, -0.02, 2.4, -2.9)], 5.0, 0.05);
        let p = pattern_of(&m, 200);
        let modes: Vec<Mode> = m
            .components
            .iter()
            .map(|c| Mode::new(c.frequency, c.damping, p.step()))
            .collect();
        let fit = fit_amplitudes(&p, &modes).unwrap();
        let norm = l2(p.intensity());
        assert!(fit.residual_norm <= 1e-10 * norm);
        for (got, want) in fit.model.components.iter().zip(&m.components) {
            assert!((got.amplitude - want.amplitude).abs() <= 1e-8);
            assert!((got.phase - want.phase).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_pattern_has_zero_amplitudes() {
        let p = Pattern::from_grid(0.0, 0.1, vec![0.0; 64]).unwrap();
        let modes = [Mode::new(0.5, 0.1, 0.1), Mode::new(1.7, 0.0, 0.1)];
        let fit = fit_amplitudes(&p, &modes).unwrap();
        assert!(fit.model.components.iter().all(|c| c.amplitude == 0.0));
    }

    #[test]
    fn spurious_mode_gets_no_amplitude() {
        let m = model(&[(1.5, 0.05, 1.1, 0.3)], 2.0, 0.05);
        let p = pattern_of(&m, 160);
        let modes = [Mode::new(1.1, 0.05, p.step()), Mode::new(3.3, 0.2, p.step())];
        let fit = fit_amplitudes(&p, &modes).unwrap();
        let spurious = fit
            .model
            .components
            .iter()
            .find(|c| (c.frequency - 3.3).abs() < 1e-12)
            .unwrap();
        assert!(spurious.amplitude <= 1e-8 * 1.5);
    }

    #[test]
    fn duplicate_modes_are_named() {
        let p = pattern_of(&model(&[(1.0, 0.0, 1.0, 0.0)], 0.0, 0.05), 100);
        let modes = [Mode::new(0.4, 0.0, 0.05), Mode::new(1.0, 0.1, 0.05), Mode::new(1.0, 0.1, 0.05)];
        match fit_amplitudes(&p, &modes) {
            Err(Error::Numerical(msg)) => {
                assert!(msg.contains("modes 1") || msg.contains("modes 2"), "{msg}");
                assert!(msg.contains("and 1") || msg.contains("and 2"), "{msg}");
            }
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn phase_is_wrapped() {
        assert_eq!(wrap_phase(-PI), PI);
        assert_eq!(wrap_phase(PI), PI);
        assert_eq!(wrap_phase(0.5), 0.5);
    }

    #[test]
    fn reconstruct_trivial_models() {
        let theta: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        assert!(reconstruct(&model(&[], 0.0, 0.3), &theta).iter().all(|&v| v == 0.0));
        assert!(reconstruct(&model(&[(1.0, 0.0, 0.0, 0.0)], 0.0, 0.3), &theta)
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn noiseless_three_components_recovered() {
        let truth = three_peaks();
        let p = pattern_of(&truth, 512);
        let opts = HlsvdOptions {
            order: OrderSelection::Fixed(3),
            ..HlsvdOptions::default()
        };
        let fit = hlsvd_fit(&p, &opts).unwrap();
        assert_eq!(fit.model.len(), 3);
        for (got, want) in fit.model.components.iter().zip(&truth.components) {
            assert!(rel(got.amplitude, want.amplitude) <= 1e-6, "{got:?} vs {want:?}");
            assert!(rel(got.damping, want.damping) <= 1e-6, "{got:?} vs {want:?}");
            assert!(rel(got.frequency, want.frequency) <= 1e-6, "{got:?} vs {want:?}");
            assert!(rel(got.phase, want.phase) <= 1e-6, "{got:?} vs {want:?}");
        }
        assert!(fit.relative_residual <= 1e-8);
        let recon = fit.model.evaluate(p.len());
        let err = l2(&recon.iter().zip(p.intensity()).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(err <= fit.residual_norm * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn auto_order_selects_three() {
        let p = pattern_of(&three_peaks(), 512);
        let fit = hlsvd_fit(&p, &HlsvdOptions::default()).unwrap();
        assert_eq!(fit.order.poles, 6);
        assert_eq!(fit.model.len(), 3);
    }

    #[test]
    fn noisy_frequencies_over_seeds() {
        let truth = three_peaks();
        let clean = truth.evaluate(1024);
        let peak = clean.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        let noise = Normal::new(0.0, 0.01 * peak).unwrap();
        let opts = HlsvdOptions {
            order: OrderSelection::Fixed(3),
            ..HlsvdOptions::default()
        };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
            let p = Pattern::from_grid(truth.theta0, truth.step, noisy).unwrap();
            let fit = hlsvd_fit(&p, &opts).unwrap();
            for (got, want) in fit.model.components.iter().zip(&truth.components) {
                assert!(
                    rel(got.frequency, want.frequency) <= 1e-3,
                    "seed {seed}: {} vs {}",
                    got.frequency,
                    want.frequency
                );
            }
        }
    }

    #[test]
    fn scaling_the_pattern_scales_amplitudes() {
        let p = pattern_of(&three_peaks(), 256);
        let opts = HlsvdOptions {
            order: OrderSelection::Fixed(3),
            ..HlsvdOptions::default()
        };
        let a = hlsvd_fit(&p, &opts).unwrap();
        let scaled = p.with_intensity(p.intensity().iter().map(|v| v * 1e3).collect()).unwrap();
        let b = hlsvd_fit(&scaled, &opts).unwrap();
        for (x, y) in a.model.components.iter().zip(&b.model.components) {
            assert!(rel(y.amplitude, 1e3 * x.amplitude) <= 1e-9);
            assert!(rel(y.frequency, x.frequency) <= 1e-9);
        }
    }

    #[test]
    fn analytic_bridge_on_bin_cosine() {
        let (n, dt) = (512usize, 0.02);
        let f = 40.0 / (n as f64 * dt);
        let truth = model(&[(3.0, 0.0, f, 0.9)], 0.0, dt);
        let p = pattern_of(&truth, n);
        let opts = HlsvdOptions {
            order: OrderSelection::Fixed(1),
            bridge: Bridge::Analytic,
            ..HlsvdOptions::default()
        };
        let fit = hlsvd_fit(&p, &opts).unwrap();
        let c = fit.model.components[0];
        assert!(rel(c.frequency, f) <= 1e-6);
        assert!(c.damping.abs() <= 1e-4);
        assert!(rel(c.amplitude, 3.0) <= 1e-4);
    }
}
