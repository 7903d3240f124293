//! Golub–Kahan–Lanczos bidiagonalization with partial reorthogonalization.
//!
//! Loss of orthogonality among the Lanczos vectors is tracked with the
//! ω-recurrences of Simon/Larsen. When an estimate crosses the threshold the
//! offending vector is reorthogonalized against all earlier ones, and so is
//! the next vector of the same kind. If more than half of the steps need it,
//! the iteration switches to full reorthogonalization.

use nalgebra::{DMatrix, SVD};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hankel::LinearOperator;
use crate::error::{Error, Result};

const START_SEED: u64 = 0x5eed_1a2c;

/// Leading singular triplets of an operator.
#[derive(Debug, Clone)]
pub struct PartialSVD {
    /// Left singular vectors, one per column (`L × K`).
    pub u: DMatrix<Complex64>,
    /// Singular values, non-increasing and positive.
    pub values: Vec<f64>,
    /// Right singular vectors, one per column (`M × K`).
    pub v: DMatrix<Complex64>,
    /// Residual bound per returned triplet.
    pub residuals: Vec<f64>,
    /// The Krylov space was exhausted before `max_rank` triplets were found.
    pub breakdown: bool,
    /// Every requested triplet met the convergence tolerance.
    pub converged: bool,
    pub steps: usize,
    pub reorthogonalizations: usize,
    pub full_reorthogonalization: bool,
}

impl PartialSVD {
    pub fn rank_used(&self) -> usize {
        self.values.len()
    }
}

/// Tuning knobs for [`lanczos_bidiag_with`].
#[derive(Debug, Clone)]
pub struct LanczosOptions {
    pub max_rank: usize,
    /// Orthogonality level that triggers reorthogonalization.
    pub reorth_threshold: f64,
    /// Relative residual `‖·‖/σ₁` at which a triplet counts as converged.
    pub tolerance: f64,
    /// Hard cap on bidiagonalization steps; defaults to `10·max_rank + 100`.
    pub max_steps: Option<usize>,
}

impl LanczosOptions {
    pub fn new(max_rank: usize) -> Self {
        Self {
            max_rank,
            reorth_threshold: f64::EPSILON.sqrt(),
            tolerance: 1e-13,
            max_steps: None,
        }
    }
}

/// Leading `max_rank` singular triplets by Lanczos bidiagonalization.
pub fn lanczos_bidiag<A: LinearOperator + ?Sized>(
    op: &A,
    max_rank: usize,
    reorth_threshold: f64,
) -> Result<PartialSVD> {
    let opts = LanczosOptions {
        reorth_threshold,
        ..LanczosOptions::new(max_rank)
    };
    lanczos_bidiag_with(op, &opts)
}

fn norm(x: &[Complex64]) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn axpy(y: &mut [Complex64], a: Complex64, x: &[Complex64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn scale(x: &mut [Complex64], s: f64) {
    for v in x {
        *v *= s;
    }
}

/// Two passes of classical Gram–Schmidt against `basis`.
fn reorthogonalize(r: &mut [Complex64], basis: &[Vec<Complex64>]) {
    for _ in 0..2 {
        for b in basis {
            let h = dot(b, r);
            axpy(r, -h, b);
        }
    }
}

struct Tracker {
    threshold: f64,
    forced: bool,
    triggers: usize,
    steps: usize,
    full: bool,
}

impl Tracker {
    fn new(threshold: f64) -> Self {
        Self {
            threshold,
            forced: false,
            triggers: 0,
            steps: 0,
            full: false,
        }
    }

    /// Decides whether the vector whose estimates are `omega` needs
    /// reorthogonalization.
    fn decide(&mut self, omega: &[f64]) -> bool {
        self.steps += 1;
        let worst = omega.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let hit = self.full || self.forced || worst > self.threshold;
        self.forced = worst > self.threshold && !self.forced;
        if hit {
            self.triggers += 1;
        }
        if !self.full && self.steps >= 4 && 2 * self.triggers > self.steps {
            self.full = true;
        }
        hit
    }
}

pub fn lanczos_bidiag_with<A: LinearOperator + ?Sized>(
    op: &A,
    opts: &LanczosOptions,
) -> Result<PartialSVD> {
    let (rows, cols) = (op.nrows(), op.ncols());
    let rmax = rows.min(cols);
    if opts.max_rank == 0 || opts.max_rank > rmax {
        return Err(Error::Domain(format!(
            "max_rank must be in 1..={rmax}, got {}",
            opts.max_rank
        )));
    }
    if !(opts.reorth_threshold > 0.0) {
        return Err(Error::Domain("reorthogonalization threshold must be positive".into()));
    }
    let want = opts.max_rank;
    let max_steps = opts.max_steps.unwrap_or(10 * want + 100).clamp(want, rmax);
    let eps = f64::EPSILON;
    let noise = eps * ((rows + cols) as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v0: Vec<Complex64> = (0..cols)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
        .collect();
    let n0 = norm(&v0);
    scale(&mut v0, 1.0 / n0);

    let mut us: Vec<Vec<Complex64>> = Vec::new();
    let mut vs: Vec<Vec<Complex64>> = vec![v0];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    // ω estimates: mu[i] ≈ u_iᴴ u_last, nu[i] ≈ v_iᴴ v_last.
    let mut mu: Vec<f64> = Vec::new();
    let mut nu: Vec<f64> = vec![1.0];
    let mut u_track = Tracker::new(opts.reorth_threshold);
    let mut v_track = Tracker::new(opts.reorth_threshold);
    let mut anorm = 0.0_f64;
    let mut breakdown = false;
    let mut converged = false;
    let mut extra_column = false;
    let mut next_check = want;

    loop {
        let j = us.len();
        // Left step: α_j u_j = A v_j − β_{j−1} u_{j−1}.
        let mut p = op.apply(&vs[j]);
        if j > 0 {
            axpy(&mut p, Complex64::new(-betas[j - 1], 0.0), &us[j - 1]);
        }
        let mut alpha = norm(&p);
        if j > 0 {
            let mut mu_new = vec![0.0; j + 1];
            for i in 0..j {
                let mut w = alphas[i] * nu[i] + betas[i] * nu[i + 1] - betas[j - 1] * mu[i];
                w /= alpha.max(f64::MIN_POSITIVE);
                w += noise * anorm.max(alpha) / alpha.max(f64::MIN_POSITIVE) * w.signum();
                mu_new[i] = w;
            }
            mu_new[j] = 1.0;
            if u_track.decide(&mu_new[..j]) {
                reorthogonalize(&mut p, &us);
                alpha = norm(&p);
                for w in &mut mu_new[..j] {
                    *w = noise;
                }
            }
            mu = mu_new;
        } else {
            mu = vec![1.0];
        }
        anorm = anorm.max(alpha);
        if alpha <= 64.0 * eps * anorm || alpha == 0.0 {
            breakdown = true;
            break;
        }
        scale(&mut p, 1.0 / alpha);
        us.push(p);
        alphas.push(alpha);
        if us.len() == rmax && rows >= cols {
            converged = true;
            break;
        }

        // Right step: β_j v_{j+1} = Aᴴ u_j − α_j v_j.
        let mut r = op.apply_adjoint(&us[j]);
        axpy(&mut r, Complex64::new(-alpha, 0.0), &vs[j]);
        let mut beta = norm(&r);
        let mut nu_new = vec![0.0; j + 2];
        for i in 0..=j {
            let mut w = alphas[i] * mu[i] - alphas[j] * nu[i];
            if i > 0 {
                w += betas[i - 1] * mu[i - 1];
            }
            w /= beta.max(f64::MIN_POSITIVE);
            w += noise * anorm.max(beta) / beta.max(f64::MIN_POSITIVE) * w.signum();
            nu_new[i] = w;
        }
        nu_new[j + 1] = 1.0;
        if v_track.decide(&nu_new[..=j]) {
            reorthogonalize(&mut r, &vs);
            beta = norm(&r);
            for w in &mut nu_new[..=j] {
                *w = noise;
            }
        }
        nu = nu_new;
        anorm = anorm.max(beta);
        if beta <= 64.0 * eps * anorm || beta == 0.0 {
            breakdown = true;
            break;
        }
        scale(&mut r, 1.0 / beta);
        vs.push(r);
        betas.push(beta);

        let k = us.len();
        if k == rmax {
            // Wide operator: U spans the whole row space, keep v_k as an
            // extra column of B̃.
            extra_column = true;
            converged = true;
            break;
        }
        if k >= next_check {
            let (_, values, residuals) = ritz(&alphas, &betas, k, k)?;
            let sigma1 = values.first().copied().unwrap_or(0.0);
            if residuals
                .iter()
                .take(want)
                .all(|&res| res <= opts.tolerance * sigma1)
                && values.len() >= want
            {
                converged = true;
                break;
            }
            next_check = k + (k / 10).max(5);
        }
        if k >= max_steps {
            break;
        }
    }

    let ku = us.len();
    // After a left breakdown v_{ku} is still a valid column: A V = U B̃ with
    // B̃ of shape ku × (ku + 1).
    let kv = if (breakdown || extra_column) && vs.len() == ku + 1 {
        ku + 1
    } else {
        ku
    };
    if ku == 0 {
        return Ok(PartialSVD {
            u: DMatrix::zeros(rows, 0),
            values: Vec::new(),
            v: DMatrix::zeros(cols, 0),
            residuals: Vec::new(),
            breakdown: true,
            converged: true,
            steps: 0,
            reorthogonalizations: 0,
            full_reorthogonalization: false,
        });
    }
    let (svd, values, mut residuals) = ritz(&alphas, &betas, ku, kv)?;
    if breakdown || extra_column || ku == rmax {
        residuals.iter_mut().for_each(|r| *r = 0.0);
    }
    let p = svd.0;
    let q = svd.1;
    let keep = values
        .iter()
        .take(want)
        .take_while(|&&s| s > 0.0)
        .count();
    let mut u = DMatrix::zeros(rows, keep);
    let mut v = DMatrix::zeros(cols, keep);
    for c in 0..keep {
        for (i, ui) in us.iter().enumerate() {
            let w = Complex64::new(p[(i, c)], 0.0);
            for (row, val) in ui.iter().enumerate() {
                u[(row, c)] += w * val;
            }
        }
        for (i, vi) in vs.iter().take(kv).enumerate() {
            let w = Complex64::new(q[(i, c)], 0.0);
            for (row, val) in vi.iter().enumerate() {
                v[(row, c)] += w * val;
            }
        }
    }
    Ok(PartialSVD {
        u,
        values: values[..keep].to_vec(),
        v,
        residuals: residuals[..keep].to_vec(),
        breakdown,
        converged: converged || breakdown,
        steps: ku,
        reorthogonalizations: u_track.triggers + v_track.triggers,
        full_reorthogonalization: u_track.full || v_track.full,
    })
}

type RitzVectors = (DMatrix<f64>, DMatrix<f64>);

/// SVD of the `ku × kv` upper bidiagonal matrix, sorted descending, with the
/// residual bound `β_{k−1} |p_{k−1,i}|` for each triplet.
fn ritz(
    alphas: &[f64],
    betas: &[f64],
    ku: usize,
    kv: usize,
) -> Result<(RitzVectors, Vec<f64>, Vec<f64>)> {
    let mut b = DMatrix::<f64>::zeros(ku, kv);
    for i in 0..ku {
        b[(i, i)] = alphas[i];
        if i + 1 < kv {
            b[(i, i + 1)] = betas[i];
        }
    }
    let svd = SVD::try_new(b, true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("bidiagonal SVD did not converge".into()))?;
    let p = svd.u.expect("requested U");
    let qt = svd.v_t.expect("requested Vᵀ");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let values: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let p_sorted = DMatrix::from_fn(ku, order.len(), |r, c| p[(r, order[c])]);
    let q_sorted = DMatrix::from_fn(kv, order.len(), |r, c| qt[(order[c], r)]);
    let tail = betas.get(ku - 1).copied().unwrap_or(0.0);
    let residuals = (0..order.len())
        .map(|c| tail * p_sorted[(ku - 1, c)].abs())
        .collect();
    Ok(((p_sorted, q_sorted), values, residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hlsvd::hankel::hankel_operator;
    use crate::synth::dense_hankel_svd;
    use rand::Rng;

    fn random_signal(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn exponentials(n: usize, poles: &[(f64, f64, f64)]) -> Vec<Complex64> {
        (0..n)
            .map(|k| {
                poles
                    .iter()
                    .map(|&(amp, d, f)| {
                        amp * Complex64::new(-d, 2.0 * std::f64::consts::PI * f).scale(k as f64).exp()
                    })
                    .sum()
            })
            .collect()
    }

    fn orthonormality_error(m: &DMatrix<Complex64>) -> f64 {
        let g = m.adjoint() * m;
        let mut worst = 0.0_f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - Complex64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    #[test]
    fn rank_one_exponential() {
        let s = exponentials(64, &[(1.0, 0.01, 0.07)]);
        let op = hankel_operator(&s).unwrap();
        let svd = lanczos_bidiag(&op, 4, f64::EPSILON.sqrt()).unwrap();
        assert!(svd.rank_used() >= 1);
        assert!(svd.values.iter().skip(1).all(|&s| s <= 1e-10 * svd.values[0]));
        let dense = dense_hankel_svd(&s).unwrap();
        assert!((svd.values[0] - dense.values[0]).abs() <= 1e-10 * dense.values[0]);
    }

    #[test]
    fn three_exponentials_have_rank_three() {
        let s = exponentials(128, &[(1.0, 0.01, 0.05), (0.7, 0.02, 0.19), (0.4, 0.005, 0.33)]);
        let op = hankel_operator(&s).unwrap();
        let svd = lanczos_bidiag(&op, 10, f64::EPSILON.sqrt()).unwrap();
        let above = svd.values.iter().filter(|&&v| v > 1e-8 * svd.values[0]).count();
        assert_eq!(above, 3);
        let dense = dense_hankel_svd(&s).unwrap();
        for i in 0..3 {
            assert!((svd.values[i] - dense.values[i]).abs() <= 1e-8 * dense.values[i]);
        }
    }

    #[test]
    fn random_signal_matches_dense_svd() {
        for (n, seed) in [(64usize, 1u64), (65, 2), (200, 3), (256, 4)] {
            let s = random_signal(n, seed);
            let op = hankel_operator(&s).unwrap();
            let r = op.rows().min(op.cols());
            let svd = lanczos_bidiag(&op, r, f64::EPSILON.sqrt()).unwrap();
            let dense = dense_hankel_svd(&s).unwrap();
            assert_eq!(svd.rank_used(), r);
            for (a, b) in svd.values.iter().zip(&dense.values) {
                assert!((a - b).abs() <= 1e-8 * b, "n={n}: {a} vs {b}");
            }
            assert!(orthonormality_error(&svd.u) <= 1e-8);
            assert!(orthonormality_error(&svd.v) <= 1e-8);
        }
    }

    #[test]
    fn partial_rank_subspace_matches_dense() {
        let s = random_signal(256, 9);
        let op = hankel_operator(&s).unwrap();
        let svd = lanczos_bidiag(&op, 6, f64::EPSILON.sqrt()).unwrap();
        let dense = dense_hankel_svd(&s).unwrap();
        assert!(svd.converged);
        for i in 0..6 {
            assert!((svd.values[i] - dense.values[i]).abs() <= 1e-8 * dense.values[i]);
            // |⟨v_lanczos, v_dense⟩| ≈ 1 means the directions agree up to phase.
            let overlap: Complex64 = svd.v.column(i).iter().zip(dense.v.column(i).iter()).map(|(a, b)| a.conj() * b).sum();
            let angle = (1.0 - overlap.norm().min(1.0)).max(0.0).sqrt();
            assert!(angle <= 1e-6, "triplet {i}: subspace angle {angle}");
        }
        // Singular triplet identity H v = σ u.
        for i in 0..6 {
            let hv = op.apply(svd.v.column(i).as_slice());
            let err: f64 = hv
                .iter()
                .zip(svd.u.column(i).iter())
                .map(|(a, b)| (a - b * svd.values[i]).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-8 * svd.values[0]);
        }
    }

    #[test]
    fn values_are_sorted_and_positive() {
        let s = random_signal(100, 5);
        let op = hankel_operator(&s).unwrap();
        let svd = lanczos_bidiag(&op, 12, f64::EPSILON.sqrt()).unwrap();
        assert!(svd.values.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.values.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_bad_rank() {
        let s = random_signal(16, 5);
        let op = hankel_operator(&s).unwrap();
        assert!(matches!(lanczos_bidiag(&op, 0, 1e-8), Err(Error::Domain(_))));
        assert!(matches!(lanczos_bidiag(&op, 9, 1e-8), Err(Error::Domain(_))));
    }

    #[test]
    fn tight_threshold_falls_back_to_full_reorthogonalization() {
        let s = random_signal(128, 21);
        let op = hankel_operator(&s).unwrap();
        let svd = lanczos_bidiag(&op, 64, 1e-300).unwrap();
        assert!(svd.full_reorthogonalization);
        let dense = dense_hankel_svd(&s).unwrap();
        for (a, b) in svd.values.iter().zip(&dense.values) {
            assert!((a - b).abs() <= 1e-8 * b);
        }
    }
}
