use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// A linear map with an adjoint, used by the Lanczos iteration.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64>;
    /// `x = Aᴴ y`
    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64>;
}

impl LinearOperator for DMatrix<Complex64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let x = nalgebra::DVector::from_column_slice(x);
        (self * x).as_slice().to_vec()
    }

    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        let y = nalgebra::DVector::from_column_slice(y);
        (self.adjoint() * y).as_slice().to_vec()
    }
}

/// Matrix-free Hankel operator `H[m][l] = s[m + l]` of shape `L × M`,
/// `L + M = N + 1`. Products cost one FFT convolution each.
#[derive(Clone)]
pub struct HankelOperator {
    signal: Vec<Complex64>,
    rows: usize,
    cols: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    spectrum: Vec<Complex64>,
    spectrum_conj: Vec<Complex64>,
}

impl fmt::Debug for HankelOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HankelOperator")
            .field("len", &self.signal.len())
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

/// Builds the operator with `L = ⌈(N+1)/2⌉`, `M = N + 1 − L`.
pub fn hankel_operator(signal: &[Complex64]) -> Result<HankelOperator> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::Size(format!("Hankel embedding needs at least 2 samples, got {n}")));
    }
    let rows = (n + 2) / 2;
    let cols = n + 1 - rows;
    HankelOperator::with_shape(signal, rows, cols)
}

impl HankelOperator {
    pub fn with_shape(signal: &[Complex64], rows: usize, cols: usize) -> Result<Self> {
        let n = signal.len();
        if rows == 0 || cols == 0 || rows + cols != n + 1 {
            return Err(Error::Size(format!(
                "{rows}x{cols} Hankel shape does not fit {n} samples"
            )));
        }
        let fft_len = (n + rows.max(cols) - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); fft_len];
        spectrum[..n].copy_from_slice(signal);
        let mut spectrum_conj: Vec<Complex64> = spectrum.iter().map(|c| c.conj()).collect();
        forward.process(&mut spectrum);
        forward.process(&mut spectrum_conj);
        Ok(Self {
            signal: signal.to_vec(),
            rows,
            cols,
            fft_len,
            forward,
            inverse,
            spectrum,
            spectrum_conj,
        })
    }

    pub fn signal(&self) -> &[Complex64] {
        &self.signal
    }

    /// `L`
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `M`
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Explicit matrix, for oracles and small problems.
    pub fn to_dense(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.rows, self.cols, |m, l| self.signal[m + l])
    }

    // Σ_j s[i + j] x[j] is entry i + len(x) − 1 of the linear convolution of
    // s with reversed x.
    fn correlate(&self, spectrum: &[Complex64], x: &[Complex64], out_len: usize) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for (dst, src) in buf.iter_mut().zip(x.iter().rev()) {
            *dst = *src;
        }
        self.forward.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(spectrum) {
            *b *= s;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        let offset = x.len() - 1;
        buf[offset..offset + out_len].iter().map(|v| v * scale).collect()
    }
}

impl LinearOperator for HankelOperator {
    fn nrows(&self) -> usize {
        self.rows
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.cols, "matvec operand length");
        self.correlate(&self.spectrum, x, self.rows)
    }

    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(y.len(), self.rows, "adjoint operand length");
        self.correlate(&self.spectrum_conj, y, self.cols)
    }
}
