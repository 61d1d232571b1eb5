use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Smallest and largest jitter, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-2;

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries the matrix as given, then adds `JITTER_START · mean(diag)` and
/// multiplies by 10 until `JITTER_MAX · mean(diag)`. Returns the factor and
/// the jitter actually added.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let n = m.nrows();
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut mj = m.clone();
        for i in 0..n {
            mj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(mj) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Numerical(format!(
        "Cholesky failed for {n}x{n} matrix even with jitter {:.1e}·mean(diag)",
        JITTER_MAX
    )))
}

/// `log det` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetric eigen-decomposition returning (eigenvalues, eigenvectors).
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
}
