//! Laplace approximation to the hyperparameter posterior around the MMLE.
//!
//! The negative Hessian of the log marginal likelihood in log-hyperparameter
//! space is estimated by central differences (step `1e-4` relative per
//! coordinate), symmetrized, eigenvalue-floored at `1e-8 · λ_max`, and
//! inverted to give the covariance.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernel::KernelExpr;
use super::model::{lml_with_log_grad, FittedGp};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;

pub const FD_STEP: f64 = 1e-4;
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Log-scale posterior standard deviation above which a hyperparameter is
/// reported as weakly identified.
pub const WEAK_SD: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct HyperPosterior {
    /// Mode in log space: free kernel hyperparameters, then `log σ²` if included.
    pub mode: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// The floored negative Hessian whose inverse is `covariance`.
    pub precision: DMatrix<f64>,
    pub names: Vec<String>,
    pub includes_noise: bool,
    /// Non-fatal issues, e.g. floored eigenvalues.
    pub warnings: Vec<String>,
    template: KernelExpr,
}

impl HyperPosterior {
    pub fn template(&self) -> &KernelExpr {
        &self.template
    }

    /// Kernel with the same form as the template and hyperparameters `theta`
    /// (positive domain; a trailing noise entry is ignored).
    pub fn kernel_at(&self, theta: &[f64]) -> Result<KernelExpr> {
        let nk = self.template.n_free_params();
        let mut k = self.template.clone();
        k.set_free_params(&theta[..nk])?;
        Ok(k)
    }

    /// Returns a copy with the covariance scaled by `s`; used for limit checks.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.covariance *= s;
        out.precision /= s;
        out
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }
}

/// Laplace approximation at a fitted GP's hyperparameters.
pub fn laplace_hyper_posterior(gp: &FittedGp, include_noise: bool) -> Result<HyperPosterior> {
    let template = gp.kernel().clone();
    let data = gp.dataset();
    let nk = template.n_free_params();
    let mut mode: Vec<f64> = template.free_params().iter().map(|v| v.ln()).collect();
    if include_noise {
        mode.push(gp.noise_variance().ln());
    }
    if mode.is_empty() {
        return Err(Error::Validation("kernel has no free hyperparameters".into()));
    }
    let grad = |z: &[f64]| -> Result<Vec<f64>> {
        let mut k = template.clone();
        k.set_free_params(&z[..nk].iter().map(|v| v.exp()).collect::<Vec<_>>())?;
        let noise = if include_noise { z[nk].exp() } else { gp.noise_variance() };
        Ok(lml_with_log_grad(data, &k, noise, gp.mean(), include_noise)?.1)
    };
    let d = mode.len();
    let mut hess = DMatrix::zeros(d, d);
    for j in 0..d {
        let h = FD_STEP * mode[j].abs().max(1.0);
        let mut up = mode.clone();
        let mut lo = mode.clone();
        up[j] += h;
        lo[j] -= h;
        let gu = grad(&up)?;
        let gl = grad(&lo)?;
        for i in 0..d {
            hess[(i, j)] = (gu[i] - gl[i]) / (2.0 * h);
        }
    }
    let (covariance, precision, mut warnings) = floor_and_invert(&(-hess));
    let mut names = template.free_param_names();
    if include_noise {
        names.push("noise_variance".into());
    }
    for (i, name) in names.iter().enumerate() {
        let sd = covariance[(i, i)].sqrt();
        if sd > WEAK_SD {
            warnings.push(format!("{name} is weakly identified: log-scale standard deviation {sd:.3e}"));
        }
    }
    for w in &warnings {
        log::warn!("laplace: {w}");
    }
    Ok(HyperPosterior { mode, covariance, precision, names, includes_noise: include_noise, warnings, template })
}

/// Laplace covariance for an arbitrary log-density `f` with mode `mode`,
/// using value-only central second differences. Returns (covariance,
/// floored precision, warnings).
pub fn laplace_from_log_density(
    mode: &[f64],
    f: impl Fn(&[f64]) -> f64,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<String>) {
    let d = mode.len();
    let steps: Vec<f64> = mode.iter().map(|m| FD_STEP * m.abs().max(1.0)).collect();
    let at = |di: &[(usize, f64)]| {
        let mut z = mode.to_vec();
        for &(i, s) in di {
            z[i] += s;
        }
        f(&z)
    };
    let f0 = f(mode);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let hi = steps[i];
        hess[(i, i)] = (at(&[(i, hi)]) - 2.0 * f0 + at(&[(i, -hi)])) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let v = (at(&[(i, hi), (j, hj)]) - at(&[(i, hi), (j, -hj)]) - at(&[(i, -hi), (j, hj)])
                + at(&[(i, -hi), (j, -hj)]))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    floor_and_invert(&(-hess))
}

/// Symmetrizes `neg_hessian`, floors its eigenvalues at `1e-8 · λ_max`
/// (or `1e-8` if no eigenvalue is positive), and inverts.
pub fn floor_and_invert(neg_hessian: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<String>) {
    let (eig, vecs) = sym_eigen(neg_hessian);
    let lmax = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut warnings = Vec::new();
    let floor = if lmax > 0.0 {
        EIGEN_FLOOR * lmax
    } else {
        warnings.push("negative Hessian has no positive eigenvalue".into());
        EIGEN_FLOOR
    };
    let floored: Vec<f64> = eig.iter().map(|&l| l.max(floor)).collect();
    let n_floored = eig.iter().filter(|&&l| l < floor).count();
    if n_floored > 0 {
        warnings.push(format!(
            "negative Hessian not positive definite: {n_floored} eigenvalue(s) floored at {floor:.3e}"
        ));
    }
    let prec = &vecs * DMatrix::from_diagonal(&DVector::from_vec(floored.clone())) * vecs.transpose();
    let inv = DVector::from_iterator(floored.len(), floored.iter().map(|l| 1.0 / l));
    let cov = &vecs * DMatrix::from_diagonal(&inv) * vecs.transpose();
    ((&cov + cov.transpose()) * 0.5, (&prec + prec.transpose()) * 0.5, warnings)
}

/// `count` draws from the Laplace approximation, mapped back to the positive
/// domain. Deterministic given `seed`.
pub fn sample_hyperparameters(hp: &HyperPosterior, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    Ok(sample_log_space(&hp.mode, &hp.covariance, count, seed)
        .into_iter()
        .map(|z| z.into_iter().map(f64::exp).collect())
        .collect())
}

/// Multivariate normal draws via the symmetric square root of `cov`.
pub fn sample_log_space(mean: &[f64], cov: &DMatrix<f64>, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = mean.len();
    let (eig, vecs) = sym_eigen(cov);
    let root = &vecs * DMatrix::from_diagonal(&DVector::from_iterator(d, eig.iter().map(|l| l.max(0.0).sqrt())));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
            let x = &root * z;
            mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_log_density_recovers_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0]);
        let mode = [0.3, -1.2, 2.0];
        let f = |z: &[f64]| {
            let d = DVector::from_iterator(3, z.iter().zip(mode).map(|(a, b)| a - b));
            -0.5 * (d.transpose() * &a * &d)[(0, 0)]
        };
        let (cov, _, w) = laplace_from_log_density(&mode, f);
        assert!(w.is_empty());
        let expect = a.try_inverse().unwrap();
        for (x, y) in cov.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn one_dimensional_covariance_is_positive_scalar() {
        let (cov, _, _) = laplace_from_log_density(&[0.5], |z| -2.0 * (z[0] - 0.5).powi(2));
        assert_eq!(cov.shape(), (1, 1));
        assert!((cov[(0, 0)] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn flooring_handles_indefinite_input() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -3.0]);
        let (cov, prec, w) = floor_and_invert(&h);
        assert!(!w.is_empty());
        let (pe, _) = sym_eigen(&prec);
        assert!(pe.iter().all(|&l| l >= EIGEN_FLOOR * 2.0 * (1.0 - 1e-12)));
        let (ce, _) = sym_eigen(&cov);
        assert!(ce.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn degenerate_and_deterministic_sampling() {
        let cov = DMatrix::identity(2, 2) * 1e-16;
        let draws = sample_log_space(&[0.2, -0.4], &cov, 5, 9);
        for d in &draws {
            assert!((d[0] - 0.2).abs() < 1e-6 && (d[1] + 0.4).abs() < 1e-6);
        }
        let a = sample_log_space(&[0.0], &DMatrix::identity(1, 1), 10, 4);
        let b = sample_log_space(&[0.0], &DMatrix::identity(1, 1), 10, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_mean_near_zero() {
        let draws = sample_log_space(&[0.0, 0.0], &DMatrix::identity(2, 2), 10_000, 77);
        for d in 0..2 {
            let m = draws.iter().map(|v| v[d]).sum::<f64>() / draws.len() as f64;
            assert!(m.abs() < 0.05, "{m}");
        }
    }
}
