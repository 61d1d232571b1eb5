//! Exact GP regression with a cached Cholesky factor.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::data::{Dataset, Points};
use super::kernel::KernelExpr;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det};

/// Constant prior mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanFunction {
    #[default]
    Zero,
    Constant(f64),
    /// Empirical mean of the training outputs.
    TrainingMean,
}

impl MeanFunction {
    pub fn resolve(&self, data: &Dataset) -> f64 {
        match *self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Constant(c) => c,
            MeanFunction::TrainingMean => data.mean_y(),
        }
    }
}

/// Posterior mean and standard deviation of `f(x*)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub std: f64,
}

impl Posterior {
    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// A GP conditioned on data: kernel, noise variance, constant mean and the
/// Cholesky factor of `K(X, X) + σ²I`.
#[derive(Debug, Clone)]
pub struct FittedGp {
    dataset: Dataset,
    kernel: KernelExpr,
    noise_variance: f64,
    mean: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    log_marginal_likelihood: f64,
    gradient_norm: Option<f64>,
}

/// Serializable form of [`FittedGp`]; the factor is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FittedGpRecord {
    pub dataset: Dataset,
    pub kernel: KernelExpr,
    pub noise_variance: f64,
    pub mean: f64,
    pub log_marginal_likelihood: f64,
    #[serde(default)]
    pub gradient_norm: Option<f64>,
}

impl FittedGp {
    pub fn new(dataset: Dataset, kernel: KernelExpr, noise_variance: f64, mean: MeanFunction) -> Result<Self> {
        let m = mean.resolve(&dataset);
        Self::with_constant_mean(dataset, kernel, noise_variance, m)
    }

    pub fn with_constant_mean(dataset: Dataset, kernel: KernelExpr, noise_variance: f64, mean: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::Validation(format!("noise variance must be positive, got {noise_variance}")));
        }
        if !mean.is_finite() {
            return Err(Error::Validation("mean must be finite".into()));
        }
        let k = kernel.gram_sym(&dataset.x)?;
        let a = noisy(k, noise_variance);
        let (chol, jitter) = cholesky_jittered(&a)?;
        let resid = residual(&dataset, mean);
        let alpha = chol.solve(&resid);
        let n = dataset.len() as f64;
        let lml = -0.5 * resid.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * n * (2.0 * PI).ln();
        Ok(Self {
            dataset,
            kernel,
            noise_variance,
            mean,
            chol,
            alpha,
            jitter,
            log_marginal_likelihood: lml,
            gradient_norm: None,
        })
    }

    pub fn from_record(r: FittedGpRecord) -> Result<Self> {
        r.dataset.validate()?;
        let mut gp = Self::with_constant_mean(r.dataset, r.kernel, r.noise_variance, r.mean)?;
        gp.gradient_norm = r.gradient_norm;
        Ok(gp)
    }

    pub fn to_record(&self) -> FittedGpRecord {
        FittedGpRecord {
            dataset: self.dataset.clone(),
            kernel: self.kernel.clone(),
            noise_variance: self.noise_variance,
            mean: self.mean,
            log_marginal_likelihood: self.log_marginal_likelihood,
            gradient_norm: self.gradient_norm,
        }
    }

    /// Same data, noise and mean under a different kernel.
    pub fn with_kernel(&self, kernel: KernelExpr) -> Result<Self> {
        Self::with_constant_mean(self.dataset.clone(), kernel, self.noise_variance, self.mean)
    }

    pub(crate) fn set_gradient_norm(&mut self, g: f64) {
        self.gradient_norm = Some(g);
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn kernel(&self) -> &KernelExpr {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn gradient_norm(&self) -> Option<f64> {
        self.gradient_norm
    }

    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Posterior of the latent `f(x*)`, via two triangular solves.
    pub fn posterior(&self, x_star: &[f64]) -> Result<Posterior> {
        if x_star.len() != self.dataset.dim() {
            return Err(Error::Input(format!(
                "test point has dimension {}, data has {}",
                x_star.len(),
                self.dataset.dim()
            )));
        }
        let xs = Points::new(x_star.len(), x_star.to_vec())?;
        let kstar = self.kernel.gram(&self.dataset.x, &xs)?.column(0).into_owned();
        let kss = self.kernel.gram(&xs, &xs)?[(0, 0)];
        let mean = self.mean + kstar.dot(&self.alpha);
        let mut v = kstar.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = (kss - v.norm_squared()).max(0.0);
        Ok(Posterior { mean, std: var.sqrt() })
    }

    /// `mean + Φ⁻¹(q)·s`, where `s` is the latent std or, with `include_noise`,
    /// the predictive std `√(var + σ²)`.
    pub fn posterior_quantile(&self, x_star: &[f64], q: f64, include_noise: bool) -> Result<f64> {
        let z = standard_normal_quantile(q)?;
        let p = self.posterior(x_star)?;
        let s = if include_noise {
            (p.variance() + self.noise_variance).sqrt()
        } else {
            p.std
        };
        Ok(p.mean + z * s)
    }
}

pub fn standard_normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Validation(format!("quantile level must lie in (0, 1), got {q}")));
    }
    Ok(Normal::standard().inverse_cdf(q))
}

fn noisy(mut k: DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    k
}

fn residual(data: &Dataset, mean: f64) -> DVector<f64> {
    DVector::from_iterator(data.len(), data.y.iter().map(|y| y - mean))
}

/// `log p(y | X, k, σ²)` for a constant mean.
pub fn log_marginal_likelihood(data: &Dataset, kernel: &KernelExpr, noise_variance: f64, mean: f64) -> Result<f64> {
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(Error::Validation(format!("noise variance must be positive, got {noise_variance}")));
    }
    let a = noisy(kernel.gram_sym(&data.x)?, noise_variance);
    let (chol, _) = cholesky_jittered(&a)?;
    let r = residual(data, mean);
    let alpha = chol.solve(&r);
    Ok(-0.5 * r.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * data.len() as f64 * (2.0 * PI).ln())
}

/// Log marginal likelihood and its gradient with respect to the log of each
/// free kernel hyperparameter, followed (if `noise_free`) by `log σ²`.
pub fn lml_with_log_grad(
    data: &Dataset,
    kernel: &KernelExpr,
    noise_variance: f64,
    mean: f64,
    noise_free: bool,
) -> Result<(f64, Vec<f64>)> {
    kernel.validate(data.dim())?;
    let (k, dks) = kernel.gram_with_log_grads(&data.x);
    let a = noisy(k, noise_variance);
    let (chol, _) = cholesky_jittered(&a)?;
    let r = residual(data, mean);
    let alpha = chol.solve(&r);
    let n = data.len();
    let lml = -0.5 * r.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * n as f64 * (2.0 * PI).ln();
    // W = ααᵀ - A⁻¹; dL/dθ = ½ tr(W dK/dθ)
    let ainv = chol.inverse();
    let w = &alpha * alpha.transpose() - ainv;
    let mut grad: Vec<f64> = dks.iter().map(|dk| 0.5 * w.component_mul(dk).sum()).collect();
    if noise_free {
        grad.push(0.5 * noise_variance * w.trace());
    }
    Ok((lml, grad))
}

/// Posterior quantities at a test point computed from the joint Gram matrix
/// over `[X; x*]`; the pieces needed for reverse-mode adjoints.
#[derive(Debug, Clone)]
pub(crate) struct JointPosterior {
    pub mean: f64,
    pub var: f64,
    /// `(K + σ²I)⁻¹ (y - m)`
    pub alpha: DVector<f64>,
    /// `(K + σ²I)⁻¹ k*`
    pub beta: DVector<f64>,
}

pub(crate) fn joint_posterior(k_full: &DMatrix<f64>, data: &Dataset, noise: f64, mean: f64) -> Result<JointPosterior> {
    let n = data.len();
    let a = noisy(k_full.view((0, 0), (n, n)).into_owned(), noise);
    let (chol, _) = cholesky_jittered(&a)?;
    let kstar = k_full.view((0, n), (n, 1)).column(0).into_owned();
    let alpha = chol.solve(&residual(data, mean));
    let beta = chol.solve(&kstar);
    let m = mean + kstar.dot(&alpha);
    let var = (k_full[(n, n)] - kstar.dot(&beta)).max(0.0);
    if !(m.is_finite() && var.is_finite()) {
        return Err(Error::Numerical("non-finite posterior moments".into()));
    }
    Ok(JointPosterior { mean: m, var, alpha, beta })
}

/// Adjoint of a scalar `F(mean, var)` with respect to every entry of the
/// joint Gram matrix, given `dF/dmean` and `dF/dvar`. Entries are treated as
/// independent (no symmetry folding): the `k*` block lives in the last column.
pub(crate) fn joint_adjoint(jp: &JointPosterior, d_mean: f64, d_var: f64) -> DMatrix<f64> {
    let n = jp.alpha.len();
    let mut adj = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            adj[(i, j)] = -d_mean * jp.beta[i] * jp.alpha[j] + d_var * jp.beta[i] * jp.beta[j];
        }
        adj[(i, n)] = d_mean * jp.alpha[i] - 2.0 * d_var * jp.beta[i];
    }
    adj[(n, n)] = d_var;
    adj
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn data(xs: &[f64], ys: &[f64]) -> Dataset {
        Dataset::new(Points::from_scalars(xs).unwrap(), ys.to_vec()).unwrap()
    }

    #[test]
    fn one_point_conditioning_by_hand() {
        let gp = FittedGp::new(data(&[0.7], &[1.0]), KernelExpr::se(1.0, 1.0), 1.0, MeanFunction::Zero).unwrap();
        let p = gp.posterior(&[0.7]).unwrap();
        assert_relative_eq!(p.mean, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.variance(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_outputs_give_zero_mean() {
        let gp = FittedGp::new(data(&[0.0, 1.0, 2.0], &[0.0; 3]), KernelExpr::se(1.0, 1.0), 0.1, MeanFunction::Zero)
            .unwrap();
        assert_eq!(gp.posterior(&[0.4]).unwrap().mean, 0.0);
    }

    #[test]
    fn two_point_against_dense_inverse() {
        let gp = FittedGp::new(data(&[0.0, 1.0], &[1.0, -1.0]), KernelExpr::se(1.0, 1.0), 0.1, MeanFunction::Zero)
            .unwrap();
        let e = (-0.5f64).exp();
        let a = DMatrix::from_row_slice(2, 2, &[1.1, e, e, 1.1]);
        let ainv = a.try_inverse().unwrap();
        let xs = 0.3f64;
        let ks = DVector::from_vec(vec![(-0.5 * xs * xs).exp(), (-0.5 * (xs - 1.0).powi(2)).exp()]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let mean = (ks.transpose() * &ainv * y)[(0, 0)];
        let var = 1.0 - (ks.transpose() * &ainv * &ks)[(0, 0)];
        let p = gp.posterior(&[xs]).unwrap();
        assert_relative_eq!(p.mean, mean, epsilon = 1e-10);
        assert_relative_eq!(p.variance(), var, epsilon = 1e-10);
    }

    #[test]
    fn cached_factor_reconstructs_matrix() {
        let d = data(&[0.0, 0.3, 1.1, 2.0, 2.05], &[1.0, 0.5, -0.2, 0.3, 0.31]);
        let gp = FittedGp::new(d.clone(), KernelExpr::se(1.2, 0.8), 0.05, MeanFunction::Zero).unwrap();
        let mut a = KernelExpr::se(1.2, 0.8).gram_sym(&d.x).unwrap();
        for i in 0..5 {
            a[(i, i)] += 0.05 + gp.jitter();
        }
        let l = gp.cholesky_l();
        let rel = crate::linalg::frobenius(&(&l * l.transpose() - &a)) / crate::linalg::frobenius(&a);
        assert!(rel <= 1e-10);
    }

    #[test]
    fn quantile_cases() {
        let gp = FittedGp::new(data(&[0.0, 1.0], &[1.0, 2.0]), KernelExpr::se(1.0, 1.0), 0.2, MeanFunction::Zero)
            .unwrap();
        let p = gp.posterior(&[3.0]).unwrap();
        assert_eq!(gp.posterior_quantile(&[3.0], 0.5, false).unwrap(), p.mean);
        assert_relative_eq!(standard_normal_quantile(0.95).unwrap(), 1.644854, epsilon = 1e-6);
        let z = standard_normal_quantile(0.9).unwrap();
        let with_noise = gp.posterior_quantile(&[3.0], 0.9, true).unwrap();
        assert_relative_eq!(with_noise, p.mean + z * (p.variance() + 0.2).sqrt(), epsilon = 1e-14);
        assert!(gp.posterior_quantile(&[3.0], 1.0, false).is_err());
        assert!(gp.posterior_quantile(&[3.0], 0.0, false).is_err());
    }

    #[test]
    fn scalar_log_density() {
        let d = data(&[0.0], &[0.0]);
        let lml = log_marginal_likelihood(&d, &KernelExpr::se(1.0, 1.0), 1.0, 0.0).unwrap();
        assert_relative_eq!(lml, -0.5 * 2f64.ln() - 0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
    }

    #[test]
    fn zero_residual_drops_quadratic_term() {
        let d = data(&[0.0, 1.0], &[3.0, 3.0]);
        let k = KernelExpr::se(1.0, 1.0);
        let lml = log_marginal_likelihood(&d, &k, 0.5, 3.0).unwrap();
        let mut a = k.gram_sym(&d.x).unwrap();
        a[(0, 0)] += 0.5;
        a[(1, 1)] += 0.5;
        assert_relative_eq!(lml, -0.5 * a.determinant().ln() - (2.0 * PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let d = data(&[0.0, 0.4, 1.3, 2.2, 3.1], &[0.3, 0.9, -0.4, 0.2, 1.1]);
        let k = KernelExpr::heart_rate(0.9, 1.3, 0.5, 0.4);
        let (_, g) = lml_with_log_grad(&d, &k, 0.07, 0.1, true).unwrap();
        let theta = k.free_params();
        let h = 1e-5;
        for p in 0..theta.len() + 1 {
            let eval = |s: f64| {
                let mut t = theta.clone();
                let mut noise = 0.07;
                if p < theta.len() {
                    t[p] *= s.exp();
                } else {
                    noise *= s.exp();
                }
                let mut kk = k.clone();
                kk.set_free_params(&t).unwrap();
                log_marginal_likelihood(&d, &kk, noise, 0.1).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((g[p] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "param {p}: {} vs {fd}", g[p]);
        }
    }
}
