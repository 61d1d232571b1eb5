//! Scalar posterior functionals `F*(k)` evaluated at a test point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{joint_posterior, standard_normal_quantile, FittedGp, JointPosterior, Points};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalKind {
    PosteriorMean,
    PosteriorQuantile {
        q: f64,
        #[serde(default)]
        include_noise: bool,
    },
    /// `(μ(x*, k₀) - μ(x*, k)) / σ(x*, k₀)` with the `k₀` terms frozen.
    RelativeChange { baseline_mean: f64, baseline_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub kind: FunctionalKind,
    pub x_star: Vec<f64>,
    /// Flip the sign so that the search runs in the other direction.
    #[serde(default)]
    pub negate: bool,
}

/// A functional value and its partial derivatives in the latent posterior
/// mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentGrad {
    pub value: f64,
    pub d_mean: f64,
    pub d_var: f64,
}

impl FunctionalSpec {
    pub fn posterior_mean(x_star: Vec<f64>) -> Self {
        Self { kind: FunctionalKind::PosteriorMean, x_star, negate: false }
    }

    pub fn quantile(x_star: Vec<f64>, q: f64, include_noise: bool) -> Result<Self> {
        standard_normal_quantile(q)?;
        Ok(Self { kind: FunctionalKind::PosteriorQuantile { q, include_noise }, x_star, negate: false })
    }

    /// Relative change against `gp0`; the baseline is computed here, once.
    pub fn relative_change(gp0: &FittedGp, x_star: Vec<f64>) -> Result<Self> {
        let p = gp0.posterior(&x_star)?;
        if !(p.std > 0.0) {
            return Err(Error::Validation("baseline posterior std is zero at the test point".into()));
        }
        Ok(Self {
            kind: FunctionalKind::RelativeChange { baseline_mean: p.mean, baseline_std: p.std },
            x_star,
            negate: false,
        })
    }

    pub fn negated(mut self) -> Self {
        self.negate = !self.negate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_star.iter().any(|v| !v.is_finite()) || self.x_star.is_empty() {
            return Err(Error::Validation("test point must be nonempty and finite".into()));
        }
        match self.kind {
            FunctionalKind::PosteriorQuantile { q, .. } => standard_normal_quantile(q).map(|_| ()),
            FunctionalKind::RelativeChange { baseline_mean, baseline_std } => {
                if !baseline_mean.is_finite() || !(baseline_std > 0.0) {
                    return Err(Error::Validation("relative-change baseline must be finite with positive std".into()));
                }
                Ok(())
            }
            FunctionalKind::PosteriorMean => Ok(()),
        }
    }

    /// Value and derivatives from the latent posterior moments at `x*`.
    pub fn from_moments(&self, mean: f64, var: f64, noise_variance: f64) -> MomentGrad {
        let var = var.max(0.0);
        let sign = if self.negate { -1.0 } else { 1.0 };
        let (value, d_mean, d_var) = match self.kind {
            FunctionalKind::PosteriorMean => (mean, 1.0, 0.0),
            FunctionalKind::PosteriorQuantile { q, include_noise } => {
                let z = standard_normal_quantile(q).expect("validated quantile");
                let s2 = if include_noise { var + noise_variance } else { var };
                let s = s2.sqrt();
                let ds = if s > 0.0 { z / (2.0 * s) } else { 0.0 };
                (mean + z * s, 1.0, ds)
            }
            FunctionalKind::RelativeChange { baseline_mean, baseline_std } => {
                ((baseline_mean - mean) / baseline_std, -1.0 / baseline_std, 0.0)
            }
        };
        MomentGrad { value: sign * value, d_mean: sign * d_mean, d_var: sign * d_var }
    }

    /// `F*` for a GP (dispatches to the posterior or quantile).
    pub fn evaluate(&self, gp: &FittedGp) -> Result<f64> {
        self.validate()?;
        let p = gp.posterior(&self.x_star)?;
        Ok(self.from_moments(p.mean, p.variance(), gp.noise_variance()).value)
    }

    /// Training inputs with the test point appended.
    pub(crate) fn joint_points(&self, gp: &FittedGp) -> Result<Points> {
        gp.dataset().x.with_point(&self.x_star)
    }

    /// Evaluates from a precomputed joint Gram matrix over `[X; x*]`.
    pub(crate) fn evaluate_joint(&self, gp: &FittedGp, k_full: &DMatrix<f64>) -> Result<(MomentGrad, JointPosterior)> {
        let jp = joint_posterior(k_full, gp.dataset(), gp.noise_variance(), gp.mean())?;
        Ok((self.from_moments(jp.mean, jp.var, gp.noise_variance()), jp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Dataset, KernelExpr, MeanFunction};

    fn gp() -> FittedGp {
        let d = Dataset::new(Points::from_scalars(&[0.0, 0.5, 1.5]).unwrap(), vec![0.2, 0.9, -0.3]).unwrap();
        FittedGp::new(d, KernelExpr::se(1.0, 0.8), 0.05, MeanFunction::Zero).unwrap()
    }

    #[test]
    fn relative_change_vanishes_at_baseline() {
        let g = gp();
        let f = FunctionalSpec::relative_change(&g, vec![2.3]).unwrap();
        assert_eq!(f.evaluate(&g).unwrap(), 0.0);
    }

    #[test]
    fn mean_kind_dispatches_to_posterior() {
        let g = gp();
        let f = FunctionalSpec::posterior_mean(vec![0.7]);
        assert_eq!(f.evaluate(&g).unwrap(), g.posterior(&[0.7]).unwrap().mean);
        assert_eq!(f.clone().negated().evaluate(&g).unwrap(), -g.posterior(&[0.7]).unwrap().mean);
    }

    #[test]
    fn relative_change_sign_convention() {
        let g = gp();
        let f = FunctionalSpec::relative_change(&g, vec![2.3]).unwrap();
        let p = g.posterior(&[2.3]).unwrap();
        // raising the mean makes the functional negative
        assert!(f.from_moments(p.mean + 0.1, p.variance(), 0.05).value < 0.0);
        assert!(f.negated().from_moments(p.mean + 0.1, p.variance(), 0.05).value > 0.0);
    }

    #[test]
    fn moment_derivatives_match_differences() {
        let specs = [
            FunctionalSpec::posterior_mean(vec![0.0]),
            FunctionalSpec::quantile(vec![0.0], 0.9, false).unwrap(),
            FunctionalSpec::quantile(vec![0.0], 0.2, true).unwrap().negated(),
            FunctionalSpec {
                kind: FunctionalKind::RelativeChange { baseline_mean: 0.3, baseline_std: 0.7 },
                x_star: vec![0.0],
                negate: false,
            },
        ];
        for f in &specs {
            let g = f.from_moments(0.4, 0.3, 0.1);
            let h = 1e-6;
            let dm = (f.from_moments(0.4 + h, 0.3, 0.1).value - f.from_moments(0.4 - h, 0.3, 0.1).value) / (2.0 * h);
            let dv = (f.from_moments(0.4, 0.3 + h, 0.1).value - f.from_moments(0.4, 0.3 - h, 0.1).value) / (2.0 * h);
            assert!((g.d_mean - dm).abs() < 1e-8 && (g.d_var - dv).abs() < 1e-7, "{f:?}");
        }
    }
}
