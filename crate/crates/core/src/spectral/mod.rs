//! Stationary kernels represented by discretized one-sided spectral densities.
//!
//! The grid stores `S̃(ω)` for `ω ≥ 0` (cycles per input unit) with
//! `k(τ) = ∫₀^∞ cos(2πτω) S̃(ω) dω`; `S̃` is twice the usual two-sided density.
//! Kernels are reconstructed from the grid with the trapezoidal rule.

mod ascent;

pub use ascent::{
    functional_gradient, maximize_spectral, AscentOptions, RestartDiagnostic, SpectralBox, SpectralOutcome,
    SpectralProblem,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{KernelExpr, Points};

/// Default number of frequencies.
pub const DEFAULT_GRID_SIZE: usize = 100;
/// `ω_G` is where the reference density falls to this fraction of its peak.
pub const TAIL_THRESHOLD: f64 = 1e-15;
const OMEGA_SEARCH_CAP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    frequencies: Vec<f64>,
    density: Vec<f64>,
}

impl SpectralGrid {
    pub fn new(frequencies: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        let g = Self { frequencies, density };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.frequencies;
        if f.len() < 2 {
            return Err(Error::Validation(format!("spectral grid needs at least 2 frequencies, got {}", f.len())));
        }
        if f.len() != self.density.len() {
            return Err(Error::Validation("frequency and density lengths differ".into()));
        }
        if f[0] != 0.0 {
            return Err(Error::Validation("spectral grid must start at ω = 0".into()));
        }
        if f.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::Validation("frequencies must be finite and strictly increasing".into()));
        }
        if self.density.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Validation("density values must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Same frequencies with new density values.
    pub fn with_density(&self, density: Vec<f64>) -> Result<Self> {
        Self::new(self.frequencies.clone(), density)
    }

    /// Trapezoid weights `c_g` so that `∫ f ≈ Σ c_g f(ω_g)`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.frequencies)
    }

    /// `k(τ) = Σ_g c_g cos(2πτω_g) S_g`.
    pub fn kernel_value(&self, tau: f64) -> f64 {
        let w = &self.frequencies;
        let s = &self.density;
        let mut acc = 0.0;
        for g in 0..w.len() - 1 {
            let h = 0.5 * (w[g + 1] - w[g]);
            acc += h * ((2.0 * PI * tau * w[g]).cos() * s[g] + (2.0 * PI * tau * w[g + 1]).cos() * s[g + 1]);
        }
        acc
    }
}

pub(crate) fn trapezoid_weights(w: &[f64]) -> Vec<f64> {
    let g = w.len();
    let mut c = vec![0.0; g];
    for i in 0..g - 1 {
        let h = 0.5 * (w[i + 1] - w[i]);
        c[i] += h;
        c[i + 1] += h;
    }
    c
}

/// Uniform frequencies on `[0, omega_max]`.
pub fn uniform_frequencies(omega_max: f64, size: usize) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(Error::Validation("grid size must be at least 2".into()));
    }
    if !(omega_max.is_finite() && omega_max > 0.0) {
        return Err(Error::Validation(format!("maximum frequency must be positive, got {omega_max}")));
    }
    Ok((0..size).map(|g| omega_max * g as f64 / (size - 1) as f64).collect())
}

fn check_spectral_input(k: &KernelExpr) -> Result<()> {
    if !k.is_stationary() {
        return Err(Error::Validation("spectral density requires a stationary kernel".into()));
    }
    k.validate(1)
}

/// Closed-form one-sided density for SE / Matérn 5/2 nodes and their sums.
fn exact_density(k: &KernelExpr, omega: f64) -> Option<f64> {
    match k {
        KernelExpr::SquaredExponential { amplitude, lengthscale } => {
            let (h, l) = (amplitude.value, lengthscale.value);
            Some(2.0 * h * h * (2.0 * PI).sqrt() * l * (-2.0 * PI * PI * l * l * omega * omega).exp())
        }
        KernelExpr::Matern52 { amplitude, lengthscale } => {
            let (h, l) = (amplitude.value, lengthscale.value);
            let coef = 16.0 * 5f64.powf(2.5) / (3.0 * l.powi(5));
            Some(2.0 * h * h * coef * (5.0 / (l * l) + 4.0 * PI * PI * omega * omega).powi(-3))
        }
        KernelExpr::Sum { terms } => terms.iter().map(|t| exact_density(t, omega)).sum(),
        _ => None,
    }
}

/// `4 ∫₀^T k(τ) cos(2πωτ) dτ` by the trapezoidal rule, for kernels without a
/// closed-form density.
struct NumericDensity {
    taus: Vec<f64>,
    values: Vec<f64>,
    step: f64,
}

impl NumericDensity {
    fn new(k: &KernelExpr, omega_max: f64) -> Result<Self> {
        let origin = Points::from_scalars(&[0.0])?;
        let eval = |t: f64| -> Result<f64> { Ok(k.gram(&Points::from_scalars(&[t])?, &origin)?[(0, 0)]) };
        let k0 = eval(0.0)?;
        let mut horizon = 1.0;
        while eval(horizon)?.abs() > 1e-16 * k0.abs() {
            horizon *= 2.0;
            if horizon > 1e6 {
                return Err(Error::Unsupported(
                    "kernel does not decay; it has no spectral density to discretize".into(),
                ));
            }
        }
        let step = (horizon / 4096.0).min(1.0 / (32.0 * omega_max.max(1e-12)));
        let n = ((horizon / step).ceil() as usize).clamp(4096, 4_000_000);
        let step = horizon / n as f64;
        let taus: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
        let values = k.gram(&Points::from_scalars(&taus)?, &origin)?.column(0).iter().copied().collect();
        Ok(Self { taus, values, step })
    }

    fn at(&self, omega: f64) -> f64 {
        let n = self.taus.len();
        let mut acc = 0.0;
        for (i, (t, v)) in self.taus.iter().zip(&self.values).enumerate() {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * v * (2.0 * PI * omega * t).cos();
        }
        4.0 * acc * self.step
    }
}

/// Density values of a stationary 1-D kernel at the given frequencies,
/// floored at 0.
pub fn density_of_kernel(k: &KernelExpr, frequencies: &[f64]) -> Result<SpectralGrid> {
    check_spectral_input(k)?;
    let values: Vec<f64> = if frequencies.iter().all(|&w| exact_density(k, w).is_some()) {
        frequencies.iter().map(|&w| exact_density(k, w).expect("checked")).collect()
    } else {
        let wmax = frequencies.iter().copied().fold(0.0, f64::max);
        let nd = NumericDensity::new(k, wmax)?;
        frequencies.iter().map(|&w| nd.at(w)).collect()
    };
    SpectralGrid::new(frequencies.to_vec(), values.into_iter().map(|v| v.max(0.0)).collect())
}

/// Spectral kernel node reconstructing `k` from the grid.
pub fn kernel_from_density(grid: SpectralGrid) -> Result<KernelExpr> {
    grid.validate()?;
    Ok(KernelExpr::Spectral { grid })
}

/// Uniform grid from 0 to the smallest `ω_G` at which the reference density
/// drops to `TAIL_THRESHOLD` times its value at 0 (found by bisection).
pub fn default_grid(k0: &KernelExpr, size: usize) -> Result<Vec<f64>> {
    uniform_frequencies(tail_frequency(k0)?, size)
}

/// The `ω_G` used by [`default_grid`].
pub fn tail_frequency(k0: &KernelExpr) -> Result<f64> {
    check_spectral_input(k0)?;
    let exact = exact_density(k0, 0.0).is_some();
    let density: Box<dyn Fn(f64) -> f64> = if exact {
        Box::new(|w| exact_density(k0, w).expect("exact"))
    } else {
        // bracket with a coarse numeric transform sized for the search cap
        let nd = NumericDensity::new(k0, 1e3)?;
        Box::new(move |w| nd.at(w))
    };
    let peak = density(0.0);
    if !(peak > 0.0) {
        return Err(Error::Config("reference density is not positive at ω = 0; set the maximum frequency manually".into()));
    }
    let thr = TAIL_THRESHOLD * peak;
    let mut hi = 1.0;
    while density(hi) > thr {
        hi *= 2.0;
        if hi > OMEGA_SEARCH_CAP || (!exact && hi > 1e3) {
            return Err(Error::Config(
                "reference density does not decay below the tail threshold; set the maximum frequency manually".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if density(mid) > thr {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn se_density_at_zero() {
        let g = density_of_kernel(&KernelExpr::se(1.0, 1.0), &[0.0, 1.0]).unwrap();
        assert_relative_eq!(g.density()[0], 2.0 * (2.0 * PI).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(g.density()[0], 5.013257, epsilon = 1e-6);
    }

    #[test]
    fn closed_forms_match_numeric_cosine_transform() {
        let freqs = [0.0, 0.05, 0.2, 0.4, 0.7];
        for k in [KernelExpr::se(1.3, 0.6), KernelExpr::matern52(0.8, 1.4)] {
            let exact = density_of_kernel(&k, &freqs).unwrap();
            let nd = NumericDensity::new(&k, 1.0).unwrap();
            for (w, s) in freqs.iter().zip(exact.density()) {
                assert!((nd.at(*w) - s).abs() < 1e-6 * (1.0 + s), "{k} at {w}: {} vs {s}", nd.at(*w));
            }
        }
    }

    #[test]
    fn amplitude_scaling_and_linearity() {
        let freqs = uniform_frequencies(2.0, 9).unwrap();
        let a = density_of_kernel(&KernelExpr::se(1.0, 0.7), &freqs).unwrap();
        let b = density_of_kernel(&KernelExpr::se(3.0, 0.7), &freqs).unwrap();
        for (x, y) in a.density().iter().zip(b.density()) {
            assert_relative_eq!(9.0 * x, *y, max_relative = 1e-14);
        }
        let c = density_of_kernel(&KernelExpr::se(0.5, 2.0), &freqs).unwrap();
        let s = density_of_kernel(&KernelExpr::sum(vec![KernelExpr::se(1.0, 0.7), KernelExpr::se(0.5, 2.0)]), &freqs)
            .unwrap();
        for ((x, y), z) in a.density().iter().zip(c.density()).zip(s.density()) {
            assert_relative_eq!(x + y, *z, max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_warped_and_multidimensional() {
        let net = crate::warp::WarpNet::zeros(1, &[3]);
        let w = KernelExpr::Warped { child: Box::new(KernelExpr::se(1.0, 1.0)), net };
        assert!(matches!(density_of_kernel(&w, &[0.0, 1.0]), Err(Error::Validation(_))));
        let grid = SpectralGrid::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let k = kernel_from_density(grid).unwrap();
        assert!(matches!(k.eval(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn constant_density_integrates_exactly() {
        let freqs = uniform_frequencies(3.5, 11).unwrap();
        let k = kernel_from_density(SpectralGrid::new(freqs, vec![1.0; 11]).unwrap()).unwrap();
        assert_relative_eq!(k.eval(&[0.2], &[0.2]).unwrap(), 3.5, epsilon = 1e-14);
        assert_eq!(k.eval(&[0.0], &[0.37]).unwrap(), k.eval(&[0.37], &[0.0]).unwrap());
    }

    #[test]
    fn tail_frequency_scales_inversely_with_lengthscale() {
        let a = tail_frequency(&KernelExpr::se(1.0, 1.0)).unwrap();
        let b = tail_frequency(&KernelExpr::se(1.0, 2.0)).unwrap();
        assert!((b / a - 0.5).abs() < 0.05);
        // exp(-2π²ω²) = 1e-15
        assert_relative_eq!(a, ((1e15f64).ln() / (2.0 * PI * PI)).sqrt(), max_relative = 1e-10);
        let g = default_grid(&KernelExpr::se(1.0, 1.0), 2).unwrap();
        assert_eq!(g, vec![0.0, a]);
    }

    #[test]
    fn grid_validation() {
        assert!(SpectralGrid::new(vec![0.0], vec![1.0]).is_err());
        assert!(SpectralGrid::new(vec![0.1, 1.0], vec![1.0, 1.0]).is_err());
        assert!(SpectralGrid::new(vec![0.0, 1.0, 1.0], vec![1.0; 3]).is_err());
        assert!(SpectralGrid::new(vec![0.0, 1.0], vec![1.0, -1e-3]).is_err());
    }

    #[test]
    fn numeric_density_for_rational_quadratic_is_nonnegative() {
        let freqs = uniform_frequencies(1.0, 6).unwrap();
        let g = density_of_kernel(&KernelExpr::rational_quadratic(1.0, 1.0, 2.0), &freqs).unwrap();
        assert!(g.density().iter().all(|v| *v >= 0.0));
        assert!(g.density()[0] > g.density()[5]);
        assert!(density_of_kernel(&KernelExpr::periodic(1.0, 1.0, 1.0), &freqs).is_err());
    }
}
