//! Maximizing a posterior functional over an ε-box of spectral densities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{trapezoid_weights, SpectralGrid};
use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::gp::{joint_adjoint, FittedGp};

/// Per-frequency box `max(0, (1-ε)S₀) ≤ S ≤ (1+ε)S₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBox {
    reference: SpectralGrid,
    epsilon: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SpectralBox {
    pub fn new(reference: SpectralGrid, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::Validation(format!("ε must be finite and nonnegative, got {epsilon}")));
        }
        reference.validate()?;
        let lower = reference.density().iter().map(|s| ((1.0 - epsilon) * s).max(0.0)).collect();
        let upper = reference.density().iter().map(|s| (1.0 + epsilon) * s).collect();
        Ok(Self { reference, epsilon, lower, upper })
    }

    pub fn reference(&self) -> &SpectralGrid {
        &self.reference
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Clips each coordinate into its interval.
    pub fn project(&self, s: &mut [f64]) {
        for ((v, lo), hi) in s.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *lo <= *v && *v <= *hi)
    }
}

/// The map `S ↦ F*(k_S)` for a fixed GP template and test point. Every entry
/// of the joint Gram matrix over `[X; x*]` is linear in `S`, so the map is
/// precomputed as a (pairs × G) basis.
pub struct SpectralProblem<'a> {
    gp: &'a FittedGp,
    functional: &'a FunctionalSpec,
    n: usize,
    pairs: Vec<(usize, usize)>,
    basis: DMatrix<f64>,
}

impl<'a> SpectralProblem<'a> {
    pub fn new(gp: &'a FittedGp, functional: &'a FunctionalSpec, frequencies: &[f64]) -> Result<Self> {
        if gp.dataset().dim() != 1 {
            return Err(Error::Unsupported(format!(
                "spectral perturbation needs 1-D inputs, data has D = {}",
                gp.dataset().dim()
            )));
        }
        functional.validate()?;
        let pts = functional.joint_points(gp)?;
        let n = gp.dataset().len();
        let weights = trapezoid_weights(frequencies);
        let mut pairs = Vec::with_capacity((n + 1) * (n + 2) / 2);
        for a in 0..=n {
            for b in a..=n {
                pairs.push((a, b));
            }
        }
        let basis = DMatrix::from_fn(pairs.len(), frequencies.len(), |p, g| {
            let (a, b) = pairs[p];
            let tau = pts.row(a)[0] - pts.row(b)[0];
            weights[g] * (2.0 * PI * tau * frequencies[g]).cos()
        });
        Ok(Self { gp, functional, n, pairs, basis })
    }

    fn joint_gram(&self, s: &[f64]) -> DMatrix<f64> {
        let vals = &self.basis * DVector::from_column_slice(s);
        let mut k = DMatrix::zeros(self.n + 1, self.n + 1);
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            k[(a, b)] = vals[p];
            k[(b, a)] = vals[p];
        }
        k
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        let (mg, _) = self.functional.evaluate_joint(self.gp, &self.joint_gram(s))?;
        finite(mg.value)
    }

    /// `F*` and its exact gradient with respect to the density values.
    pub fn value_and_grad(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (mg, jp) = self.functional.evaluate_joint(self.gp, &self.joint_gram(s))?;
        let adj = joint_adjoint(&jp, mg.d_mean, mg.d_var);
        let pair_adj = DVector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|&(a, b)| if a == b { adj[(a, a)] } else { adj[(a, b)] + adj[(b, a)] }),
        );
        let grad = self.basis.tr_mul(&pair_adj);
        Ok((finite(mg.value)?, grad.iter().copied().collect()))
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("non-finite functional value".into()))
    }
}

/// `F*` and `∂F*/∂S_g` for the kernel reconstructed from `grid`.
pub fn functional_gradient(gp: &FittedGp, functional: &FunctionalSpec, grid: &SpectralGrid) -> Result<(f64, Vec<f64>)> {
    grid.validate()?;
    SpectralProblem::new(gp, functional, grid.frequencies())?.value_and_grad(grid.density())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentOptions {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Largest coordinate move per step, as a fraction of that coordinate's box width.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_steps() -> usize {
    500
}
fn default_step_size() -> f64 {
    0.25
}
fn default_restarts() -> usize {
    25
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self { steps: default_steps(), step_size: default_step_size(), restarts: default_restarts() }
    }
}

/// Halvings allowed when a step lowers `F*`.
pub const MAX_BACKOFF: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartDiagnostic {
    pub index: usize,
    /// `reference`, `random` or `warm`.
    pub start: String,
    pub f_star: Option<f64>,
    pub iterations: usize,
    pub status: String,
}

/// Best `F*` found by one restart and the density achieving it.
type Iterate = (f64, Vec<f64>);

#[derive(Debug, Clone)]
pub struct SpectralOutcome {
    pub grid: SpectralGrid,
    pub f_star: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartDiagnostic>,
}

/// Projected gradient ascent of `F*` over `box_`.
///
/// Restart 0 starts at the reference density; restarts `1..` start uniformly
/// inside the box. An optional `warm_start` (projected into the box) is run
/// as one extra restart. Iterates are parameterized by their position in the
/// box, `u_g = (S_g - lo_g) / (hi_g - lo_g)`, so a step moves every
/// coordinate in proportion to its own width; each step is clipped back into
/// the box and halved (up to [`MAX_BACKOFF`] times) if `F*` would decrease.
/// σ², the mean and the functional stay fixed at the reference fit.
pub fn maximize_spectral(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    box_: &SpectralBox,
    opts: &AscentOptions,
    seed: u64,
    warm_start: Option<&[f64]>,
) -> Result<SpectralOutcome> {
    if opts.restarts == 0 {
        return Err(Error::Validation("restarts must be at least 1".into()));
    }
    if !(opts.step_size > 0.0 && opts.step_size.is_finite()) {
        return Err(Error::Validation("step size must be positive".into()));
    }
    let freqs = box_.reference().frequencies();
    let problem = SpectralProblem::new(gp0, functional, freqs)?;
    let g = freqs.len();

    let mut starts: Vec<(String, Vec<f64>)> = Vec::with_capacity(opts.restarts + 1);
    starts.push(("reference".into(), box_.reference().density().to_vec()));
    for r in 1..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let s = (0..g).map(|i| box_.lower[i] + rng.random::<f64>() * (box_.upper[i] - box_.lower[i])).collect();
        starts.push(("random".into(), s));
    }
    if let Some(w) = warm_start {
        if w.len() != g {
            return Err(Error::Input(format!("warm start has {} values, grid has {g}", w.len())));
        }
        let mut s = w.to_vec();
        box_.project(&mut s);
        starts.push(("warm".into(), s));
    }

    let runs: Vec<(Option<Iterate>, RestartDiagnostic)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(index, (label, s))| {
            let (res, iterations, status) = ascend(&problem, box_, s, opts);
            let diag = RestartDiagnostic {
                index,
                start: label,
                f_star: res.as_ref().map(|r| r.0),
                iterations,
                status,
            };
            (res, diag)
        })
        .collect();

    let mut best: Option<(usize, f64, &Vec<f64>)> = None;
    for (i, (res, _)) in runs.iter().enumerate() {
        if let Some((f, s)) = res {
            if best.is_none_or(|(_, bf, _)| *f > bf) {
                best = Some((i, *f, s));
            }
        }
    }
    let restarts: Vec<RestartDiagnostic> = runs.iter().map(|(_, d)| d.clone()).collect();
    let Some((best_restart, f_star, s)) = best else {
        return Err(Error::Optimization(format!(
            "every restart failed at ε = {}: {}",
            box_.epsilon(),
            restarts.iter().map(|d| d.status.clone()).collect::<Vec<_>>().join("; ")
        )));
    };
    Ok(SpectralOutcome { grid: box_.reference().with_density(s.clone())?, f_star, best_restart, restarts })
}

/// One ascent run; returns the best iterate (the last accepted one).
fn ascend(
    problem: &SpectralProblem,
    box_: &SpectralBox,
    mut s: Vec<f64>,
    opts: &AscentOptions,
) -> (Option<(f64, Vec<f64>)>, usize, String) {
    let width: Vec<f64> = box_.upper.iter().zip(&box_.lower).map(|(h, l)| h - l).collect();
    let (mut f, mut grad) = match problem.value_and_grad(&s) {
        Ok(v) => v,
        Err(e) => return (None, 0, format!("aborted at start: {e}")),
    };
    let mut status = "max-steps".to_string();
    let mut it = 0;
    while it < opts.steps {
        // ascent direction in box coordinates, ignoring coordinates pinned at a bound
        let dir: Vec<f64> = (0..s.len())
            .map(|i| {
                let d = width[i] * grad[i];
                let pinned = (d > 0.0 && s[i] >= box_.upper[i]) || (d < 0.0 && s[i] <= box_.lower[i]);
                if pinned {
                    0.0
                } else {
                    d
                }
            })
            .collect();
        let dmax = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if dmax == 0.0 || !dmax.is_finite() {
            status = "stationary".into();
            break;
        }
        let mut eta = opts.step_size / dmax;
        let mut accepted = None;
        for _ in 0..=MAX_BACKOFF {
            let mut cand: Vec<f64> = s.iter().zip(&dir).zip(&width).map(|((v, d), w)| v + eta * d * w).collect();
            box_.project(&mut cand);
            match problem.value(&cand) {
                Ok(fc) if fc >= f => {
                    accepted = Some((cand, fc));
                    break;
                }
                _ => eta *= 0.5,
            }
        }
        let Some((cand, fc)) = accepted else {
            status = "backoff-exhausted".into();
            break;
        };
        match problem.value_and_grad(&cand) {
            Ok((fv, gv)) => {
                s = cand;
                let gain = fv - f;
                f = fv;
                grad = gv;
                it += 1;
                if gain <= 1e-13 * (1.0 + f.abs()) {
                    status = "converged".into();
                    break;
                }
            }
            Err(e) => {
                // the value at `cand` was finite; keep the previous iterate
                let _ = fc;
                status = format!("aborted: {e}");
                break;
            }
        }
    }
    (Some((f, s)), it, status)
}
