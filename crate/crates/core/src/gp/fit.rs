//! Maximal marginal likelihood estimation in log-hyperparameter space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::kernel::KernelExpr;
use super::model::{lml_with_log_grad, FittedGp, MeanFunction};
use crate::error::{Error, Result};

/// Standard deviation of the log-space perturbation applied to restarts `1..`.
pub const RESTART_PERTURBATION: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Convergence threshold on the log-space gradient norm.
    #[serde(default = "default_gtol")]
    pub gtol: f64,
    /// Optimize σ² alongside the kernel hyperparameters.
    #[serde(default = "default_true")]
    pub fit_noise: bool,
}

fn default_restarts() -> usize {
    1
}
fn default_max_iter() -> usize {
    300
}
fn default_gtol() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: default_restarts(),
            max_iter: default_max_iter(),
            gtol: default_gtol(),
            fit_noise: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RestartSummary {
    pub index: usize,
    pub log_marginal_likelihood: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub iterations: usize,
    pub solver: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MmleFit {
    pub gp: FittedGp,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    /// Log marginal likelihood after each accepted iteration of the best restart.
    pub trace: Vec<f64>,
}

/// Negative log marginal likelihood in log space, with the kernel template
/// and noise handling baked in.
struct Objective<'a> {
    data: &'a Dataset,
    template: &'a KernelExpr,
    mean: f64,
    fixed_noise: Option<f64>,
}

impl Objective<'_> {
    fn unpack(&self, z: &[f64]) -> Result<(KernelExpr, f64)> {
        let nk = self.template.n_free_params();
        let mut k = self.template.clone();
        let theta: Vec<f64> = z[..nk].iter().map(|v| v.exp()).collect();
        k.set_free_params(&theta)?;
        let noise = match self.fixed_noise {
            Some(n) => n,
            None => z[nk].exp(),
        };
        Ok((k, noise))
    }

    /// `(-lml, -grad)`; `None` on numerical failure.
    fn eval(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        if z.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
            return None;
        }
        let (k, noise) = self.unpack(z).ok()?;
        let (lml, g) = lml_with_log_grad(self.data, &k, noise, self.mean, self.fixed_noise.is_none()).ok()?;
        if !lml.is_finite() {
            return None;
        }
        Some((-lml, g.into_iter().map(|v| -v).collect()))
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.eval(z).map(|(f, _)| f).unwrap_or(f64::INFINITY)
    }
}

struct RunResult {
    z: Vec<f64>,
    f: f64,
    grad_norm: f64,
    iterations: usize,
    trace: Vec<f64>,
    solver: &'static str,
}

/// Fits the free hyperparameters of `template` (and σ² when
/// `opts.fit_noise`) by maximizing the log marginal likelihood.
///
/// Restart 0 starts at the template's values; restart `r > 0` perturbs the
/// log-parameters by `N(0, 0.5²)` drawn from a stream keyed by `(seed, r)`.
pub fn fit_mmle(
    data: &Dataset,
    template: &KernelExpr,
    noise_init: f64,
    mean: MeanFunction,
    opts: &FitOptions,
    seed: u64,
) -> Result<MmleFit> {
    if opts.restarts == 0 {
        return Err(Error::Validation("restarts must be at least 1".into()));
    }
    template.validate(data.dim())?;
    if !(noise_init.is_finite() && noise_init > 0.0) {
        return Err(Error::Validation(format!("initial noise variance must be positive, got {noise_init}")));
    }
    let mean_value = mean.resolve(data);
    let obj = Objective {
        data,
        template,
        mean: mean_value,
        fixed_noise: if opts.fit_noise { None } else { Some(noise_init) },
    };
    let mut z0: Vec<f64> = template.free_params().iter().map(|v| v.ln()).collect();
    if opts.fit_noise {
        z0.push(noise_init.ln());
    }

    let runs: Vec<std::result::Result<RunResult, String>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut start = z0.clone();
            if r > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let nd = Normal::new(0.0, RESTART_PERTURBATION).expect("valid normal");
                for v in start.iter_mut() {
                    *v += nd.sample(&mut rng);
                }
            }
            run_restart(&obj, start, opts)
        })
        .collect();

    let mut summaries = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, &RunResult)> = None;
    for (i, run) in runs.iter().enumerate() {
        match run {
            Ok(rr) => {
                summaries.push(RestartSummary {
                    index: i,
                    log_marginal_likelihood: Some(-rr.f),
                    gradient_norm: Some(rr.grad_norm),
                    iterations: rr.iterations,
                    solver: rr.solver.to_string(),
                    error: None,
                });
                if best.is_none_or(|(_, b)| rr.f < b.f) {
                    best = Some((i, rr));
                }
            }
            Err(e) => summaries.push(RestartSummary {
                index: i,
                log_marginal_likelihood: None,
                gradient_norm: None,
                iterations: 0,
                solver: "none".into(),
                error: Some(e.clone()),
            }),
        }
    }
    let Some((best_i, best_run)) = best else {
        return Err(Error::Fit(
            summaries.iter().map(|s| format!("restart {}: {}", s.index, s.error.clone().unwrap_or_default())).collect(),
        ));
    };
    let (kernel, noise) = obj.unpack(&best_run.z)?;
    let mut gp = FittedGp::with_constant_mean(data.clone(), kernel, noise, mean_value)?;
    gp.set_gradient_norm(best_run.grad_norm);
    log::info!(
        "mmle: best restart {best_i} of {}, lml {:.6}, |grad| {:.2e}",
        opts.restarts,
        -best_run.f,
        best_run.grad_norm
    );
    Ok(MmleFit { gp, best_restart: best_i, restarts: summaries, trace: best_run.trace.iter().map(|f| -f).collect() })
}

fn run_restart(obj: &Objective, start: Vec<f64>, opts: &FitOptions) -> std::result::Result<RunResult, String> {
    match obj.eval(&start) {
        Some((_, g)) if g.iter().all(|v| v.is_finite()) => Ok(bfgs(obj, start, opts)),
        _ => {
            let rr = nelder_mead(|z| obj.value(z), start, opts.max_iter * 10);
            if rr.f.is_finite() {
                let grad_norm = obj.eval(&rr.z).map(|(_, g)| norm(&g)).unwrap_or(f64::NAN);
                Ok(RunResult { grad_norm, ..rr })
            } else {
                Err("objective non-finite at start and throughout simplex search".into())
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS on the inverse Hessian with Armijo backtracking; only decreasing
/// steps are accepted, so the recorded trace is monotone.
fn bfgs(obj: &Objective, mut x: Vec<f64>, opts: &FitOptions) -> RunResult {
    let n = x.len();
    let (mut f, mut g) = obj.eval(&x).expect("caller checked the start point");
    let mut h = identity(n);
    let mut trace = vec![f];
    let mut it = 0;
    while it < opts.max_iter {
        if norm(&g) < opts.gtol {
            break;
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i], &g)).collect();
        if dot(&p, &g) >= 0.0 {
            h = identity(n);
            p = g.iter().map(|v| -v).collect();
        }
        // keep log-space moves bounded
        let pmax = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut t = if pmax > 3.0 { 3.0 / pmax } else { 1.0 };
        let slope = dot(&p, &g);
        let mut accepted = None;
        for _ in 0..50 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            if let Some((fnew, gnew)) = obj.eval(&xn) {
                if fnew <= f + 1e-4 * t * slope && gnew.iter().all(|v| v.is_finite()) {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        let df = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        trace.push(f);
        it += 1;
        if df.abs() <= 1e-14 * (1.0 + f.abs()) {
            break;
        }
    }
    RunResult { grad_norm: norm(&g), z: x, f, iterations: it, trace, solver: "bfgs" }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Gradient-free fallback.
fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: Vec<f64>, max_evals: usize) -> RunResult {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.clone(), f(&x0)));
    for i in 0..n {
        let mut v = x0.clone();
        v[i] += 0.5;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let mut evals = n + 1;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(simplex[0].1);
        let spread = simplex[n].1 - simplex[0].1;
        if spread.is_finite() && spread.abs() < 1e-12 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> =
            (0..n).map(|d| simplex[..n].iter().map(|(v, _)| v[d]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            evals += 1;
            if fc < simplex[n].1 {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    for d in 0..n {
                        v[d] = best[d] + 0.5 * (v[d] - best[d]);
                    }
                    *fv = f(v);
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (z, fz) = simplex.swap_remove(0);
    RunResult { z, f: fz, grad_norm: f64::NAN, iterations, trace, solver: "nelder-mead" }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::data::Points;
    use rand::Rng;

    fn simulate_se(n: usize, l: f64, noise: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let x = Points::from_scalars(&xs).unwrap();
        let mut k = KernelExpr::se(1.0, l).gram_sym(&x).unwrap();
        for i in 0..n {
            k[(i, i)] += noise;
        }
        let (c, _) = crate::linalg::cholesky_jittered(&k).unwrap();
        let nd = Normal::new(0.0, 1.0).unwrap();
        let z = nalgebra::DVector::from_iterator(n, (0..n).map(|_| nd.sample(&mut rng)));
        let y = c.l() * z;
        Dataset::new(x, y.iter().copied().collect()).unwrap()
    }

    #[test]
    fn recovers_simulated_lengthscale() {
        let d = simulate_se(200, 0.5, 0.01, 11);
        let fit = fit_mmle(&d, &KernelExpr::se(1.0, 1.0), 0.1, MeanFunction::Zero, &FitOptions::default(), 1).unwrap();
        let l = fit.gp.kernel().free_params()[1];
        assert!((l - 0.5).abs() / 0.5 < 0.2, "lengthscale {l}");
        assert!(fit.gp.gradient_norm().unwrap() < 1e-3);
    }

    #[test]
    fn trace_is_monotone_and_restart_from_optimum_stays() {
        let d = simulate_se(40, 0.8, 0.05, 3);
        let opts = FitOptions { restarts: 3, ..Default::default() };
        let fit = fit_mmle(&d, &KernelExpr::se(1.0, 1.0), 0.1, MeanFunction::Zero, &opts, 5).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(fit.restarts.len(), 3);

        let again = fit_mmle(
            &d,
            fit.gp.kernel(),
            fit.gp.noise_variance(),
            MeanFunction::Zero,
            &FitOptions::default(),
            0,
        )
        .unwrap();
        for (a, b) in again.gp.kernel().free_params().iter().zip(fit.gp.kernel().free_params()) {
            assert!((a - b).abs() <= 1e-4 * b, "{a} vs {b}");
        }
        assert!((again.gp.noise_variance() - fit.gp.noise_variance()).abs() <= 1e-4 * fit.gp.noise_variance());
    }

    #[test]
    fn nelder_mead_minimizes_a_bowl() {
        let rr = nelder_mead(|z| (z[0] - 1.0).powi(2) + 3.0 * (z[1] + 2.0).powi(2), vec![0.0, 0.0], 2000);
        assert!((rr.z[0] - 1.0).abs() < 1e-4 && (rr.z[1] + 2.0).abs() < 1e-4);
    }

    #[test]
    fn zero_restarts_rejected() {
        let d = simulate_se(5, 1.0, 0.1, 1);
        let opts = FitOptions { restarts: 0, ..Default::default() };
        assert!(fit_mmle(&d, &KernelExpr::se(1.0, 1.0), 0.1, MeanFunction::Zero, &opts, 0).is_err());
    }
}
