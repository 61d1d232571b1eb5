//! Input-warping perturbations `k(g(x), g(x'))` with `g(x) = x + h(x)`, and
//! the regularized search for a warp that moves a functional onto a
//! decision threshold.

mod net;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use net::{Layer, WarpNet};

use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::gp::{joint_adjoint, joint_posterior, FittedGp, KernelExpr, NodePath, Points};

/// Wraps each flagged node of `k0` in a warped node sharing `net`.
///
/// Paths must exist, must not overlap (one an ancestor of another), and must
/// not point at or contain spectral nodes; `k0` must not already be warped.
pub fn warped_kernel(k0: &KernelExpr, net: &WarpNet, flags: &[NodePath]) -> Result<KernelExpr> {
    if flags.is_empty() {
        return Err(Error::Validation("at least one kernel node must be flagged for warping".into()));
    }
    if !k0.is_stationary() {
        return Err(Error::Validation("the reference kernel is already warped".into()));
    }
    for (i, p) in flags.iter().enumerate() {
        let node = k0
            .node(p)
            .ok_or_else(|| Error::Validation(format!("warp flag {} does not name a kernel node", fmt_path(p))))?;
        if node.contains_spectral() {
            return Err(Error::Validation(format!(
                "warp flag {} covers a spectral node, which cannot be warped",
                fmt_path(p)
            )));
        }
        for (j, q) in flags.iter().enumerate() {
            if i != j && q.len() >= p.len() && q[..p.len()] == p[..] {
                return Err(Error::Validation(format!(
                    "warp flags {} and {} overlap",
                    fmt_path(p),
                    fmt_path(q)
                )));
            }
        }
    }
    let mut k = k0.clone();
    for p in flags {
        let slot = k.node_mut(p).expect("checked above");
        let child = std::mem::replace(slot, KernelExpr::sum(Vec::new()));
        *slot = KernelExpr::Warped { child: Box::new(child), net: net.clone() };
    }
    k.validate(net.dim())?;
    Ok(k)
}

/// Renders a node path as `a/b/c` (`<root>` for the empty path).
pub fn fmt_path(p: &[usize]) -> String {
    if p.is_empty() {
        "<root>".into()
    } else {
        p.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("/")
    }
}

/// Parses `a/b/c` into a node path; empty or `<root>` gives the root.
pub fn parse_path(s: &str) -> Result<NodePath> {
    let s = s.trim();
    if s.is_empty() || s == "<root>" {
        return Ok(Vec::new());
    }
    s.split('/')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad node path {s:?}"))))
        .collect()
}

/// Loss value and derivatives with respect to the posterior mean and std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub d_mean: f64,
    pub d_std: f64,
}

/// Pluggable warp loss, evaluated from the latent posterior at `x*`.
pub trait WarpLoss: Send + Sync + fmt::Debug {
    fn evaluate(&self, functional: &FunctionalSpec, mean: f64, std: f64, noise_variance: f64, delta: f64) -> LossEval;
}

/// `(F*(k) - Δ)²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThresholdSquared;

impl WarpLoss for ThresholdSquared {
    fn evaluate(&self, functional: &FunctionalSpec, mean: f64, std: f64, noise_variance: f64, delta: f64) -> LossEval {
        let m = functional.from_moments(mean, std * std, noise_variance);
        let r = m.value - delta;
        LossEval { value: r * r, d_mean: 2.0 * r * m.d_mean, d_std: 2.0 * r * m.d_var * 2.0 * std }
    }
}

/// Everything that defines the warp objective apart from the net.
#[derive(Debug, Clone)]
pub struct WarpObjective {
    pub loss: Arc<dyn WarpLoss>,
    pub delta: f64,
    /// Points at which the regularizer `mean ‖h(x̃)‖²` is averaged.
    pub grid: Points,
    pub epsilon: f64,
    pub flags: Vec<NodePath>,
}

impl WarpObjective {
    /// Threshold-squared loss with the regularizer grid set to the training
    /// inputs plus `x*`.
    pub fn new(gp0: &FittedGp, functional: &FunctionalSpec, delta: f64, epsilon: f64, flags: Vec<NodePath>) -> Result<Self> {
        let grid = functional.joint_points(gp0)?;
        let o = Self { loss: Arc::new(ThresholdSquared), delta, grid, epsilon, flags };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!("warp ε must be positive, got {}", self.epsilon)));
        }
        if !self.delta.is_finite() {
            return Err(Error::Validation("threshold must be finite".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Validation("regularizer grid is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpEval {
    pub objective: f64,
    pub loss: f64,
    pub regularizer: f64,
    /// The functional under the warped kernel.
    pub f_star: f64,
}

/// Objective value for `net`.
pub fn warp_objective(gp0: &FittedGp, functional: &FunctionalSpec, obj: &WarpObjective, net: &WarpNet) -> Result<WarpEval> {
    Ok(eval_inner(gp0, functional, obj, net, false)?.0)
}

/// Objective value and gradient with respect to `net.params()`.
pub fn warp_gradient(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    obj: &WarpObjective,
    net: &WarpNet,
) -> Result<(WarpEval, Vec<f64>)> {
    let (e, g) = eval_inner(gp0, functional, obj, net, true)?;
    Ok((e, g.expect("gradient requested")))
}

fn eval_inner(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    obj: &WarpObjective,
    net: &WarpNet,
    want_grad: bool,
) -> Result<(WarpEval, Option<Vec<f64>>)> {
    let kernel = warped_kernel(gp0.kernel(), net, &obj.flags)?;
    let pts = functional.joint_points(gp0)?;
    let k_full = kernel.gram(&pts, &pts)?;
    let jp = joint_posterior(&k_full, gp0.dataset(), gp0.noise_variance(), gp0.mean())?;
    let std = jp.var.sqrt();
    let f_star = functional.from_moments(jp.mean, jp.var, gp0.noise_variance()).value;
    let loss = obj.loss.evaluate(functional, jp.mean, std, gp0.noise_variance(), obj.delta);
    let h = net.residuals(&obj.grid);
    let m = obj.grid.len() as f64;
    let regularizer = h.norm_squared() / (obj.epsilon * m);
    let eval = WarpEval { objective: loss.value + regularizer, loss: loss.value, regularizer, f_star };
    if !eval.objective.is_finite() {
        return Err(Error::Numerical("warp objective is not finite".into()));
    }
    if !want_grad {
        return Ok((eval, None));
    }
    let d_var = if std > 0.0 { loss.d_std / (2.0 * std) } else { 0.0 };
    let adj = joint_adjoint(&jp, loss.d_mean, d_var);
    let point_adj = kernel
        .warped_point_adjoint(&pts, &adj)
        .unwrap_or_else(|| DMatrix::zeros(pts.len(), pts.dim()));
    let mut grad = net.backprop(&pts, &point_adj);
    let reg_adj = h * (2.0 / (obj.epsilon * m));
    for (g, r) in grad.iter_mut().zip(net.backprop(&obj.grid, &reg_adj)) {
        *g += r;
    }
    Ok((eval, Some(grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpOptions {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Weights start as `N(0, init_scale² / fan_in)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Euclidean length of the first trial step in parameter space.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![10, 10]
}
fn default_init_scale() -> f64 {
    0.1
}
fn default_steps() -> usize {
    300
}
fn default_step_size() -> f64 {
    0.05
}
fn default_restarts() -> usize {
    4
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            init_scale: default_init_scale(),
            steps: default_steps(),
            step_size: default_step_size(),
            restarts: default_restarts(),
        }
    }
}

/// Halvings allowed when a step raises the objective.
pub const MAX_BACKOFF: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpRestart {
    pub index: usize,
    pub objective: Option<f64>,
    pub f_star: Option<f64>,
    pub iterations: usize,
    pub status: String,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WarpOutcome {
    pub net: WarpNet,
    pub eval: WarpEval,
    pub best_restart: usize,
    pub restarts: Vec<WarpRestart>,
}

/// Gradient descent on the warp objective from `opts.restarts` random
/// initializations; the restart with the lowest final objective wins (ties go
/// to the lower index). Restart `r` draws its weights from the ChaCha stream
/// `r` of `seed`.
pub fn minimize_warp(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    obj: &WarpObjective,
    opts: &WarpOptions,
    seed: u64,
) -> Result<WarpOutcome> {
    obj.validate()?;
    if opts.restarts == 0 {
        return Err(Error::Validation("restarts must be at least 1".into()));
    }
    if !(opts.step_size > 0.0 && opts.step_size.is_finite()) || !(opts.init_scale >= 0.0) {
        return Err(Error::Validation("step size must be positive and init scale nonnegative".into()));
    }
    let dim = gp0.dataset().dim();
    let runs: Vec<(Option<(WarpNet, WarpEval)>, WarpRestart)> = (0..opts.restarts)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let net = WarpNet::random(dim, &opts.hidden, opts.init_scale, &mut rng);
            descend(gp0, functional, obj, net, opts, index)
        })
        .collect();
    let mut best: Option<(usize, &WarpNet, WarpEval)> = None;
    for (i, (res, _)) in runs.iter().enumerate() {
        if let Some((n, e)) = res {
            if best.as_ref().is_none_or(|(_, _, b)| e.objective < b.objective) {
                best = Some((i, n, *e));
            }
        }
    }
    let restarts: Vec<WarpRestart> = runs.iter().map(|(_, d)| d.clone()).collect();
    let Some((best_restart, net, eval)) = best else {
        return Err(Error::Optimization(format!(
            "every warp restart failed: {}",
            restarts.iter().map(|d| d.status.clone()).collect::<Vec<_>>().join("; ")
        )));
    };
    Ok(WarpOutcome { net: net.clone(), eval, best_restart, restarts })
}

fn descend(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    obj: &WarpObjective,
    mut net: WarpNet,
    opts: &WarpOptions,
    index: usize,
) -> (Option<(WarpNet, WarpEval)>, WarpRestart) {
    let mut diag = WarpRestart { index, objective: None, f_star: None, iterations: 0, status: String::new(), trace: vec![] };
    let (mut eval, mut grad) = match warp_gradient(gp0, functional, obj, &net) {
        Ok(v) => v,
        Err(e) => {
            diag.status = format!("aborted at start: {e}");
            return (None, diag);
        }
    };
    diag.trace.push(eval.objective);
    let mut params = net.params();
    diag.status = "max-steps".into();
    while diag.iterations < opts.steps {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            diag.status = "stationary".into();
            break;
        }
        let mut eta = opts.step_size / gnorm;
        let mut accepted = None;
        for _ in 0..=MAX_BACKOFF {
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - eta * g).collect();
            let cnet = net.with_params(&cand).expect("same shape");
            match warp_gradient(gp0, functional, obj, &cnet) {
                Ok((e, g)) if e.objective <= eval.objective => {
                    accepted = Some((cand, cnet, e, g));
                    break;
                }
                _ => eta *= 0.5,
            }
        }
        let Some((cand, cnet, e, g)) = accepted else {
            diag.status = "backoff-exhausted".into();
            break;
        };
        let gain = eval.objective - e.objective;
        params = cand;
        net = cnet;
        eval = e;
        grad = g;
        diag.iterations += 1;
        diag.trace.push(eval.objective);
        if gain <= 1e-14 * (1.0 + eval.objective.abs()) {
            diag.status = "converged".into();
            break;
        }
    }
    diag.objective = Some(eval.objective);
    diag.f_star = Some(eval.f_star);
    (Some((net, eval)), diag)
}
