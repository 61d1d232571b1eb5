//! The ε-expansion loop: re-solve the perturbation problem on a growing
//! neighborhood until the decision changes or the schedule runs out, then run
//! the interchangeability diagnostics and assemble a verdict.

use std::io;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    draw_grid, frobenius_histogram, noise_matched_draws, relative_frobenius, FrobeniusComparison, NoiseMatchedDraws,
    VerdictRule,
    DEFAULT_DRAW_GRID, DEFAULT_SAMPLES,
};
use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::gp::{laplace_hyper_posterior, FittedGp, KernelExpr, NodePath};
use crate::spectral::{
    default_grid, density_of_kernel, kernel_from_density, maximize_spectral, uniform_frequencies, AscentOptions,
    RestartDiagnostic, SpectralBox, SpectralGrid, DEFAULT_GRID_SIZE,
};
use crate::warp::{minimize_warp, warped_kernel, WarpNet, WarpObjective, WarpOptions, WarpRestart};

pub const SCHEMA_VERSION: u32 = 1;

/// Reconstruction error above which the report warns about the spectral grid.
pub const RECONSTRUCTION_WARN: f64 = 1e-2;

pub const VERDICT_NON_ROBUST: &str = "non-robust";
pub const VERDICT_FAILED: &str = "failed to find non-robustness";
pub const VERDICT_UNCHANGED: &str = "decision not changed within schedule";

/// Tolerance in [`assemble_verdict`] for a best F* that falls slightly short
/// of Δ due to optimizer noise.
pub const MONOTONE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineConfig {
    Spectral {
        /// Number of grid frequencies.
        #[serde(default = "default_grid_size")]
        grid_size: usize,
        /// Overrides the tail-threshold rule for the top frequency.
        #[serde(default)]
        omega_max: Option<f64>,
        #[serde(default)]
        ascent: AscentOptions,
    },
    Warp {
        #[serde(default)]
        options: WarpOptions,
        /// Kernel nodes whose inputs are warped, as `a/b/c` paths.
        flags: Vec<String>,
        /// A run counts as reaching Δ once `F ≥ Δ − tol·|Δ − F(k₀)|`; the
        /// squared loss approaches Δ but never passes it.
        #[serde(default = "default_crossing_tolerance")]
        crossing_tolerance: f64,
    },
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}
fn default_crossing_tolerance() -> f64 {
    0.01
}

impl EngineConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EngineConfig::Spectral { .. } => "spectral",
            EngineConfig::Warp { .. } => "warp",
        }
    }

    fn crossing_tolerance(&self) -> f64 {
        match self {
            EngineConfig::Spectral { .. } => 0.0,
            EngineConfig::Warp { crossing_tolerance, .. } => *crossing_tolerance,
        }
    }

    pub fn warp_flags(&self) -> Result<Vec<NodePath>> {
        match self {
            EngineConfig::Warp { flags, .. } => flags.iter().map(|f| crate::warp::parse_path(f)).collect(),
            EngineConfig::Spectral { .. } => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Hyperparameter samples from the Laplace approximation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub rule: VerdictRule,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    /// Uniform points in the prior-draw grid (training inputs are added).
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Include the noise variance in the Laplace approximation.
    #[serde(default = "default_true")]
    pub laplace_noise: bool,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_draws() -> usize {
    5
}
fn default_grid_points() -> usize {
    DEFAULT_DRAW_GRID
}
fn default_true() -> bool {
    true
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            rule: VerdictRule::Max,
            n_draws: default_draws(),
            grid_points: default_grid_points(),
            laplace_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RestartLog {
    Spectral(Vec<RestartDiagnostic>),
    Warp(Vec<WarpRestart>),
}

/// Engine result at one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonResult {
    pub epsilon: f64,
    pub best_f_star: f64,
    pub best_restart: usize,
    pub restarts: RestartLog,
}

/// Engine optimum at one ε, with the kernel it corresponds to.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub result: EpsilonResult,
    pub kernel: KernelExpr,
    /// Spectral engine: the optimal density values (warm start for the next ε).
    pub density: Option<Vec<f64>>,
    pub net: Option<WarpNet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateKernel {
    pub epsilon: f64,
    pub f_star: f64,
    pub reaches_threshold: bool,
    pub kernel: KernelExpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub from_epsilon: f64,
    pub to_epsilon: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema_version: u32,
    pub verdict: String,
    pub delta: f64,
    pub functional: FunctionalSpec,
    pub f_star_reference: f64,
    pub engine: String,
    pub crossing_tolerance: f64,
    pub trace: Vec<EpsilonResult>,
    /// Index into `trace` of the first ε whose optimum reaches Δ.
    pub crossed_at: Option<usize>,
    pub candidate: CandidateKernel,
    pub comparison: FrobeniusComparison,
    pub laplace_warnings: Vec<String>,
    pub monotonicity_violations: Vec<MonotonicityViolation>,
    /// File name of the prior-draw plot data, when written.
    pub draw_report: Option<String>,
    pub notes: Vec<String>,
    /// Relative Frobenius error of the reconstructed reference kernel on the
    /// training inputs (spectral engine only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_error: Option<f64>,
    /// The run configuration, echoed by the command-line front end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct WorkflowOutcome {
    pub report: SensitivityReport,
    pub draws: Option<NoiseMatchedDraws>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowOptions {
    /// Stop at the first ε whose optimum reaches Δ.
    #[serde(default = "default_true")]
    pub stop_at_crossing: bool,
}

impl Default for WorkflowOptions {
    fn default() -> Self {
        Self { stop_at_crossing: true }
    }
}

/// Independent seed for a named sub-task.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_LAPLACE: u64 = 1;
const STREAM_DRAWS: u64 = 2;

pub fn validate_schedule(schedule: &[f64], engine: &EngineConfig) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Validation("ε schedule is empty".into()));
    }
    if let Some(e) = schedule.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::Validation(format!("ε must be finite and nonnegative, got {e}")));
    }
    if matches!(engine, EngineConfig::Warp { .. }) && schedule.iter().any(|e| *e <= 0.0) {
        return Err(Error::Validation("warp ε must be positive".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("ε schedule must be strictly increasing".into()));
    }
    Ok(())
}

/// Reference spectral grid for `gp0` under a spectral engine config.
pub fn reference_grid(gp0: &FittedGp, engine: &EngineConfig) -> Result<SpectralGrid> {
    let EngineConfig::Spectral { grid_size, omega_max, .. } = engine else {
        return Err(Error::Validation("not a spectral engine".into()));
    };
    let freqs = match omega_max {
        Some(w) => uniform_frequencies(*w, *grid_size)?,
        None => default_grid(gp0.kernel(), *grid_size)?,
    };
    density_of_kernel(gp0.kernel(), &freqs)
}

/// Solves the engine's perturbation problem at a single ε.
pub fn perturb(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    delta: f64,
    engine: &EngineConfig,
    epsilon: f64,
    seed: u64,
    warm_start: Option<&[f64]>,
) -> Result<Perturbation> {
    match engine {
        EngineConfig::Spectral { ascent, .. } => {
            let reference = reference_grid(gp0, engine)?;
            let box_ = SpectralBox::new(reference, epsilon)?;
            let out = maximize_spectral(gp0, functional, &box_, ascent, seed, warm_start)?;
            let density = out.grid.density().to_vec();
            Ok(Perturbation {
                result: EpsilonResult {
                    epsilon,
                    best_f_star: out.f_star,
                    best_restart: out.best_restart,
                    restarts: RestartLog::Spectral(out.restarts),
                },
                kernel: kernel_from_density(out.grid)?,
                density: Some(density),
                net: None,
            })
        }
        EngineConfig::Warp { options, .. } => {
            let flags = engine.warp_flags()?;
            let obj = WarpObjective::new(gp0, functional, delta, epsilon, flags.clone())?;
            let out = minimize_warp(gp0, functional, &obj, options, seed)?;
            Ok(Perturbation {
                result: EpsilonResult {
                    epsilon,
                    best_f_star: out.eval.f_star,
                    best_restart: out.best_restart,
                    restarts: RestartLog::Warp(out.restarts),
                },
                kernel: warped_kernel(gp0.kernel(), &out.net, &flags)?,
                density: None,
                net: Some(out.net),
            })
        }
    }
}

/// True when `f` counts as reaching `delta`.
pub fn reaches(f: f64, delta: f64, f_ref: f64, tolerance: f64) -> bool {
    f >= delta - tolerance * (delta - f_ref).abs()
}

/// Verdict from the best-F* trace, the threshold and the diagnostic call.
/// Returns the index of the first crossing ε and the verdict string.
pub fn assemble_verdict(
    best_f_star: &[f64],
    delta: f64,
    f_ref: f64,
    tolerance: f64,
    interchangeable: bool,
) -> (Option<usize>, &'static str) {
    let crossed = best_f_star.iter().position(|f| reaches(*f, delta, f_ref, tolerance));
    let verdict = match (crossed.is_some(), interchangeable) {
        (true, true) => VERDICT_NON_ROBUST,
        (true, false) | (false, false) => VERDICT_FAILED,
        (false, true) => VERDICT_UNCHANGED,
    };
    (crossed, verdict)
}

/// Recomputes the verdict of a stored report.
pub fn reassess(report: &SensitivityReport) -> (Option<usize>, &'static str) {
    let trace: Vec<f64> = report.trace.iter().map(|t| t.best_f_star).collect();
    assemble_verdict(
        &trace,
        report.delta,
        report.f_star_reference,
        report.crossing_tolerance,
        report.comparison.interchangeable,
    )
}

/// Consecutive pairs of the trace where best F* drops by more than
/// [`MONOTONE_SLACK`].
pub fn monotonicity_violations(trace: &[EpsilonResult]) -> Vec<MonotonicityViolation> {
    trace
        .windows(2)
        .filter(|w| w[1].best_f_star < w[0].best_f_star - MONOTONE_SLACK)
        .map(|w| MonotonicityViolation {
            from_epsilon: w[0].epsilon,
            to_epsilon: w[1].epsilon,
            drop: w[0].best_f_star - w[1].best_f_star,
        })
        .collect()
}

/// Runs the full ε loop and the diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn run_workflow(
    gp0: &FittedGp,
    functional: &FunctionalSpec,
    delta: f64,
    engine: &EngineConfig,
    schedule: &[f64],
    diagnostics: &DiagnosticsConfig,
    options: &WorkflowOptions,
    seed: u64,
) -> Result<WorkflowOutcome> {
    functional.validate()?;
    validate_schedule(schedule, engine)?;
    if diagnostics.samples == 0 || diagnostics.n_draws == 0 {
        return Err(Error::Validation("diagnostics need at least one sample and one draw".into()));
    }
    let f_ref = functional.evaluate(gp0)?;
    if f_ref >= delta {
        return Err(Error::Precondition(format!(
            "F*(k0) = {f_ref} already reaches the threshold {delta}; flip the decision direction \
             (maximize -F* against -Δ) to search the other side"
        )));
    }
    let tol = engine.crossing_tolerance();
    let reconstruction_error = match engine {
        EngineConfig::Spectral { .. } => {
            let x = &gp0.dataset().x;
            let k_rec = kernel_from_density(reference_grid(gp0, engine)?)?;
            Some(relative_frobenius(&k_rec.gram_sym(x)?, &gp0.kernel().gram_sym(x)?)?)
        }
        EngineConfig::Warp { .. } => None,
    };
    if let Some(e) = reconstruction_error.filter(|e| *e > RECONSTRUCTION_WARN) {
        log::warn!("the spectral grid reproduces k0 with relative Frobenius error {e}; widen or refine the grid");
    }

    let mut trace = Vec::with_capacity(schedule.len());
    let mut last: Option<Perturbation> = None;
    let mut crossing: Option<Perturbation> = None;
    for &eps in schedule {
        let warm = last.as_ref().and_then(|p| p.density.as_deref());
        let p = perturb(gp0, functional, delta, engine, eps, seed, warm)?;
        log::info!("ε = {eps}: best F* = {}", p.result.best_f_star);
        trace.push(p.result.clone());
        if crossing.is_none() && reaches(p.result.best_f_star, delta, f_ref, tol) {
            crossing = Some(p.clone());
            if options.stop_at_crossing {
                last = Some(p);
                break;
            }
        }
        last = Some(p);
    }
    let chosen = crossing.or(last).expect("schedule is nonempty");
    let violations = monotonicity_violations(&trace);
    for v in &violations {
        log::warn!(
            "best F* dropped by {} from ε = {} to ε = {}; the optimizer missed a better point",
            v.drop,
            v.from_epsilon,
            v.to_epsilon
        );
    }

    let hp = laplace_hyper_posterior(gp0, diagnostics.laplace_noise)?;
    let comparison = frobenius_histogram(
        gp0,
        &chosen.kernel,
        &hp,
        diagnostics.samples,
        sub_seed(seed, STREAM_LAPLACE),
        diagnostics.rule,
    )?;

    let draws = if gp0.dataset().dim() == 1 {
        let pts = draw_grid(&gp0.dataset().x, &functional.x_star, diagnostics.grid_points)?;
        let kernels = [("k0".to_string(), gp0.kernel().clone()), ("k1".to_string(), chosen.kernel.clone())];
        Some(noise_matched_draws(&kernels, &pts, diagnostics.n_draws, sub_seed(seed, STREAM_DRAWS))?)
    } else {
        None
    };

    let best: Vec<f64> = trace.iter().map(|t| t.best_f_star).collect();
    let (crossed_at, verdict) = assemble_verdict(&best, delta, f_ref, tol, comparison.interchangeable);
    let mut notes = vec![
        "interchangeability is decided by the Gram-matrix rule; the analyst may override it after \
         inspecting the noise-matched prior draws"
            .to_string(),
    ];
    if let Some(e) = reconstruction_error.filter(|e| *e > RECONSTRUCTION_WARN) {
        notes.push(format!(
            "the spectral grid reproduces k0 with relative Frobenius error {e:.3e}; increase grid_size or adjust omega_max"
        ));
    }
    if draws.is_none() {
        notes.push("prior draws are not plotted for inputs with more than one dimension".into());
    }
    let report = SensitivityReport {
        schema_version: SCHEMA_VERSION,
        verdict: verdict.to_string(),
        delta,
        functional: functional.clone(),
        f_star_reference: f_ref,
        engine: engine.name().to_string(),
        crossing_tolerance: tol,
        candidate: CandidateKernel {
            epsilon: chosen.result.epsilon,
            f_star: chosen.result.best_f_star,
            reaches_threshold: crossed_at.is_some(),
            kernel: chosen.kernel,
        },
        trace,
        crossed_at,
        comparison,
        laplace_warnings: hp.warnings.clone(),
        monotonicity_violations: violations,
        draw_report: None,
        notes,
        reconstruction_error,
        config: None,
    };
    Ok(WorkflowOutcome { report, draws })
}

/// JSON formatter that writes every float with 17 significant digits.
pub struct PreciseFormatter<'a> {
    inner: serde_json::ser::PrettyFormatter<'a>,
}

impl Default for PreciseFormatter<'_> {
    fn default() -> Self {
        Self { inner: serde_json::ser::PrettyFormatter::new() }
    }
}

impl serde_json::ser::Formatter for PreciseFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Pretty JSON with 17-significant-digit floats.
pub fn to_precise_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
