//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::PreprocessMode;
use crate::error::{Error, Result};
use crate::gp::{parse_kernel, FitOptions, KernelExpr, MeanFunction};
use crate::workflow::{validate_schedule, DiagnosticsConfig, EngineConfig, WorkflowOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub preprocess: PreprocessMode,
    pub model: ModelConfig,
    pub functional: FunctionalConfig,
    pub threshold: ThresholdConfig,
    pub engine: EngineConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub workflow: WorkflowOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// The built-in generator; `seed` defaults to the run seed.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        /// Keep only rows whose first input is below this value.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_before: Option<f64>,
    },
    MaunaLoa {
        path: PathBuf,
        #[serde(default = "default_date_column")]
        date_column: usize,
        #[serde(default = "default_value_column")]
        value_column: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_before: Option<f64>,
    },
}

fn default_date_column() -> usize {
    3
}
fn default_value_column() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Kernel expression (`se(1, 0.5) + matern52(1, 2)`) or a preset name:
    /// `heartrate`, `maunaloa`.
    pub kernel: String,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default)]
    pub mean: MeanFunction,
    /// Run MMLE from the template; otherwise use the template as given.
    #[serde(default = "default_true")]
    pub optimize: bool,
    #[serde(default)]
    pub fit: FitOptions,
}

fn default_noise() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

/// Starting values for the named presets.
pub fn preset_kernel(name: &str) -> Option<KernelExpr> {
    match name {
        "heartrate" => Some(KernelExpr::heart_rate(1.0, 1.0, 1.0, 1.0)),
        "maunaloa" => Some(KernelExpr::mauna_loa([66.0, 67.0, 2.4, 90.0, 1.3, 0.66, 1.2, 0.78, 0.18, 1.6 / 12.0])),
        _ => None,
    }
}

impl ModelConfig {
    pub fn template(&self) -> Result<KernelExpr> {
        match preset_kernel(self.kernel.trim()) {
            Some(k) => Ok(k),
            None => parse_kernel(&self.kernel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKindConfig {
    #[default]
    PosteriorMean,
    PosteriorQuantile,
    RelativeChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The decision changes when the functional rises to Δ.
    #[default]
    Above,
    /// The decision changes when the functional falls to Δ.
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub kind: FunctionalKindConfig,
    pub x_star: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default)]
    pub include_noise: bool,
    #[serde(default)]
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Use the unfiltered observation nearest `x*` as Δ.
    #[serde(default)]
    pub observed_at_x_star: bool,
    /// Δ is on the untransformed output scale and is mapped through the
    /// preprocessing transform.
    #[serde(default)]
    pub raw_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Explicit { values: Vec<f64> },
    /// `count` evenly spaced values from `start` to `stop`.
    Linear { start: f64, stop: f64, count: usize },
    /// `count` log-spaced values from `start` to `stop` (both positive).
    Log { start: f64, stop: f64, count: usize },
}

impl ScheduleConfig {
    pub fn values(&self) -> Result<Vec<f64>> {
        let spaced = |a: f64, b: f64, n: usize| -> Result<Vec<f64>> {
            match n {
                0 => Err(Error::Config("schedule count must be at least 1".into())),
                1 => Ok(vec![a]),
                _ => Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()),
            }
        };
        match *self {
            ScheduleConfig::Explicit { ref values } => Ok(values.clone()),
            ScheduleConfig::Linear { start, stop, count } => spaced(start, stop, count),
            ScheduleConfig::Log { start, stop, count } => {
                if !(start > 0.0 && stop > 0.0) {
                    return Err(Error::Config("log schedule bounds must be positive".into()));
                }
                Ok(spaced(start.log10(), stop.log10(), count)?.into_iter().map(|e| 10f64.powf(e)).collect())
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        c.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(c)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        match &mut self.data {
            DataConfig::Csv { path, .. } | DataConfig::MaunaLoa { path, .. } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let k = self.model.template()?;
        if !(self.model.noise_variance > 0.0 && self.model.noise_variance.is_finite()) {
            return Err(Error::Validation("noise variance must be positive".into()));
        }
        if self.functional.x_star.is_empty() || self.functional.x_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("x_star must be nonempty and finite".into()));
        }
        match self.functional.kind {
            FunctionalKindConfig::PosteriorQuantile => {
                let q = self.functional.q.ok_or_else(|| Error::Config("posterior_quantile needs q".into()))?;
                crate::gp::standard_normal_quantile(q)?;
            }
            _ if self.functional.q.is_some() => {
                return Err(Error::Config("q only applies to posterior_quantile".into()));
            }
            _ => {}
        }
        match (self.threshold.value, self.threshold.observed_at_x_star) {
            (Some(_), true) | (None, false) => {
                return Err(Error::Config("set exactly one of threshold.value and threshold.observed_at_x_star".into()))
            }
            (Some(v), false) if !v.is_finite() => return Err(Error::Validation("threshold must be finite".into())),
            _ => {}
        }
        if self.threshold.raw_scale && self.functional.kind == FunctionalKindConfig::RelativeChange {
            return Err(Error::Config("a relative-change threshold has no raw scale".into()));
        }
        let schedule = self.schedule.values()?;
        validate_schedule(&schedule, &self.engine)?;
        match &self.engine {
            EngineConfig::Warp { flags, options, crossing_tolerance } => {
                let paths = self.engine.warp_flags()?;
                if flags.is_empty() {
                    return Err(Error::Validation("warp engine needs at least one flagged node".into()));
                }
                let net = crate::warp::WarpNet::zeros(self.functional.x_star.len(), &options.hidden);
                crate::warp::warped_kernel(&k, &net, &paths)?;
                if !(0.0..1.0).contains(crossing_tolerance) {
                    return Err(Error::Validation("crossing tolerance must lie in [0, 1)".into()));
                }
            }
            EngineConfig::Spectral { grid_size, omega_max, .. } => {
                if *grid_size < 2 {
                    return Err(Error::Validation("spectral grid needs at least 2 frequencies".into()));
                }
                if omega_max.is_some_and(|w| !(w > 0.0 && w.is_finite())) {
                    return Err(Error::Validation("omega_max must be positive".into()));
                }
                if !k.is_stationary() {
                    return Err(Error::Validation("spectral engine needs a stationary kernel".into()));
                }
            }
        }
        self.diagnostics.rule.validate()?;
        if self.diagnostics.samples == 0 || self.diagnostics.n_draws == 0 {
            return Err(Error::Validation("diagnostics need at least one sample and one draw".into()));
        }
        Ok(())
    }
}
