//! Command-line front end: configuration, data ingestion and the commands
//! behind the `kernelsens` binary.

pub mod config;
pub mod data;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, Direction, FunctionalConfig, FunctionalKindConfig, RunConfig, ScheduleConfig};
pub use data::{generate_synthetic, load_csv, load_mauna_loa, preprocess, LoadedData, PreprocessMode, Transform};

use crate::diagnostics::{
    draw_grid, draw_rows, emit_draw_csv, emit_histogram_csv, frobenius_histogram, noise_matched_draws,
    render_draws_svg, render_histogram_svg, FrobeniusComparison, NoiseMatchedDraws,
};
use crate::error::{Error, Result};
use crate::functional::FunctionalSpec;
use crate::gp::{fit_mmle, laplace_hyper_posterior, Dataset, FittedGp, FittedGpRecord, KernelExpr, RestartSummary};
use crate::workflow::{
    perturb, run_workflow, sub_seed, to_precise_json, EpsilonResult, SensitivityReport, VERDICT_NON_ROBUST,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NON_ROBUST: i32 = 10;

/// Name of the environment variable holding the log filter.
pub const LOG_ENV: &str = "KERNELSENS_LOG";

#[derive(Debug, Parser)]
#[command(name = "kernelsens", version, about = "Sensitivity of Gaussian-process decisions to the choice of kernel")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write SVG renderings of the plot data.
    #[arg(long, global = true)]
    pub render_plots: bool,
    /// Overrides the configured decision direction.
    #[arg(long, global = true, value_enum)]
    pub direction: Option<Direction>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the reference GP by MMLE.
    Fit,
    /// Solve the perturbation problem at a single ε.
    Perturb {
        #[arg(long)]
        epsilon: f64,
    },
    /// Run the full ε schedule and diagnostics.
    Workflow,
    /// Compare a candidate kernel with a fitted reference GP.
    Diagnose {
        /// Fitted GP record written by `fit`.
        #[arg(long)]
        reference: PathBuf,
        /// Kernel JSON, or a report whose candidate kernel is used.
        #[arg(long)]
        candidate: PathBuf,
    },
    /// Write the synthetic dataset as CSV.
    Synth,
}

/// Parses arguments, runs the command and returns the process exit code.
/// Errors are printed to stderr as a single JSON object.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            EXIT_ERROR
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Command::Synth = cli.command {
        let seed = match (&cli.config, cli.seed) {
            (_, Some(s)) => s,
            (Some(p), None) => RunConfig::load(p)?.seed,
            (None, None) => 0,
        };
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
        write_file(&out, "synthetic.csv", &data::dataset_to_csv(&generate_synthetic(seed)))?;
        return Ok(EXIT_OK);
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.direction {
        cfg.functional.direction = d;
    }
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Fit => {
            let prep = prepare(&cfg)?;
            write_file(&out, "fit.json", &to_precise_json(&prep.fit_output())?)?;
            Ok(EXIT_OK)
        }
        Command::Perturb { epsilon } => {
            let prep = prepare(&cfg)?;
            let p = perturb(
                &prep.gp,
                &prep.functional,
                prep.delta,
                &cfg.engine,
                *epsilon,
                cfg.seed,
                None,
            )?;
            let doc = PerturbOutput {
                delta: prep.delta,
                f_star_reference: prep.functional.evaluate(&prep.gp)?,
                result: p.result,
                kernel: p.kernel,
            };
            write_file(&out, "perturb.json", &to_precise_json(&doc)?)?;
            Ok(EXIT_OK)
        }
        Command::Workflow => {
            let report = workflow(&cfg, &out, cli.render_plots)?;
            Ok(exit_code(&report.verdict))
        }
        Command::Diagnose { reference, candidate } => {
            diagnose(&cfg, reference, candidate, &out, cli.render_plots)?;
            Ok(EXIT_OK)
        }
        Command::Synth => unreachable!("handled above"),
    }
}

pub fn exit_code(verdict: &str) -> i32 {
    if verdict == VERDICT_NON_ROBUST {
        EXIT_NON_ROBUST
    } else {
        EXIT_OK
    }
}

/// Everything derived from the config before the perturbation search.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub loaded: LoadedData,
    /// Training data on the model scale.
    pub train: Dataset,
    pub transform: Transform,
    pub gp: FittedGp,
    pub fit_restarts: Vec<RestartSummary>,
    pub functional: FunctionalSpec,
    /// Δ on the model scale, sign-flipped for the `below` direction.
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub gp: FittedGpRecord,
    pub transform: Transform,
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub restarts: Vec<RestartSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbOutput {
    pub delta: f64,
    pub f_star_reference: f64,
    pub result: EpsilonResult,
    pub kernel: KernelExpr,
}

impl Prepared {
    pub fn fit_output(&self) -> FitOutput {
        FitOutput {
            gp: self.gp.to_record(),
            transform: self.transform,
            rows_read: self.loaded.rows_read,
            rows_dropped: self.loaded.dropped,
            restarts: self.fit_restarts.clone(),
        }
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<(LoadedData, Dataset)> {
    let (loaded, cutoff) = match &cfg.data {
        DataConfig::Synthetic { seed } => {
            let d = generate_synthetic(seed.unwrap_or(cfg.seed));
            let n = d.len();
            (LoadedData { dataset: d, rows_read: n, dropped: 0 }, None)
        }
        DataConfig::Csv { path, train_before } => (load_csv(path)?, *train_before),
        DataConfig::MaunaLoa { path, date_column, value_column, train_before } => {
            (load_mauna_loa(path, *date_column, *value_column)?, *train_before)
        }
    };
    if loaded.dropped > 0 {
        log::info!("read {} rows, dropped {} with missing values", loaded.rows_read, loaded.dropped);
    }
    let train = match cutoff {
        Some(c) => data::filter_before(&loaded.dataset, c)?,
        None => loaded.dataset.clone(),
    };
    Ok((loaded, train))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (loaded, raw_train) = load_data(cfg)?;
    let (train, transform) = preprocess(&raw_train, cfg.preprocess)?;
    let template = cfg.model.template()?;
    let (gp, fit_restarts) = if cfg.model.optimize {
        let fit = fit_mmle(&train, &template, cfg.model.noise_variance, cfg.model.mean, &cfg.model.fit, cfg.seed)?;
        (fit.gp, fit.restarts)
    } else {
        (FittedGp::new(train.clone(), template, cfg.model.noise_variance, cfg.model.mean)?, Vec::new())
    };
    let f = &cfg.functional;
    let mut functional = match f.kind {
        FunctionalKindConfig::PosteriorMean => FunctionalSpec::posterior_mean(f.x_star.clone()),
        FunctionalKindConfig::PosteriorQuantile => {
            FunctionalSpec::quantile(f.x_star.clone(), f.q.expect("validated"), f.include_noise)?
        }
        FunctionalKindConfig::RelativeChange => FunctionalSpec::relative_change(&gp, f.x_star.clone())?,
    };
    let mut delta = match cfg.threshold.value {
        Some(v) if cfg.threshold.raw_scale => transform.forward(v)?,
        Some(v) => v,
        None => transform.forward(data::observed_near(&loaded.dataset, &f.x_star)?)?,
    };
    if f.direction == Direction::Below {
        functional = functional.negated();
        delta = -delta;
    }
    Ok(Prepared { loaded, train, transform, gp, fit_restarts, functional, delta })
}

/// Runs the workflow for `cfg` and writes the report, plot data and fit to `out`.
pub fn workflow(cfg: &RunConfig, out: &Path, render_plots: bool) -> Result<SensitivityReport> {
    let prep = prepare(cfg)?;
    let schedule = cfg.schedule.values()?;
    let outcome = run_workflow(
        &prep.gp,
        &prep.functional,
        prep.delta,
        &cfg.engine,
        &schedule,
        &cfg.diagnostics,
        &cfg.workflow,
        cfg.seed,
    )?;
    let mut report = outcome.report;
    report.config = Some(serde_json::to_value(cfg)?);
    fs::create_dir_all(out)?;
    write_file(out, "fit.json", &to_precise_json(&prep.fit_output())?)?;
    if let Some(d) = &outcome.draws {
        write_plot_data(out, d, &report.comparison, render_plots)?;
        report.draw_report = Some("draws.csv".into());
    } else {
        write_file(out, "histogram.csv", &emit_histogram_csv(&report.comparison))?;
    }
    write_file(out, "report.json", &to_precise_json(&report)?)?;
    Ok(report)
}

fn write_plot_data(out: &Path, d: &NoiseMatchedDraws, c: &FrobeniusComparison, render: bool) -> Result<()> {
    write_file(out, "draws.csv", &emit_draw_csv(&draw_rows(d)?))?;
    write_file(out, "histogram.csv", &emit_histogram_csv(c))?;
    if render {
        write_file(out, "draws.svg", &render_draws_svg(d)?)?;
        write_file(out, "histogram.svg", &render_histogram_svg(c, 30))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseOutput {
    pub comparison: FrobeniusComparison,
    pub verdict: String,
    pub laplace_warnings: Vec<String>,
}

/// Diagnostics for a stored reference fit and candidate kernel.
pub fn diagnose(cfg: &RunConfig, reference: &Path, candidate: &Path, out: &Path, render: bool) -> Result<DiagnoseOutput> {
    let text = fs::read_to_string(reference)?;
    let record: FittedGpRecord = match serde_json::from_str::<FitOutput>(&text) {
        Ok(f) => f.gp,
        Err(_) => serde_json::from_str(&text)?,
    };
    let gp = FittedGp::from_record(record)?;
    let text = fs::read_to_string(candidate)?;
    let k1: KernelExpr = match serde_json::from_str::<SensitivityReport>(&text) {
        Ok(r) => r.candidate.kernel,
        Err(_) => serde_json::from_str(&text)?,
    };
    k1.validate(gp.dataset().dim())?;
    let diag = &cfg.diagnostics;
    let hp = laplace_hyper_posterior(&gp, diag.laplace_noise)?;
    let comparison = frobenius_histogram(&gp, &k1, &hp, diag.samples, sub_seed(cfg.seed, 1), diag.rule)?;
    fs::create_dir_all(out)?;
    if gp.dataset().dim() == 1 {
        let pts = draw_grid(&gp.dataset().x, &cfg.functional.x_star, diag.grid_points)?;
        let kernels = [("k0".to_string(), gp.kernel().clone()), ("k1".to_string(), k1)];
        let d = noise_matched_draws(&kernels, &pts, diag.n_draws, sub_seed(cfg.seed, 2))?;
        write_plot_data(out, &d, &comparison, render)?;
    } else {
        write_file(out, "histogram.csv", &emit_histogram_csv(&comparison))?;
    }
    let doc = DiagnoseOutput { verdict: comparison.verdict().into(), comparison, laplace_warnings: hp.warnings };
    write_file(out, "comparison.json", &to_precise_json(&doc)?)?;
    Ok(doc)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}
