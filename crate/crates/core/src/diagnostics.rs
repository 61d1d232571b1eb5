//! Interchangeability diagnostics: noise-matched prior draws and the
//! relative-Frobenius comparison of Gram matrices against hyperparameter
//! uncertainty.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{sample_hyperparameters, FittedGp, HyperPosterior, KernelExpr, Points};
use crate::linalg::{cholesky_jittered, frobenius};

pub const DEFAULT_SAMPLES: usize = 500;
pub const DEFAULT_DRAW_GRID: usize = 200;

/// Prior draws from several kernels sharing one standard-normal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMatchedDraws {
    pub points: Points,
    pub labels: Vec<String>,
    /// `n_points × n_draws`, shared by every kernel.
    pub z: DMatrix<f64>,
    /// One `n_points × n_draws` matrix per kernel.
    pub draws: Vec<DMatrix<f64>>,
    /// `3·√k(x, x)` of the first kernel at each point.
    pub band_half_width: Vec<f64>,
}

/// Standard-normal matrix used for every kernel's draws.
pub fn shared_normals(n_points: usize, n_draws: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // column-major fill: draw 0 first, then draw 1, ...
    DMatrix::from_fn(n_points, n_draws, |_, _| StandardNormal.sample(&mut rng))
}

/// `L·z` for each kernel, with `LLᵀ = K(points) + jitter`.
pub fn noise_matched_draws(
    kernels: &[(String, KernelExpr)],
    points: &Points,
    n_draws: usize,
    seed: u64,
) -> Result<NoiseMatchedDraws> {
    if n_draws == 0 {
        return Err(Error::Validation("need at least one draw".into()));
    }
    let mut grams = Vec::with_capacity(kernels.len());
    for (label, k) in kernels {
        grams.push((label.clone(), k.gram_sym(points).map_err(|e| name_error(label, e))?));
    }
    draws_from_grams(&grams, points, shared_normals(points.len(), n_draws, seed))
}

/// Same as [`noise_matched_draws`] for precomputed Gram matrices and an
/// injected standard-normal matrix.
pub fn draws_from_grams(grams: &[(String, DMatrix<f64>)], points: &Points, z: DMatrix<f64>) -> Result<NoiseMatchedDraws> {
    if grams.is_empty() {
        return Err(Error::Validation("need at least one kernel".into()));
    }
    if z.nrows() != points.len() {
        return Err(Error::Input(format!("normal matrix has {} rows for {} points", z.nrows(), points.len())));
    }
    let mut draws = Vec::with_capacity(grams.len());
    for (label, k) in grams {
        if k.shape() != (points.len(), points.len()) {
            return Err(Error::Input(format!("Gram matrix of {label} has the wrong shape")));
        }
        let (chol, _) = cholesky_jittered(k).map_err(|e| name_error(label, e))?;
        draws.push(chol.l() * &z);
    }
    let band_half_width = grams[0].1.diagonal().iter().map(|v| 3.0 * v.max(0.0).sqrt()).collect();
    Ok(NoiseMatchedDraws {
        points: points.clone(),
        labels: grams.iter().map(|(l, _)| l.clone()).collect(),
        z,
        draws,
        band_half_width,
    })
}

fn name_error(label: &str, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("kernel {label}: {m}")),
        other => other,
    }
}

/// Plotting grid: `n` uniform points over `[min X, max(x*, max X)]` merged
/// with the training inputs, sorted. 1-D only.
pub fn draw_grid(data_x: &Points, x_star: &[f64], n: usize) -> Result<Points> {
    if data_x.dim() != 1 || x_star.len() != 1 {
        return Err(Error::Unsupported("prior-draw plots need 1-D inputs".into()));
    }
    let xs = data_x.as_slice();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min).min(x_star[0]);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(x_star[0]);
    let mut all: Vec<f64> = xs.to_vec();
    if n == 1 {
        all.push(lo);
    } else {
        all.extend((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64));
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    Points::from_scalars(&all)
}

/// `‖A − B‖_F / ‖B‖_F`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let nb = frobenius(b);
    if !(nb > 0.0) {
        return Err(Error::Validation("reference matrix has zero Frobenius norm".into()));
    }
    Ok(frobenius(&(a - b)) / nb)
}

/// When the candidate counts as "to the right of" the sample histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum VerdictRule {
    /// Candidate above the largest sample.
    #[default]
    Max,
    /// Candidate above the empirical `q`-quantile of the samples.
    Quantile { q: f64 },
}


impl VerdictRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            VerdictRule::Quantile { q } if !(0.0..=1.0).contains(&q) => {
                Err(Error::Validation(format!("verdict quantile must lie in [0, 1], got {q}")))
            }
            _ => Ok(()),
        }
    }

    /// Threshold the candidate is compared against.
    pub fn threshold(&self, samples: &[f64]) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        match *self {
            VerdictRule::Max => *s.last().expect("nonempty samples"),
            VerdictRule::Quantile { q } => empirical_quantile(&s, q),
        }
    }
}

/// Linear-interpolation empirical quantile of sorted values.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrobeniusComparison {
    pub reference_norm: f64,
    pub candidate: f64,
    /// One statistic per hyperparameter sample, in sample order.
    pub samples: Vec<f64>,
    pub rule: VerdictRule,
    pub threshold: f64,
    pub interchangeable: bool,
}

impl FrobeniusComparison {
    pub fn verdict(&self) -> &'static str {
        if self.interchangeable {
            "interchangeable"
        } else {
            "not interchangeable"
        }
    }
}

/// Compares `k1` with `k0 = gp0.kernel()` on the training inputs against
/// `count` kernels of the same form as `k0` with hyperparameters drawn from
/// the Laplace approximation `hp`.
pub fn frobenius_histogram(
    gp0: &FittedGp,
    k1: &KernelExpr,
    hp: &HyperPosterior,
    count: usize,
    seed: u64,
    rule: VerdictRule,
) -> Result<FrobeniusComparison> {
    rule.validate()?;
    let x = &gp0.dataset().x;
    let k0 = gp0.kernel().gram_sym(x)?;
    let candidate = relative_frobenius(&k1.gram_sym(x)?, &k0)?;
    let thetas = sample_hyperparameters(hp, count, seed)?;
    let samples = thetas
        .par_iter()
        .map(|t| relative_frobenius(&hp.kernel_at(t)?.gram_sym(x)?, &k0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(comparison_from_samples(frobenius(&k0), candidate, samples, rule))
}

/// Applies the verdict rule to precomputed statistics.
pub fn comparison_from_samples(reference_norm: f64, candidate: f64, samples: Vec<f64>, rule: VerdictRule) -> FrobeniusComparison {
    let threshold = rule.threshold(&samples);
    FrobeniusComparison { reference_norm, candidate, samples, rule, threshold, interchangeable: candidate <= threshold }
}

/// One row of a plot-data table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub point: f64,
    pub index: usize,
    pub value: f64,
    pub series: String,
}

pub const DRAW_HEADER: &str = "point,index,value,series";
pub const HISTOGRAM_HEADER: &str = "index,value,series";

/// Fixed 17-significant-digit rendering used in every emitted artifact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Draw series (`<label>` per kernel, indexed by draw) followed by the band
/// of the first kernel (`band_lower`, `band_upper`, index 0).
pub fn draw_rows(d: &NoiseMatchedDraws) -> Result<Vec<PlotRow>> {
    if d.points.dim() != 1 {
        return Err(Error::Unsupported(format!("plot data needs 1-D inputs, got D = {}", d.points.dim())));
    }
    let xs = d.points.as_slice();
    let mut rows = Vec::new();
    for (label, m) in d.labels.iter().zip(&d.draws) {
        for j in 0..m.ncols() {
            for (i, &x) in xs.iter().enumerate() {
                rows.push(PlotRow { point: x, index: j, value: m[(i, j)], series: label.clone() });
            }
        }
    }
    for (tag, sign) in [("band_lower", -1.0), ("band_upper", 1.0)] {
        for (i, &x) in xs.iter().enumerate() {
            rows.push(PlotRow { point: x, index: 0, value: sign * d.band_half_width[i], series: tag.into() });
        }
    }
    Ok(rows)
}

pub fn emit_draw_csv(rows: &[PlotRow]) -> String {
    let mut out = String::from(DRAW_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", fmt_f64(r.point), r.index, fmt_f64(r.value), r.series);
    }
    out
}

pub fn parse_draw_csv(text: &str) -> Result<Vec<PlotRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DRAW_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header {DRAW_HEADER:?}") }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            Ok(PlotRow {
                point: f[0].parse().map_err(|_| bad("bad point"))?,
                index: f[1].parse().map_err(|_| bad("bad index"))?,
                value: f[2].parse().map_err(|_| bad("bad value"))?,
                series: f[3].to_string(),
            })
        })
        .collect()
}

/// Sample statistics (`sample`) then the candidate (`candidate`, index 0).
pub fn emit_histogram_csv(c: &FrobeniusComparison) -> String {
    let mut out = String::from(HISTOGRAM_HEADER);
    out.push('\n');
    for (i, v) in c.samples.iter().enumerate() {
        let _ = writeln!(out, "{i},{},sample", fmt_f64(*v));
    }
    let _ = writeln!(out, "0,{},candidate", fmt_f64(c.candidate));
    out
}

/// Minimal SVG rendering of the draws (band shaded) for visual inspection.
pub fn render_draws_svg(d: &NoiseMatchedDraws) -> Result<String> {
    let rows = draw_rows(d)?;
    let (w, h, pad) = (800.0, 400.0, 40.0);
    let xs = d.points.as_slice();
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &rows {
        y0 = y0.min(r.value);
        y1 = y1.max(r.value);
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(f64::MIN_POSITIVE) * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let mut band = String::new();
    for (i, &x) in xs.iter().enumerate() {
        let _ = write!(band, "{:.2},{:.2} ", sx(x), sy(d.band_half_width[i]));
    }
    for (i, &x) in xs.iter().enumerate().rev() {
        let _ = write!(band, "{:.2},{:.2} ", sx(x), sy(-d.band_half_width[i]));
    }
    let _ = writeln!(s, "<polygon points=\"{}\" fill=\"#ddd\"/>", band.trim_end());
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (k, m) in d.draws.iter().enumerate() {
        let c = colors[k % colors.len()];
        for j in 0..m.ncols() {
            let pts: Vec<String> = xs.iter().enumerate().map(|(i, &x)| format!("{:.2},{:.2}", sx(x), sy(m[(i, j)]))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"1\"/>", pts.join(" "));
        }
    }
    for (k, l) in d.labels.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\" font-size=\"12\">{l}</text>",
            pad + 60.0 * k as f64,
            pad / 2.0,
            colors[k % colors.len()]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Histogram of the sample statistics with the candidate marked.
pub fn render_histogram_svg(c: &FrobeniusComparison, bins: usize) -> String {
    let (w, h, pad) = (600.0, 300.0, 30.0);
    let bins = bins.max(1);
    let hi = c.samples.iter().copied().fold(c.candidate, f64::max).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for v in &c.samples {
        counts[((v / hi * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let cmax = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bw = (w - 2.0 * pad) / bins as f64;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    for (i, &n) in counts.iter().enumerate() {
        let bh = n as f64 / cmax * (h - 2.0 * pad);
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f77b4\"/>",
            pad + i as f64 * bw,
            h - pad - bh,
            bw,
            bh
        );
    }
    let cx = pad + c.candidate / hi * (w - 2.0 * pad);
    let _ = writeln!(s, "<line x1=\"{cx:.2}\" y1=\"{pad}\" x2=\"{cx:.2}\" y2=\"{}\" stroke=\"#d62728\" stroke-width=\"2\"/>", h - pad);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_mmle, laplace_hyper_posterior, Dataset, FitOptions, MeanFunction};

    #[test]
    fn relative_frobenius_basics() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.4, 2.0, 0.1, 0.0, 0.5, 1.5]);
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, -0.2, 0.5, 2.2, 0.0, 0.3, 0.4, 1.1]);
        assert_eq!(relative_frobenius(&b, &b).unwrap(), 0.0);
        assert!((relative_frobenius(&(&b * 2.0), &b).unwrap() - 1.0).abs() < 1e-15);
        let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        assert!((relative_frobenius(&a, &b).unwrap() - num / den).abs() < 1e-15);
        assert!(relative_frobenius(&a, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn identical_kernels_give_identical_draws() {
        let pts = Points::from_scalars(&[0.0, 0.3, 0.9, 1.4]).unwrap();
        let k = KernelExpr::se(1.0, 0.7);
        let d = noise_matched_draws(&[("k0".into(), k.clone()), ("k1".into(), k)], &pts, 3, 5).unwrap();
        assert_eq!(d.draws[0], d.draws[1]);
        assert!((d.band_half_width[2] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_gram_returns_normals() {
        let pts = Points::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
        let z = shared_normals(3, 4, 8);
        let d = draws_from_grams(&[("white".into(), DMatrix::identity(3, 3))], &pts, z.clone()).unwrap();
        assert_eq!(d.draws[0], z);
    }

    #[test]
    fn draw_covariance_matches_gram() {
        let pts = Points::from_scalars(&[0.0, 0.5, 1.0, 1.5, 2.0]).unwrap();
        let k = KernelExpr::se(1.0, 1.0);
        let n = 100_000;
        let d = noise_matched_draws(&[("k".into(), k.clone())], &pts, n, 21).unwrap();
        let emp = &d.draws[0] * d.draws[0].transpose() / n as f64;
        let gram = k.gram_sym(&pts).unwrap();
        assert!(frobenius(&(emp - gram)) < 0.05);
    }

    #[test]
    fn draw_csv_round_trip_and_band() {
        let pts = Points::from_scalars(&[0.0, 0.4, 1.3]).unwrap();
        let d = noise_matched_draws(&[("k0".into(), KernelExpr::se(2.0, 0.5))], &pts, 2, 1).unwrap();
        let rows = draw_rows(&d).unwrap();
        assert_eq!(parse_draw_csv(&emit_draw_csv(&rows)).unwrap(), rows);
        let upper: Vec<_> = rows.iter().filter(|r| r.series == "band_upper").collect();
        assert!(upper.iter().all(|r| (r.value - 6.0).abs() < 1e-14));
        let two_d = Points::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let d2 = noise_matched_draws(&[("k".into(), KernelExpr::se(1.0, 1.0))], &two_d, 1, 0).unwrap();
        assert!(matches!(draw_rows(&d2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn verdict_rules() {
        let s = vec![0.1, 0.4, 0.2, 0.3];
        assert!(comparison_from_samples(1.0, 0.4, s.clone(), VerdictRule::Max).interchangeable);
        assert!(!comparison_from_samples(1.0, 0.41, s.clone(), VerdictRule::Max).interchangeable);
        let q = comparison_from_samples(1.0, 0.35, s, VerdictRule::Quantile { q: 0.5 });
        assert!((q.threshold - 0.25).abs() < 1e-15);
        assert!(!q.interchangeable);
        assert!(VerdictRule::Quantile { q: 1.5 }.validate().is_err());
    }

    fn small_gp() -> FittedGp {
        let xs: Vec<f64> = (0..15).map(|i| 0.23 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| (2.0 * x).cos() + 0.05 * (i as f64 * 2.3).sin()).collect();
        let d = Dataset::new(Points::from_scalars(&xs).unwrap(), ys).unwrap();
        fit_mmle(&d, &KernelExpr::se(1.0, 0.6), 0.01, MeanFunction::Zero, &FitOptions::default(), 0).unwrap().gp
    }

    #[test]
    fn same_kernel_is_interchangeable_and_vanishing_covariance_flags_any_change() {
        let gp = small_gp();
        let hp = laplace_hyper_posterior(&gp, true).unwrap();
        let c = frobenius_histogram(&gp, gp.kernel(), &hp, 20, 3, VerdictRule::Max).unwrap();
        assert_eq!(c.candidate, 0.0);
        assert!(c.interchangeable);
        assert_eq!(c.samples.len(), 20);
        let tiny = hp.scaled(1e-12);
        let c = frobenius_histogram(&gp, &perturbed(gp.kernel()), &tiny, 20, 3, VerdictRule::Max).unwrap();
        assert!(!c.interchangeable);
    }

    fn perturbed(k: &KernelExpr) -> KernelExpr {
        let mut k = k.clone();
        let p: Vec<f64> = k.free_params().iter().map(|v| v * 1.01).collect();
        k.set_free_params(&p).unwrap();
        k
    }

    #[test]
    fn grid_spans_test_point() {
        let x = Points::from_scalars(&[0.5, 2.0, 1.0]).unwrap();
        let g = draw_grid(&x, &[5.0], 11).unwrap();
        assert_eq!(g.len(), 11 + 2);
        assert_eq!(g.row(0)[0], 0.5);
        assert_eq!(g.row(g.len() - 1)[0], 5.0);
    }
}
