//! Dataset ingestion, output transforms and the synthetic generator.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{Dataset, Points};

/// Value marking a missing month in the Mauna Loa record.
pub const MISSING_SENTINEL: f64 = -99.99;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Data rows parsed (kept plus dropped).
    pub rows_read: usize,
    pub dropped: usize,
}

/// Generic CSV: a header row, then `D` input columns followed by one output
/// column.
pub fn load_csv(path: &Path) -> Result<LoadedData> {
    let file = fs::File::open(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let ncols = rdr.headers()?.len();
    if ncols < 2 {
        return Err(Error::Input(format!("{}: need at least one input and one output column", path.display())));
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != ncols {
            return Err(Error::Parse { line, message: format!("expected {ncols} fields, found {}", rec.len()) });
        }
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("not a number: {f:?}") }))
            .collect::<Result<Vec<f64>>>()?;
        y.push(vals[ncols - 1]);
        rows.push(vals[..ncols - 1].to_vec());
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    let n = rows.len();
    Ok(LoadedData { dataset: Dataset::new(Points::from_rows(&rows)?, y)?, rows_read: n, dropped: 0 })
}

/// Monthly Mauna Loa record: comma-separated, with quoted comment lines and
/// unquoted header lines before the data. A line is data when its first field
/// is numeric; `date_column` and `value_column` (0-based) pick the decimal
/// date and the CO₂ level. Rows whose level is the missing sentinel are
/// dropped.
pub fn load_mauna_loa(path: &Path, date_column: usize, value_column: usize) -> Result<LoadedData> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    parse_mauna_loa(&text, date_column, value_column)
}

pub fn parse_mauna_loa(text: &str, date_column: usize, value_column: usize) -> Result<LoadedData> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows_read = 0;
    let mut dropped = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('"') || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields[0].parse::<f64>().is_err() {
            continue;
        }
        let field = |c: usize| -> Result<f64> {
            let f = fields.get(c).ok_or_else(|| Error::Parse { line: i + 1, message: format!("missing column {c}") })?;
            f.parse::<f64>().map_err(|_| Error::Parse { line: i + 1, message: format!("not a number: {f:?}") })
        };
        let (x, y) = (field(date_column)?, field(value_column)?);
        rows_read += 1;
        if (y - MISSING_SENTINEL).abs() < 1e-9 {
            dropped += 1;
            continue;
        }
        xs.push(x);
        ys.push(y);
    }
    if xs.is_empty() {
        return Err(Error::Input("no usable rows after dropping missing values".into()));
    }
    Ok(LoadedData { dataset: Dataset::new(Points::from_scalars(&xs)?, ys)?, rows_read, dropped })
}

/// Keeps rows whose first input coordinate is below `cutoff`.
pub fn filter_before(d: &Dataset, cutoff: f64) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (r, v) in d.x.rows().zip(&d.y) {
        if r[0] < cutoff {
            rows.push(r.to_vec());
            y.push(*v);
        }
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("no rows before {cutoff}")));
    }
    Dataset::new(Points::from_rows(&rows)?, y)
}

/// Output observed at the input closest to `x`.
pub fn observed_near(d: &Dataset, x: &[f64]) -> Result<f64> {
    let dist = |r: &[f64]| r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    d.x.rows()
        .zip(&d.y)
        .min_by(|a, b| dist(a.0).total_cmp(&dist(b.0)))
        .map(|(_, y)| *y)
        .ok_or_else(|| Error::Input("empty dataset".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PreprocessMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "log")]
    Log,
    #[serde(rename = "standardize")]
    Standardize,
    #[serde(rename = "log+standardize")]
    LogStandardize,
}

/// Invertible output transform `z = (t(y) - shift) / scale`, `t` = ln or identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub log: bool,
    pub shift: f64,
    pub scale: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self { log: false, shift: 0.0, scale: 1.0 }
    }

    pub fn forward(&self, y: f64) -> Result<f64> {
        let t = if self.log {
            if !(y > 0.0) {
                return Err(Error::Validation(format!("log transform of nonpositive value {y}")));
            }
            y.ln()
        } else {
            y
        };
        Ok((t - self.shift) / self.scale)
    }

    pub fn inverse(&self, z: f64) -> f64 {
        let t = z * self.scale + self.shift;
        if self.log {
            t.exp()
        } else {
            t
        }
    }
}

/// Applies `mode` to the outputs; standardization uses the sample standard
/// deviation (divisor `N − 1`).
pub fn preprocess(d: &Dataset, mode: PreprocessMode) -> Result<(Dataset, Transform)> {
    let log = matches!(mode, PreprocessMode::Log | PreprocessMode::LogStandardize);
    let mut t: Vec<f64> = d.y.clone();
    if log {
        for (i, v) in t.iter_mut().enumerate() {
            if !(*v > 0.0) {
                return Err(Error::Validation(format!("log transform of nonpositive output {v} at index {i}")));
            }
            *v = v.ln();
        }
    }
    let mut tr = Transform { log, shift: 0.0, scale: 1.0 };
    if matches!(mode, PreprocessMode::Standardize | PreprocessMode::LogStandardize) {
        if t.len() < 2 {
            return Err(Error::Validation("standardizing needs at least two outputs".into()));
        }
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        if !(var > 0.0) {
            return Err(Error::Validation("outputs have zero variance".into()));
        }
        tr.shift = mean;
        tr.scale = var.sqrt();
        for v in &mut t {
            *v = (*v - mean) / tr.scale;
        }
    }
    Ok((Dataset::new(d.x.clone(), t)?, tr))
}

/// 25 inputs uniform on [0, 5] and 10 uniform on [1.9, 2.1], with
/// `y = x²/2 + cos(πx) + e`, `e ~ N(0, 0.01)`.
pub fn generate_synthetic(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..5.0)).collect();
    xs.extend((0..10).map(|_| rng.random_range(1.9..2.1)));
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let ys = xs.iter().map(|x| synthetic_mean(*x) + noise.sample(&mut rng)).collect();
    Dataset::new(Points::from_scalars(&xs).expect("finite"), ys).expect("consistent")
}

pub fn synthetic_mean(x: f64) -> f64 {
    0.5 * x * x + (PI * x).cos()
}

pub fn dataset_to_csv(d: &Dataset) -> String {
    let mut out = String::new();
    let names: Vec<String> = if d.dim() == 1 { vec!["x".into()] } else { (0..d.dim()).map(|i| format!("x{i}")).collect() };
    out.push_str(&names.join(","));
    out.push_str(",y\n");
    for (r, y) in d.x.rows().zip(&d.y) {
        for v in r {
            out.push_str(&crate::diagnostics::fmt_f64(*v));
            out.push(',');
        }
        out.push_str(&crate::diagnostics::fmt_f64(*y));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_shape_and_determinism() {
        let d = generate_synthetic(3);
        assert_eq!(d.len(), 35);
        let narrow = d.x.as_slice().iter().filter(|x| (1.9..=2.1).contains(*x)).count();
        assert!(narrow >= 10);
        assert_eq!(generate_synthetic(3), d);
        assert_ne!(generate_synthetic(4), d);
    }

    #[test]
    fn synthetic_noise_variance() {
        // pooled residual variance over many regenerations, against 3 standard errors
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for s in 0..1000 {
            let d = generate_synthetic(s);
            for (x, y) in d.x.as_slice().iter().zip(&d.y) {
                let r = y - synthetic_mean(*x);
                sum += r;
                sum_sq += r * r;
                n += 1.0;
            }
        }
        let var = sum_sq / n - (sum / n).powi(2);
        let se = 0.01 * (2.0 / n).sqrt();
        assert!((var - 0.01).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn generic_csv() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,y\n0.0,1.0\n0.5,2.0\n1.0,-1.5").unwrap();
        let d = load_csv(f.path()).unwrap();
        assert_eq!(d.dataset.len(), 3);
        assert_eq!(d.dataset.y, vec![1.0, 2.0, -1.5]);

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "x,y\n0.0,1.0\n0.5,abc").unwrap();
        match load_csv(g.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mauna_loa_fixture() {
        let mut text = String::from("\"comment line\"\n\"another, quoted\"\n  Yr, Mn, Date, Date, CO2\n    ,   , Excel,  , [ppm]\n");
        for i in 0..10 {
            let v = if i == 3 || i == 7 { -99.99 } else { 315.0 + i as f64 };
            text.push_str(&format!("1958, {}, 21200, {:.4}, {v}\n", i + 1, 1958.0 + i as f64 / 12.0));
        }
        let d = parse_mauna_loa(&text, 3, 4).unwrap();
        assert_eq!(d.dataset.len(), 8);
        assert_eq!(d.dropped, 2);
        assert_eq!(d.rows_read, 10);
        let bad = text.replace(", 319\n", ", 3x9\n");
        match parse_mauna_loa(&bad, 3, 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preprocessing() {
        let e = std::f64::consts::E;
        let d = Dataset::new(Points::from_scalars(&[0.0, 1.0, 2.0]).unwrap(), vec![e, e * e, e * e * e]).unwrap();
        let (t, tr) = preprocess(&d, PreprocessMode::LogStandardize).unwrap();
        let mean = t.y.iter().sum::<f64>() / 3.0;
        let var = t.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        for (z, y) in t.y.iter().zip(&d.y) {
            assert!((tr.inverse(*z) - y).abs() < 1e-12 * y);
            assert!((tr.forward(*y).unwrap() - z).abs() < 1e-12);
        }
        let c = Dataset::new(Points::from_scalars(&[0.0, 1.0]).unwrap(), vec![2.0, 2.0]).unwrap();
        assert!(preprocess(&c, PreprocessMode::Standardize).is_err());
        let neg = Dataset::new(Points::from_scalars(&[0.0, 1.0]).unwrap(), vec![2.0, -1.0]).unwrap();
        match preprocess(&neg, PreprocessMode::Log) {
            Err(Error::Validation(m)) => assert!(m.contains("index 1")),
            other => panic!("{other:?}"),
        }
    }
}
