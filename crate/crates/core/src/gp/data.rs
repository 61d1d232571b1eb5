use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of points in `R^D`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("point dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "{} coordinates cannot be split into points of dimension {}",
                data.len(),
                dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate at flat index {i}")));
        }
        Ok(Self { dim, data })
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(1, xs.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Input("rows have differing dimensions".into()));
        }
        Self::new(dim, rows.iter().flatten().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Appends one point; used to form the joint training+test set.
    pub fn with_point(&self, x: &[f64]) -> Result<Self> {
        if x.len() != self.dim {
            return Err(Error::Input(format!(
                "point has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(x);
        Self::new(self.dim, data)
    }

    pub(crate) fn from_raw_unchecked(dim: usize, data: Vec<f64>) -> Self {
        Self { dim, data }
    }
}

/// Training data: `N` inputs in `R^D` with scalar outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Points,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Points, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Input("dataset must contain at least one point".into()));
        }
        if x.len() != y.len() {
            return Err(Error::Input(format!(
                "{} inputs but {} outputs",
                x.len(),
                y.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite output at index {i}")));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn mean_y(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Re-checks invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        Dataset::new(Points::new(self.x.dim(), self.x.as_slice().to_vec())?, self.y.clone())
            .map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        let x = Points::from_scalars(&[0.0, 1.0]).unwrap();
        assert!(matches!(Dataset::new(x, vec![1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let x = Points::from_scalars(&[]).unwrap();
        assert!(Dataset::new(x, vec![]).is_err());
        assert!(Points::from_scalars(&[f64::NAN]).is_err());
        let x = Points::from_scalars(&[0.0]).unwrap();
        assert!(Dataset::new(x, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let p = Points::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.row(1), &[3.0, 4.0]);
        let q = p.with_point(&[5.0, 6.0]).unwrap();
        assert_eq!(q.len(), 3);
        assert!(p.with_point(&[1.0]).is_err());
    }
}
