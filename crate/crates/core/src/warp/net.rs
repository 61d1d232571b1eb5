use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Points;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fully connected net `h: R^D → R^D`, rectified linear on hidden layers and
/// identity on the output. The warp is `g(x) = x + h(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpNet {
    layers: Vec<Layer>,
}

impl WarpNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Validation("warp net needs at least one layer".into()));
        };
        let dim = first.weights.ncols();
        let mut fan_in = dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != fan_in || l.bias.len() != l.weights.nrows() {
                return Err(Error::Validation(format!("layer {i} has inconsistent shapes")));
            }
            fan_in = l.weights.nrows();
        }
        if fan_in != dim {
            return Err(Error::Validation(format!("warp net maps R^{dim} to R^{fan_in}")));
        }
        Ok(Self { layers })
    }

    fn sizes(dim: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
        let mut sizes = Vec::new();
        let mut fan_in = dim;
        for &h in hidden.iter().chain(std::iter::once(&dim)) {
            sizes.push((h, fan_in));
            fan_in = h;
        }
        sizes
    }

    /// All-zero net, so `g` is the identity.
    pub fn zeros(dim: usize, hidden: &[usize]) -> Self {
        let layers = Self::sizes(dim, hidden)
            .into_iter()
            .map(|(o, i)| Layer { weights: DMatrix::zeros(o, i), bias: DVector::zeros(o) })
            .collect();
        Self { layers }
    }

    /// Weights `N(0, scale² / fan_in)`, biases zero.
    pub fn random(dim: usize, hidden: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let layers = Self::sizes(dim, hidden)
            .into_iter()
            .map(|(o, i)| {
                let sd = scale / (i as f64).sqrt();
                let weights = if sd > 0.0 {
                    let nd = Normal::new(0.0, sd).expect("positive sd");
                    DMatrix::from_fn(o, i, |_, _| nd.sample(rng))
                } else {
                    DMatrix::zeros(o, i)
                };
                Layer { weights, bias: DVector::zeros(o) }
            })
            .collect();
        Self { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weights.nrows()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Input(format!("expected {} parameters, got {}", self.n_params(), p.len())));
        }
        let mut it = p.iter();
        for l in &mut self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = *it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        let mut n = self.clone();
        n.set_params(p)?;
        Ok(n)
    }

    /// Forward pass over points as columns; returns pre-activations per layer
    /// and the output (`D × n`).
    fn forward_cols(&self, input: DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut acts = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * acts.last().expect("nonempty");
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let a = if i < last { z.map(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    fn as_cols(points: &Points) -> DMatrix<f64> {
        DMatrix::from_column_slice(points.dim(), points.len(), points.as_slice())
    }

    /// `h(x)` for a single point.
    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Input(format!("point has dimension {}, warp expects {}", x.len(), self.dim())));
        }
        let (_, acts) = self.forward_cols(DMatrix::from_column_slice(x.len(), 1, x));
        Ok(acts.last().expect("output").iter().copied().collect())
    }

    /// `g(x) = x + h(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.residual(x)?.iter().zip(x).map(|(h, v)| h + v).collect())
    }

    /// `h` at every point, as an `n × D` matrix.
    pub fn residuals(&self, points: &Points) -> DMatrix<f64> {
        let (_, acts) = self.forward_cols(Self::as_cols(points));
        acts.last().expect("output").transpose()
    }

    /// Warped copy of a point set.
    pub fn warp_points(&self, points: &Points) -> Points {
        let (_, acts) = self.forward_cols(Self::as_cols(points));
        let out = acts.last().expect("output");
        let data: Vec<f64> = out.iter().zip(points.as_slice()).map(|(h, x)| h + x).collect();
        Points::from_raw_unchecked(points.dim(), data)
    }

    /// Gradient of `Σ_n ⟨adj_n, h(x_n)⟩` with respect to the flattened
    /// parameters, for an adjoint `adj` of shape `n × D`. The rectifier's
    /// derivative is taken as 0 at exactly-zero pre-activations.
    pub fn backprop(&self, points: &Points, adj: &DMatrix<f64>) -> Vec<f64> {
        let (pre, acts) = self.forward_cols(Self::as_cols(points));
        let mut delta = adj.transpose();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let gw = &delta * acts[l].transpose();
            let gb = delta.column_sum();
            grads.push((gw, gb));
            if l > 0 {
                let mut back = self.layers[l].weights.tr_mul(&delta);
                back.zip_apply(&pre[l - 1], |b, z| {
                    if z <= 0.0 {
                        *b = 0.0
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads {
            for r in 0..gw.nrows() {
                out.extend(gw.row(r).iter());
            }
            out.extend(gb.iter());
        }
        out
    }

    /// Product of layer spectral norms; a Lipschitz constant for `h`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.clone().svd(false, false).singular_values.max()).product()
    }
}
