//! Kernel expression trees.
//!
//! A [`KernelExpr`] is a tree of base kernels combined by sums and products.
//! Two further node kinds carry the perturbed kernels: `Warped` evaluates its
//! child at warped inputs `g(x) = x + h(x)`, and `Spectral` evaluates a
//! stationary kernel reconstructed from a discretized spectral density.
//!
//! Gram matrices are computed over whole point sets so that warps are applied
//! once per point rather than once per pair.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::data::Points;
use crate::error::{Error, Result};
use crate::spectral::SpectralGrid;
use crate::warp::WarpNet;

fn is_false(b: &bool) -> bool {
    !*b
}

/// A positive hyperparameter. Fixed parameters are excluded from MMLE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub fixed: bool,
}

impl Param {
    pub fn free(value: f64) -> Self {
        Self { value, fixed: false }
    }

    pub fn fixed(value: f64) -> Self {
        Self { value, fixed: true }
    }
}

impl From<f64> for Param {
    fn from(value: f64) -> Self {
        Param::free(value)
    }
}

/// Index path from the root to a node: the i-th entry selects a child of a
/// `Sum`/`Product` (or `0` for the child of a `Warped` node).
pub type NodePath = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelExpr {
    /// `h² exp(-r² / (2λ²))`
    SquaredExponential { amplitude: Param, lengthscale: Param },
    /// `h² (1 + √5 r/λ + 5r²/(3λ²)) exp(-√5 r/λ)`
    Matern52 { amplitude: Param, lengthscale: Param },
    /// `h² exp(-2 sin²(π r / p) / λ²)`
    Periodic {
        amplitude: Param,
        lengthscale: Param,
        period: Param,
    },
    /// `h² (1 + r² / (2 α λ²))^(-α)`
    RationalQuadratic {
        amplitude: Param,
        lengthscale: Param,
        shape: Param,
    },
    Sum { terms: Vec<KernelExpr> },
    Product { factors: Vec<KernelExpr> },
    Warped { child: Box<KernelExpr>, net: WarpNet },
    Spectral { grid: SpectralGrid },
}

impl KernelExpr {
    pub fn se(amplitude: f64, lengthscale: f64) -> Self {
        KernelExpr::SquaredExponential {
            amplitude: amplitude.into(),
            lengthscale: lengthscale.into(),
        }
    }

    pub fn matern52(amplitude: f64, lengthscale: f64) -> Self {
        KernelExpr::Matern52 {
            amplitude: amplitude.into(),
            lengthscale: lengthscale.into(),
        }
    }

    pub fn periodic(amplitude: f64, lengthscale: f64, period: f64) -> Self {
        KernelExpr::Periodic {
            amplitude: amplitude.into(),
            lengthscale: lengthscale.into(),
            period: period.into(),
        }
    }

    pub fn rational_quadratic(amplitude: f64, lengthscale: f64, shape: f64) -> Self {
        KernelExpr::RationalQuadratic {
            amplitude: amplitude.into(),
            lengthscale: lengthscale.into(),
            shape: shape.into(),
        }
    }

    pub fn sum(terms: Vec<KernelExpr>) -> Self {
        KernelExpr::Sum { terms }
    }

    pub fn product(factors: Vec<KernelExpr>) -> Self {
        KernelExpr::Product { factors }
    }

    /// Kernel used for the heart-rate series: Matérn 5/2 plus squared exponential.
    pub fn heart_rate(h1: f64, l1: f64, h2: f64, l2: f64) -> Self {
        Self::sum(vec![Self::matern52(h1, l1), Self::se(h2, l2)])
    }

    /// Four-term CO₂ kernel: long-term trend, decaying seasonal component,
    /// rational-quadratic medium-term irregularities and short-term noise.
    /// The periodic factor has unit amplitude and a fixed one-year period.
    pub fn mauna_loa(theta: [f64; 10]) -> Self {
        Self::sum(vec![
            Self::se(theta[0], theta[1]),
            Self::product(vec![
                Self::se(theta[2], theta[3]),
                KernelExpr::Periodic {
                    amplitude: Param::fixed(1.0),
                    lengthscale: Param::free(theta[4]),
                    period: Param::fixed(1.0),
                },
            ]),
            Self::rational_quadratic(theta[5], theta[6], theta[7]),
            Self::se(theta[8], theta[9]),
        ])
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            KernelExpr::SquaredExponential { .. } => "se",
            KernelExpr::Matern52 { .. } => "matern52",
            KernelExpr::Periodic { .. } => "periodic",
            KernelExpr::RationalQuadratic { .. } => "rq",
            KernelExpr::Sum { .. } => "sum",
            KernelExpr::Product { .. } => "product",
            KernelExpr::Warped { .. } => "warped",
            KernelExpr::Spectral { .. } => "spectral",
        }
    }

    fn base_params(&self) -> Option<Vec<(&'static str, &Param)>> {
        match self {
            KernelExpr::SquaredExponential { amplitude, lengthscale }
            | KernelExpr::Matern52 { amplitude, lengthscale } => {
                Some(vec![("amplitude", amplitude), ("lengthscale", lengthscale)])
            }
            KernelExpr::Periodic { amplitude, lengthscale, period } => Some(vec![
                ("amplitude", amplitude),
                ("lengthscale", lengthscale),
                ("period", period),
            ]),
            KernelExpr::RationalQuadratic { amplitude, lengthscale, shape } => Some(vec![
                ("amplitude", amplitude),
                ("lengthscale", lengthscale),
                ("shape", shape),
            ]),
            _ => None,
        }
    }

    fn base_params_mut(&mut self) -> Option<Vec<&mut Param>> {
        match self {
            KernelExpr::SquaredExponential { amplitude, lengthscale }
            | KernelExpr::Matern52 { amplitude, lengthscale } => Some(vec![amplitude, lengthscale]),
            KernelExpr::Periodic { amplitude, lengthscale, period } => {
                Some(vec![amplitude, lengthscale, period])
            }
            KernelExpr::RationalQuadratic { amplitude, lengthscale, shape } => {
                Some(vec![amplitude, lengthscale, shape])
            }
            _ => None,
        }
    }

    pub fn children(&self) -> &[KernelExpr] {
        match self {
            KernelExpr::Sum { terms } => terms,
            KernelExpr::Product { factors } => factors,
            KernelExpr::Warped { child, .. } => std::slice::from_ref(child.as_ref()),
            _ => &[],
        }
    }

    fn children_mut(&mut self) -> &mut [KernelExpr] {
        match self {
            KernelExpr::Sum { terms } => terms,
            KernelExpr::Product { factors } => factors,
            KernelExpr::Warped { child, .. } => std::slice::from_mut(child.as_mut()),
            _ => &mut [],
        }
    }

    pub fn node(&self, path: &[usize]) -> Option<&KernelExpr> {
        match path.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children().get(i)?.node(rest),
        }
    }

    pub fn node_mut(&mut self, path: &[usize]) -> Option<&mut KernelExpr> {
        match path.split_first() {
            None => Some(self),
            Some((&i, rest)) => self.children_mut().get_mut(i)?.node_mut(rest),
        }
    }

    /// True when the tree contains no warped node.
    pub fn is_stationary(&self) -> bool {
        !matches!(self, KernelExpr::Warped { .. }) && self.children().iter().all(|c| c.is_stationary())
    }

    pub fn contains_spectral(&self) -> bool {
        matches!(self, KernelExpr::Spectral { .. })
            || self.children().iter().any(|c| c.contains_spectral())
    }

    /// Checks hyperparameter positivity, nonempty combinators, and that every
    /// node can be evaluated on points of dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.validate_inner(dim, false)
    }

    fn validate_inner(&self, dim: usize, under_warp: bool) -> Result<()> {
        if let Some(params) = self.base_params() {
            for (name, p) in params {
                if !(p.value.is_finite() && p.value > 0.0) {
                    return Err(Error::Validation(format!(
                        "{} {name} must be positive and finite, got {}",
                        self.kind_name(),
                        p.value
                    )));
                }
            }
            return Ok(());
        }
        match self {
            KernelExpr::Sum { terms } if terms.is_empty() => {
                Err(Error::Validation("sum kernel has no terms".into()))
            }
            KernelExpr::Product { factors } if factors.is_empty() => {
                Err(Error::Validation("product kernel has no factors".into()))
            }
            KernelExpr::Sum { terms: children } | KernelExpr::Product { factors: children } => {
                children.iter().try_for_each(|c| c.validate_inner(dim, under_warp))
            }
            KernelExpr::Warped { child, net } => {
                if under_warp {
                    return Err(Error::Validation("nested warped nodes are not supported".into()));
                }
                if net.dim() != dim {
                    return Err(Error::Input(format!(
                        "warp net maps R^{} but points are in R^{dim}",
                        net.dim()
                    )));
                }
                if child.contains_spectral() {
                    return Err(Error::Validation(
                        "spectral nodes cannot be evaluated at warped inputs".into(),
                    ));
                }
                child.validate_inner(dim, true)
            }
            KernelExpr::Spectral { grid } => {
                if dim != 1 {
                    return Err(Error::Unsupported(format!(
                        "spectral kernels require 1-D inputs, got D = {dim}"
                    )));
                }
                grid.validate()
            }
            _ => unreachable!("base kernels handled above"),
        }
    }

    /// `k(x, x')` for a single pair of points.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(Error::Input(format!(
                "points have dimensions {} and {}",
                x.len(),
                x2.len()
            )));
        }
        let a = Points::new(x.len(), x.to_vec())?;
        let b = Points::new(x2.len(), x2.to_vec())?;
        Ok(self.gram(&a, &b)?[(0, 0)])
    }

    /// `M[i][j] = k(a_i, b_j)`.
    pub fn gram(&self, a: &Points, b: &Points) -> Result<DMatrix<f64>> {
        if a.dim() != b.dim() {
            return Err(Error::Input(format!(
                "point sets have dimensions {} and {}",
                a.dim(),
                b.dim()
            )));
        }
        if a.is_empty() || b.is_empty() {
            return Err(Error::Input("gram matrix needs nonempty point sets".into()));
        }
        self.validate(a.dim())?;
        Ok(self.gram_unchecked(a, b))
    }

    /// Symmetric Gram matrix of one point set.
    pub fn gram_sym(&self, a: &Points) -> Result<DMatrix<f64>> {
        self.gram(a, a)
    }

    pub(crate) fn gram_unchecked(&self, a: &Points, b: &Points) -> DMatrix<f64> {
        match self {
            KernelExpr::Sum { terms } => {
                let mut m = terms[0].gram_unchecked(a, b);
                for t in &terms[1..] {
                    m += t.gram_unchecked(a, b);
                }
                m
            }
            KernelExpr::Product { factors } => {
                let mut m = factors[0].gram_unchecked(a, b);
                for f in &factors[1..] {
                    m.component_mul_assign(&f.gram_unchecked(a, b));
                }
                m
            }
            KernelExpr::Warped { child, net } => {
                let wa = net.warp_points(a);
                if std::ptr::eq(a, b) {
                    child.gram_unchecked(&wa, &wa)
                } else {
                    let wb = net.warp_points(b);
                    child.gram_unchecked(&wa, &wb)
                }
            }
            KernelExpr::Spectral { grid } => {
                DMatrix::from_fn(a.len(), b.len(), |i, j| grid.kernel_value(a.row(i)[0] - b.row(j)[0]))
            }
            base => {
                let mut diff = vec![0.0; a.dim()];
                DMatrix::from_fn(a.len(), b.len(), |i, j| {
                    for (d, (u, v)) in diff.iter_mut().zip(a.row(i).iter().zip(b.row(j))) {
                        *d = u - v;
                    }
                    base.base_value(&diff)
                })
            }
        }
    }

    fn base_value(&self, diff: &[f64]) -> f64 {
        let r2: f64 = diff.iter().map(|d| d * d).sum();
        match self {
            KernelExpr::SquaredExponential { amplitude, lengthscale } => {
                let l = lengthscale.value;
                amplitude.value.powi(2) * (-0.5 * r2 / (l * l)).exp()
            }
            KernelExpr::Matern52 { amplitude, lengthscale } => {
                let s = 5f64.sqrt() * r2.sqrt() / lengthscale.value;
                amplitude.value.powi(2) * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelExpr::Periodic { amplitude, lengthscale, period } => {
                let sn = (PI * r2.sqrt() / period.value).sin();
                amplitude.value.powi(2) * (-2.0 * sn * sn / lengthscale.value.powi(2)).exp()
            }
            KernelExpr::RationalQuadratic { amplitude, lengthscale, shape } => {
                let q = r2 / (2.0 * shape.value * lengthscale.value.powi(2));
                amplitude.value.powi(2) * (1.0 + q).powf(-shape.value)
            }
            _ => unreachable!("base_value on a composite node"),
        }
    }

    /// Derivatives of a base kernel with respect to the log of each of its
    /// hyperparameters, in declaration order.
    fn base_log_param_grads(&self, diff: &[f64], out: &mut [f64]) {
        let r2: f64 = diff.iter().map(|d| d * d).sum();
        let k = self.base_value(diff);
        match self {
            KernelExpr::SquaredExponential { lengthscale, .. } => {
                out[0] = 2.0 * k;
                out[1] = k * r2 / lengthscale.value.powi(2);
            }
            KernelExpr::Matern52 { amplitude, lengthscale } => {
                let s = 5f64.sqrt() * r2.sqrt() / lengthscale.value;
                out[0] = 2.0 * k;
                out[1] = amplitude.value.powi(2) * (-s).exp() * s * s * (1.0 + s) / 3.0;
            }
            KernelExpr::Periodic { lengthscale, period, .. } => {
                let u = PI * r2.sqrt() / period.value;
                let l2 = lengthscale.value.powi(2);
                out[0] = 2.0 * k;
                out[1] = k * 4.0 * u.sin().powi(2) / l2;
                out[2] = k * 2.0 * u * (2.0 * u).sin() / l2;
            }
            KernelExpr::RationalQuadratic { amplitude, lengthscale, shape } => {
                let a = shape.value;
                let q = r2 / (2.0 * a * lengthscale.value.powi(2));
                out[0] = 2.0 * k;
                out[1] = 2.0 * a * q * amplitude.value.powi(2) * (1.0 + q).powf(-a - 1.0);
                out[2] = k * (-a * (1.0 + q).ln() + a * q / (1.0 + q));
            }
            _ => unreachable!("base_log_param_grads on a composite node"),
        }
    }

    /// Gradient of a base kernel with respect to the difference vector `x - x'`.
    fn base_diff_grad(&self, diff: &[f64], out: &mut [f64]) {
        let r2: f64 = diff.iter().map(|d| d * d).sum();
        let scale = match self {
            KernelExpr::SquaredExponential { lengthscale, .. } => {
                -self.base_value(diff) / lengthscale.value.powi(2)
            }
            KernelExpr::Matern52 { amplitude, lengthscale } => {
                let l = lengthscale.value;
                let s = 5f64.sqrt() * r2.sqrt() / l;
                -amplitude.value.powi(2) * (-s).exp() * (1.0 + s) * 5.0 / (3.0 * l * l)
            }
            KernelExpr::Periodic { lengthscale, period, .. } => {
                let r = r2.sqrt();
                let w = 2.0 * PI / period.value;
                // sin(w r) / r, continuous at r = 0
                let sinc = if r < 1e-12 { w } else { (w * r).sin() / r };
                -self.base_value(diff) * w / lengthscale.value.powi(2) * sinc
            }
            KernelExpr::RationalQuadratic { amplitude, lengthscale, shape } => {
                let a = shape.value;
                let l2 = lengthscale.value.powi(2);
                let q = r2 / (2.0 * a * l2);
                -amplitude.value.powi(2) * (1.0 + q).powf(-a - 1.0) / l2
            }
            _ => unreachable!("base_diff_grad on a composite node"),
        };
        for (o, d) in out.iter_mut().zip(diff) {
            *o = scale * d;
        }
    }

    /// Number of free (non-fixed) hyperparameters.
    pub fn n_free_params(&self) -> usize {
        match self.base_params() {
            Some(ps) => ps.iter().filter(|(_, p)| !p.fixed).count(),
            None => self.children().iter().map(|c| c.n_free_params()).sum(),
        }
    }

    /// Free hyperparameter values in pre-order.
    pub fn free_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_params(&mut out, &mut None, String::new());
        out
    }

    /// Human-readable names of the free hyperparameters, in [`free_params`] order.
    ///
    /// [`free_params`]: KernelExpr::free_params
    pub fn free_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut names = Some(Vec::new());
        self.collect_params(&mut out, &mut names, String::new());
        names.unwrap_or_default()
    }

    fn collect_params(&self, out: &mut Vec<f64>, names: &mut Option<Vec<String>>, prefix: String) {
        if let Some(ps) = self.base_params() {
            for (name, p) in ps {
                if !p.fixed {
                    out.push(p.value);
                    if let Some(n) = names {
                        n.push(format!("{prefix}{}.{name}", self.kind_name()));
                    }
                }
            }
            return;
        }
        for (i, c) in self.children().iter().enumerate() {
            c.collect_params(out, names, format!("{prefix}{i}/"));
        }
    }

    /// Replaces the free hyperparameters (pre-order) with `values`.
    pub fn set_free_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_free_params() {
            return Err(Error::Input(format!(
                "expected {} hyperparameters, got {}",
                self.n_free_params(),
                values.len()
            )));
        }
        let mut it = values.iter();
        self.assign_params(&mut it);
        Ok(())
    }

    fn assign_params<'a>(&mut self, it: &mut impl Iterator<Item = &'a f64>) {
        if let Some(ps) = self.base_params_mut() {
            for p in ps.into_iter().filter(|p| !p.fixed) {
                p.value = *it.next().expect("length checked by caller");
            }
            return;
        }
        for c in self.children_mut() {
            c.assign_params(it);
        }
    }

    /// Symmetric Gram matrix together with its derivatives with respect to the
    /// log of every free hyperparameter.
    pub(crate) fn gram_with_log_grads(&self, a: &Points) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        match self {
            KernelExpr::Sum { terms } => {
                let mut k = DMatrix::zeros(a.len(), a.len());
                let mut grads = Vec::new();
                for t in terms {
                    let (kt, gt) = t.gram_with_log_grads(a);
                    k += kt;
                    grads.extend(gt);
                }
                (k, grads)
            }
            KernelExpr::Product { factors } => {
                let parts: Vec<_> = factors.iter().map(|f| f.gram_with_log_grads(a)).collect();
                let n = a.len();
                let mut k = DMatrix::from_element(n, n, 1.0);
                for (kf, _) in &parts {
                    k.component_mul_assign(kf);
                }
                let mut grads = Vec::new();
                for (i, (_, gf)) in parts.iter().enumerate() {
                    let mut others = DMatrix::from_element(n, n, 1.0);
                    for (j, (kj, _)) in parts.iter().enumerate() {
                        if j != i {
                            others.component_mul_assign(kj);
                        }
                    }
                    grads.extend(gf.iter().map(|g| g.component_mul(&others)));
                }
                (k, grads)
            }
            KernelExpr::Warped { child, net } => child.gram_with_log_grads(&net.warp_points(a)),
            KernelExpr::Spectral { .. } => (self.gram_unchecked(a, a), Vec::new()),
            base => {
                let params = base.base_params().expect("base node");
                let free: Vec<usize> =
                    params.iter().enumerate().filter(|(_, (_, p))| !p.fixed).map(|(i, _)| i).collect();
                let n = a.len();
                let mut k = DMatrix::zeros(n, n);
                let mut grads = vec![DMatrix::zeros(n, n); free.len()];
                let mut diff = vec![0.0; a.dim()];
                let mut g = vec![0.0; params.len()];
                for i in 0..n {
                    for j in 0..=i {
                        for (d, (u, v)) in diff.iter_mut().zip(a.row(i).iter().zip(a.row(j))) {
                            *d = u - v;
                        }
                        let v = base.base_value(&diff);
                        k[(i, j)] = v;
                        k[(j, i)] = v;
                        base.base_log_param_grads(&diff, &mut g);
                        for (slot, &pi) in free.iter().enumerate() {
                            grads[slot][(i, j)] = g[pi];
                            grads[slot][(j, i)] = g[pi];
                        }
                    }
                }
                (k, grads)
            }
        }
    }

    /// Backpropagates an adjoint of the Gram matrix `K(a, a)` to the point
    /// coordinates, for a subtree containing only base kernels and combinators.
    fn point_adjoint(&self, a: &Points, adj: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.len();
        let dim = a.dim();
        match self {
            KernelExpr::Sum { terms } => {
                let mut out = DMatrix::zeros(n, dim);
                for t in terms {
                    out += t.point_adjoint(a, adj);
                }
                out
            }
            KernelExpr::Product { factors } => {
                let grams: Vec<_> = factors.iter().map(|f| f.gram_unchecked(a, a)).collect();
                let mut out = DMatrix::zeros(n, dim);
                for (i, f) in factors.iter().enumerate() {
                    let mut local = adj.clone();
                    for (j, gj) in grams.iter().enumerate() {
                        if j != i {
                            local.component_mul_assign(gj);
                        }
                    }
                    out += f.point_adjoint(a, &local);
                }
                out
            }
            KernelExpr::Warped { .. } | KernelExpr::Spectral { .. } => {
                unreachable!("point_adjoint only runs on validated subtrees under a warp")
            }
            base => {
                let mut out = DMatrix::zeros(n, dim);
                let mut diff = vec![0.0; dim];
                let mut g = vec![0.0; dim];
                for i in 0..n {
                    for j in 0..n {
                        let w = adj[(i, j)];
                        if w == 0.0 || i == j {
                            continue;
                        }
                        for (d, (u, v)) in diff.iter_mut().zip(a.row(i).iter().zip(a.row(j))) {
                            *d = u - v;
                        }
                        base.base_diff_grad(&diff, &mut g);
                        for d in 0..dim {
                            out[(i, d)] += w * g[d];
                            out[(j, d)] -= w * g[d];
                        }
                    }
                }
                out
            }
        }
    }

    /// Backpropagates an adjoint of `K(a, a)` to the warped coordinates
    /// `g(a)`, summed over every warped node. Every warped node is assumed to
    /// carry the same net (as built by `warp::warped_kernel`). Returns `None`
    /// when the tree has no warped node.
    pub(crate) fn warped_point_adjoint(&self, a: &Points, adj: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            KernelExpr::Warped { child, net } => Some(child.point_adjoint(&net.warp_points(a), adj)),
            KernelExpr::Sum { terms } => terms.iter().fold(None, |acc, t| {
                add_opt(acc, t.warped_point_adjoint(a, adj))
            }),
            KernelExpr::Product { factors } => {
                let grams: Vec<_> = factors.iter().map(|f| f.gram_unchecked(a, a)).collect();
                let mut acc = None;
                for (i, f) in factors.iter().enumerate() {
                    if f.is_stationary() {
                        continue;
                    }
                    let mut local = adj.clone();
                    for (j, gj) in grams.iter().enumerate() {
                        if j != i {
                            local.component_mul_assign(gj);
                        }
                    }
                    acc = add_opt(acc, f.warped_point_adjoint(a, &local));
                }
                acc
            }
            _ => None,
        }
    }
}

fn add_opt(a: Option<DMatrix<f64>>, b: Option<DMatrix<f64>>) -> Option<DMatrix<f64>> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x + y),
        (x, None) => x,
        (None, y) => y,
    }
}

impl fmt::Display for KernelExpr {
    /// Renders the expression in the syntax accepted by [`super::parse_kernel`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = |p: &Param| {
            if p.fixed {
                format!("={}", p.value)
            } else {
                format!("{}", p.value)
            }
        };
        match self {
            KernelExpr::SquaredExponential { amplitude, lengthscale } => {
                write!(f, "se({}, {})", p(amplitude), p(lengthscale))
            }
            KernelExpr::Matern52 { amplitude, lengthscale } => {
                write!(f, "matern52({}, {})", p(amplitude), p(lengthscale))
            }
            KernelExpr::Periodic { amplitude, lengthscale, period } => {
                write!(f, "periodic({}, {}, {})", p(amplitude), p(lengthscale), p(period))
            }
            KernelExpr::RationalQuadratic { amplitude, lengthscale, shape } => {
                write!(f, "rq({}, {}, {})", p(amplitude), p(lengthscale), p(shape))
            }
            KernelExpr::Sum { terms } => {
                write!(f, "(")?;
                for (i, t) in terms.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            KernelExpr::Product { factors } => {
                write!(f, "(")?;
                for (i, t) in factors.iter().enumerate() {
                    if i > 0 {
                        write!(f, " * ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            KernelExpr::Warped { child, .. } => write!(f, "warped[{child}]"),
            KernelExpr::Spectral { grid } => write!(f, "spectral[G={}]", grid.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pts(xs: &[f64]) -> Points {
        Points::from_scalars(xs).unwrap()
    }

    #[test]
    fn se_identity_and_unit_distance() {
        let k = KernelExpr::se(1.0, 1.0);
        assert_eq!(k.eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert_relative_eq!(k.eval(&[0.0], &[1.0]).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(k.eval(&[0.0], &[1.0]).unwrap(), 0.606531, epsilon = 1e-6);
    }

    #[test]
    fn matern_at_lengthscale_matches_hand_value() {
        let k = KernelExpr::matern52(1.0, 1.0);
        assert_eq!(k.eval(&[2.0], &[2.0]).unwrap(), 1.0);
        let s5 = 5f64.sqrt();
        let hand = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert_relative_eq!(k.eval(&[0.0], &[1.0]).unwrap(), hand, epsilon = 1e-14);
        assert_relative_eq!(hand, 0.523994, epsilon = 1e-6);
    }

    #[test]
    fn dimension_mismatch_and_bad_params() {
        let k = KernelExpr::se(1.0, 1.0);
        assert!(matches!(k.eval(&[0.0], &[0.0, 1.0]), Err(Error::Input(_))));
        let bad = KernelExpr::se(1.0, -1.0);
        assert!(matches!(bad.eval(&[0.0], &[1.0]), Err(Error::Validation(_))));
        let empty = KernelExpr::sum(vec![]);
        assert!(matches!(empty.eval(&[0.0], &[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn gram_of_single_point() {
        let k = KernelExpr::se(1.0, 1.0);
        let g = k.gram_sym(&pts(&[0.0])).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn sum_gram_is_sum_of_grams() {
        let x = pts(&[0.13, 1.7, -0.4]);
        let a = KernelExpr::se(1.3, 0.7);
        let b = KernelExpr::matern52(0.6, 1.9);
        let s = KernelExpr::sum(vec![a.clone(), b.clone()]);
        let expect = a.gram_sym(&x).unwrap() + b.gram_sym(&x).unwrap();
        let got = s.gram_sym(&x).unwrap();
        for (u, v) in got.iter().zip(expect.iter()) {
            assert_relative_eq!(u, v, epsilon = 1e-15);
        }
    }

    #[test]
    fn periodic_is_maximal_at_integer_periods() {
        let k = KernelExpr::periodic(1.5, 0.8, 2.0);
        assert_relative_eq!(k.eval(&[0.0], &[4.0]).unwrap(), 2.25, epsilon = 1e-12);
        let rq = KernelExpr::rational_quadratic(2.0, 1.0, 0.5);
        // (1 + 1/(2·0.5·1))^-0.5 = 2^-0.5
        assert_relative_eq!(rq.eval(&[0.0], &[1.0]).unwrap(), 4.0 * 0.5f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn free_params_skip_fixed_and_round_trip() {
        let mut k = KernelExpr::mauna_loa([1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        assert_eq!(k.n_free_params(), 10);
        assert_eq!(k.free_params(), vec![1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        let names = k.free_param_names();
        assert_eq!(names[4], "1/1/periodic.lengthscale");
        let new: Vec<f64> = (0..10).map(|i| i as f64 + 0.5).collect();
        k.set_free_params(&new).unwrap();
        assert_eq!(k.free_params(), new);
        assert!(k.set_free_params(&[1.0]).is_err());
    }

    fn check_log_grads(k: &KernelExpr) {
        let x = pts(&[0.1, 0.9, 1.4, 2.6]);
        let theta = k.free_params();
        let (_, grads) = k.gram_with_log_grads(&x);
        assert_eq!(grads.len(), theta.len());
        for (p, g) in grads.iter().enumerate() {
            let h: f64 = 1e-6;
            let mut up = k.clone();
            let mut lo = k.clone();
            let mut tu = theta.clone();
            let mut tl = theta.clone();
            tu[p] *= h.exp();
            tl[p] *= (-h).exp();
            up.set_free_params(&tu).unwrap();
            lo.set_free_params(&tl).unwrap();
            let fd = (up.gram_sym(&x).unwrap() - lo.gram_sym(&x).unwrap()) / (2.0 * h);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{k} param {p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn log_param_gradients_match_finite_differences() {
        check_log_grads(&KernelExpr::se(1.3, 0.7));
        check_log_grads(&KernelExpr::matern52(0.8, 1.1));
        check_log_grads(&KernelExpr::periodic(1.2, 0.9, 1.7));
        check_log_grads(&KernelExpr::rational_quadratic(1.1, 0.6, 1.4));
        check_log_grads(&KernelExpr::mauna_loa([1.2, 3.0, 0.7, 2.0, 1.1, 0.5, 0.9, 0.8, 0.3, 0.4]));
    }

    #[test]
    fn diff_gradients_match_finite_differences() {
        let kernels = [
            KernelExpr::se(1.3, 0.7),
            KernelExpr::matern52(0.8, 1.1),
            KernelExpr::periodic(1.2, 0.9, 1.7),
            KernelExpr::rational_quadratic(1.1, 0.6, 1.4),
        ];
        for k in &kernels {
            for diff in [[0.37, -0.2], [1e-14, 0.0], [-1.3, 0.8]] {
                let mut g = [0.0; 2];
                k.base_diff_grad(&diff, &mut g);
                for d in 0..2 {
                    let h = 1e-6;
                    let mut up = diff;
                    let mut lo = diff;
                    up[d] += h;
                    lo[d] -= h;
                    let fd = (k.base_value(&up) - k.base_value(&lo)) / (2.0 * h);
                    assert!((g[d] - fd).abs() < 1e-6, "{k}: {g:?} vs {fd}");
                }
            }
        }
    }
}
