//! Base measures and integration against them.
//!
//! Deterministic integration uses tensorized Gauss-Legendre (boxes) or
//! Gauss-Hermite (Gaussians) rules for `d <= 3`; anything larger goes through
//! seeded Monte Carlo on the normalized measure.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_NODES: usize = 64;
pub const DEFAULT_SAMPLES: usize = 100_000;
pub const MAX_QUADRATURE_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureKind {
    BoxLebesgue { lower: Vec<f64>, upper: Vec<f64> },
    Gaussian { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    Discrete { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureKind", into = "MeasureKind")]
pub struct BaseMeasure {
    kind: MeasureKind,
    /// Lower Cholesky factor of the covariance (gaussian only).
    chol: Option<DMatrix<f64>>,
}

impl TryFrom<MeasureKind> for BaseMeasure {
    type Error = Error;
    fn try_from(kind: MeasureKind) -> Result<Self> {
        BaseMeasure::new(kind)
    }
}

impl From<BaseMeasure> for MeasureKind {
    fn from(m: BaseMeasure) -> Self {
        m.kind
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntegrationScheme {
    Quadrature { nodes_per_dim: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for IntegrationScheme {
    fn default() -> Self {
        IntegrationScheme::Quadrature {
            nodes_per_dim: DEFAULT_NODES,
        }
    }
}

impl IntegrationScheme {
    pub fn quadrature(nodes_per_dim: usize) -> Self {
        IntegrationScheme::Quadrature { nodes_per_dim }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        IntegrationScheme::MonteCarlo { samples, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IntegrationScheme::Quadrature { nodes_per_dim } if nodes_per_dim < 2 => Err(
                Error::InvalidArgument("nodes_per_dim must be at least 2".into()),
            ),
            IntegrationScheme::MonteCarlo { samples: 0, .. } => {
                Err(Error::InvalidArgument("samples must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for IntegrationScheme {
    type Err = Error;

    /// Parses `quad:<nodes>` or `mc:<samples>[:<seed>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognised scheme '{s}'"));
        let mut parts = s.split(':');
        let scheme = match (parts.next(), parts.next(), parts.next()) {
            (Some("quad"), Some(n), None) => IntegrationScheme::Quadrature {
                nodes_per_dim: n.parse().map_err(|_| bad())?,
            },
            (Some("mc"), Some(n), seed) => IntegrationScheme::MonteCarlo {
                samples: n.parse().map_err(|_| bad())?,
                seed: seed.map_or(Ok(0), str::parse).map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        scheme.validate()?;
        Ok(scheme)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub value: f64,
    pub error_estimate: f64,
}

/// A weighted point set: `sum_i weights[i] * f(point(i))` approximates `int f dmu`.
#[derive(Clone, Debug)]
pub struct Cubature {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Cubature {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim.max(1))
    }

    pub fn sum<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.points()
            .zip(&self.weights)
            .map(|(x, w)| w * f(x))
            .sum()
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        // recompute derivative at the converged root
        let (mut p1, mut p2) = (1.0, 0.0);
        for j in 0..n {
            let p3 = p2;
            p2 = p1;
            p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
        }
        if z * z != 1.0 {
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Gauss-Hermite nodes and weights for the weight `exp(-t^2)` on the real line.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    // orthonormal Hermite recurrence; returns (p_n, p_{n-1})
    let eval = |z: f64| {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 1..=n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        }
        (p1, p2)
    };
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let (p1, p2) = eval(z);
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, p2) = eval(z);
        if p2 != 0.0 {
            pp = (2.0 * nf).sqrt() * p2;
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn tensorize(axes: &[(Vec<f64>, Vec<f64>)]) -> Cubature {
    let dim = axes.len();
    let count: usize = axes.iter().map(|a| a.0.len()).product();
    let mut points = Vec::with_capacity(count * dim);
    let mut weights = Vec::with_capacity(count);
    let mut idx = vec![0usize; dim];
    for _ in 0..count {
        let mut w = 1.0;
        for (k, axis) in axes.iter().enumerate() {
            points.push(axis.0[idx[k]]);
            w *= axis.1[idx[k]];
        }
        weights.push(w);
        // last axis varies fastest
        for k in (0..dim).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].0.len() {
                break;
            }
            idx[k] = 0;
        }
    }
    Cubature {
        dim,
        points,
        weights,
    }
}

impl BaseMeasure {
    pub fn new(kind: MeasureKind) -> Result<Self> {
        let mut chol = None;
        match &kind {
            MeasureKind::BoxLebesgue { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::DimensionMismatch {
                        expected: lower.len(),
                        got: upper.len(),
                    });
                }
                if lower
                    .iter()
                    .zip(upper)
                    .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
                {
                    return Err(Error::InvalidArgument(
                        "box bounds must be finite with lower < upper".into(),
                    ));
                }
            }
            MeasureKind::Gaussian { mean, covariance } => {
                let d = mean.len();
                if d == 0 || covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidArgument(
                        "gaussian covariance must be d x d".into(),
                    ));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
                if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
                    return Err(Error::InvalidArgument("covariance not symmetric".into()));
                }
                let c = cov.cholesky().ok_or_else(|| {
                    Error::InvalidArgument("covariance is not positive definite".into())
                })?;
                chol = Some(c.l());
            }
            MeasureKind::Discrete { points, weights } => {
                if points.is_empty() || points.len() != weights.len() {
                    return Err(Error::InvalidArgument(
                        "discrete measure needs one weight per point".into(),
                    ));
                }
                let d = points[0].len();
                if d == 0 || points.iter().any(|p| p.len() != d) {
                    return Err(Error::InvalidArgument("ragged discrete points".into()));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidArgument(
                        "discrete weights must be strictly positive".into(),
                    ));
                }
            }
        }
        Ok(BaseMeasure { kind, chol })
    }

    pub fn unit_box(dim: usize) -> Self {
        Self::boxed(vec![0.0; dim], vec![1.0; dim]).expect("unit box")
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        Self::new(MeasureKind::BoxLebesgue { lower, upper })
    }

    pub fn gaussian(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(MeasureKind::Gaussian { mean, covariance })
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::gaussian(vec![0.0; dim], cov).expect("identity covariance")
    }

    pub fn discrete(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        Self::new(MeasureKind::Discrete { points, weights })
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            MeasureKind::BoxLebesgue { lower, .. } => lower.len(),
            MeasureKind::Gaussian { mean, .. } => mean.len(),
            MeasureKind::Discrete { points, .. } => points[0].len(),
        }
    }

    /// `mu(X)`: box volume, 1 for a gaussian, total weight for a discrete measure.
    pub fn total_mass(&self) -> f64 {
        match &self.kind {
            MeasureKind::BoxLebesgue { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| u - l).product()
            }
            MeasureKind::Gaussian { .. } => 1.0,
            MeasureKind::Discrete { weights, .. } => weights.iter().sum(),
        }
    }

    pub fn mean(&self) -> Option<&[f64]> {
        match &self.kind {
            MeasureKind::Gaussian { mean, .. } => Some(mean),
            _ => None,
        }
    }

    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        match &self.kind {
            MeasureKind::Gaussian { covariance, .. } => {
                let d = covariance.len();
                Some(DMatrix::from_fn(d, d, |i, j| covariance[i][j]))
            }
            _ => None,
        }
    }

    /// Density of the normalized measure `mu / mu(X)` with respect to Lebesgue
    /// measure (not defined for discrete measures).
    pub fn normalized_density(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            MeasureKind::BoxLebesgue { lower, upper } => {
                let inside = x
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .all(|(v, (l, u))| v >= l && v <= u);
                Some(if inside { 1.0 / self.total_mass() } else { 0.0 })
            }
            MeasureKind::Gaussian { mean, .. } => {
                let l = self.chol.as_ref()?;
                let diff = DVector::from_iterator(mean.len(), x.iter().zip(mean).map(|(a, b)| a - b));
                let z = l.solve_lower_triangular(&diff)?;
                let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
                let d = mean.len() as f64;
                Some(
                    (-0.5 * z.norm_squared() - log_det - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
                        .exp(),
                )
            }
            MeasureKind::Discrete { .. } => None,
        }
    }

    /// The point set used by `scheme`. Discrete measures ignore the scheme.
    pub fn cubature(&self, scheme: &IntegrationScheme) -> Result<Cubature> {
        scheme.validate()?;
        let d = self.dim();
        if let MeasureKind::Discrete { points, weights } = &self.kind {
            return Ok(Cubature {
                dim: d,
                points: points.iter().flatten().copied().collect(),
                weights: weights.clone(),
            });
        }
        match *scheme {
            IntegrationScheme::Quadrature { nodes_per_dim } => {
                self.quadrature_rule(nodes_per_dim)
            }
            IntegrationScheme::MonteCarlo { samples, seed } => {
                let pts = self.draw(samples, seed);
                let w = self.total_mass() / samples as f64;
                Ok(Cubature {
                    dim: d,
                    points: pts.into_iter().flatten().collect(),
                    weights: vec![w; samples],
                })
            }
        }
    }

    fn quadrature_rule(&self, nodes: usize) -> Result<Cubature> {
        let d = self.dim();
        if d > MAX_QUADRATURE_DIM {
            return Err(Error::QuadratureDimension(d));
        }
        match &self.kind {
            MeasureKind::BoxLebesgue { lower, upper } => {
                let (t, w) = gauss_legendre(nodes);
                let axes: Vec<_> = lower
                    .iter()
                    .zip(upper)
                    .map(|(&l, &u)| {
                        let half = 0.5 * (u - l);
                        let mid = 0.5 * (u + l);
                        (
                            t.iter().map(|ti| mid + half * ti).collect(),
                            w.iter().map(|wi| half * wi).collect(),
                        )
                    })
                    .collect();
                Ok(tensorize(&axes))
            }
            MeasureKind::Gaussian { mean, .. } => {
                let (t, w) = gauss_hermite(nodes);
                let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
                let axis = (
                    t.iter().map(|ti| std::f64::consts::SQRT_2 * ti).collect::<Vec<_>>(),
                    w.iter().map(|wi| wi * inv_sqrt_pi).collect::<Vec<_>>(),
                );
                let standard = tensorize(&vec![axis; d]);
                let l = self.chol.as_ref().expect("gaussian has a factor");
                let mut points = Vec::with_capacity(standard.points.len());
                for z in standard.points() {
                    for i in 0..d {
                        let v: f64 = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
                        points.push(mean[i] + v);
                    }
                }
                Ok(Cubature {
                    dim: d,
                    points,
                    weights: standard.weights,
                })
            }
            MeasureKind::Discrete { .. } => unreachable!("handled by cubature"),
        }
    }

    /// Integrates a vector-valued integrand with `width` components.
    ///
    /// Error estimates are `|I(nodes) - I(nodes/2)|` for quadrature, the
    /// standard error for Monte Carlo, and zero for discrete measures.
    pub fn integrate_many<F>(
        &self,
        width: usize,
        scheme: &IntegrationScheme,
        mut f: F,
    ) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let rule = self.cubature(scheme)?;
        let mut buf = vec![0.0; width];
        let mut sum = vec![0.0; width];
        let mut sum_sq = vec![0.0; width];
        for (x, w) in rule.points().zip(rule.weights()) {
            f(x, &mut buf)?;
            for k in 0..width {
                if !buf[k].is_finite() {
                    return Err(Error::NonFinite(format!("integrand at {x:?}")));
                }
                sum[k] += w * buf[k];
                sum_sq[k] += buf[k] * buf[k];
            }
        }
        let errors = match (&self.kind, *scheme) {
            (MeasureKind::Discrete { .. }, _) => vec![0.0; width],
            (_, IntegrationScheme::Quadrature { nodes_per_dim }) => {
                let coarse = self.quadrature_rule((nodes_per_dim / 2).max(1))?;
                let mut csum = vec![0.0; width];
                for (x, w) in coarse.points().zip(coarse.weights()) {
                    f(x, &mut buf)?;
                    for k in 0..width {
                        csum[k] += w * buf[k];
                    }
                }
                sum.iter().zip(&csum).map(|(a, b)| (a - b).abs()).collect()
            }
            (_, IntegrationScheme::MonteCarlo { samples, .. }) => {
                let mass = self.total_mass();
                let n = samples as f64;
                sum.iter()
                    .zip(&sum_sq)
                    .map(|(s, sq)| {
                        let mean = s / mass;
                        let var = if samples > 1 {
                            ((sq / n - mean * mean) * n / (n - 1.0)).max(0.0)
                        } else {
                            0.0
                        };
                        mass * (var / n).sqrt()
                    })
                    .collect()
            }
        };
        Ok((sum, errors))
    }

    pub fn integrate<F>(&self, scheme: &IntegrationScheme, mut f: F) -> Result<Integral>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let (v, e) = self.integrate_many(1, scheme, |x, out| {
            out[0] = f(x);
            Ok(())
        })?;
        Ok(Integral {
            value: v[0],
            error_estimate: e[0],
        })
    }

    /// `count` draws from the normalized measure `mu / mu(X)`.
    pub fn draw(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::seeded(seed);
        self.draw_with(count, &mut rng)
    }

    pub fn draw_with(&self, count: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
        match &self.kind {
            MeasureKind::BoxLebesgue { lower, upper } => (0..count)
                .map(|_| {
                    lower
                        .iter()
                        .zip(upper)
                        .map(|(l, u)| l + (u - l) * rng.random::<f64>())
                        .collect()
                })
                .collect(),
            MeasureKind::Gaussian { mean, .. } => {
                let l = self.chol.as_ref().expect("gaussian has a factor");
                let d = mean.len();
                (0..count)
                    .map(|_| {
                        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                        (0..d)
                            .map(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
                            .collect()
                    })
                    .collect()
            }
            MeasureKind::Discrete { points, weights } => {
                let total: f64 = weights.iter().sum();
                let mut cdf = Vec::with_capacity(weights.len());
                let mut acc = 0.0;
                for w in weights {
                    acc += w / total;
                    cdf.push(acc);
                }
                (0..count)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let i = cdf.partition_point(|&c| c < u).min(points.len() - 1);
                        points[i].clone()
                    })
                    .collect()
            }
        }
    }

    /// Measure of the free coordinates given `fixed` coordinates at `values`,
    /// together with the measure of the fixed coordinates, when `mu` factorizes.
    pub fn split(&self, fixed: &[usize], values: &[f64]) -> Result<(BaseMeasure, BaseMeasure)> {
        let d = self.dim();
        let free: Vec<usize> = (0..d).filter(|i| !fixed.contains(i)).collect();
        if free.is_empty() {
            return Err(Error::InvalidArgument("cannot condition on every coordinate".into()));
        }
        match &self.kind {
            MeasureKind::BoxLebesgue { lower, upper } => {
                let cond = BaseMeasure::boxed(
                    free.iter().map(|&i| lower[i]).collect(),
                    free.iter().map(|&i| upper[i]).collect(),
                )?;
                let marg = BaseMeasure::boxed(
                    fixed.iter().map(|&i| lower[i]).collect(),
                    fixed.iter().map(|&i| upper[i]).collect(),
                )?;
                Ok((cond, marg))
            }
            MeasureKind::Gaussian { mean, covariance } => {
                let sub = |rows: &[usize], cols: &[usize]| {
                    DMatrix::from_fn(rows.len(), cols.len(), |i, j| covariance[rows[i]][cols[j]])
                };
                let s11 = sub(&free, &free);
                let s12 = sub(&free, fixed);
                let s22 = sub(fixed, fixed);
                let s22_chol = s22.clone().cholesky().ok_or_else(|| {
                    Error::InvalidArgument("conditioning block is not positive definite".into())
                })?;
                let diff = DVector::from_iterator(
                    fixed.len(),
                    fixed.iter().zip(values).map(|(&i, v)| v - mean[i]),
                );
                let shift = &s12 * s22_chol.solve(&diff);
                let cov = &s11 - &s12 * s22_chol.solve(&s12.transpose());
                let cov = (&cov + cov.transpose()) * 0.5;
                let cond = BaseMeasure::gaussian(
                    free.iter().enumerate().map(|(k, &i)| mean[i] + shift[k]).collect(),
                    (0..free.len())
                        .map(|i| (0..free.len()).map(|j| cov[(i, j)]).collect())
                        .collect(),
                )?;
                let marg = BaseMeasure::gaussian(
                    fixed.iter().map(|&i| mean[i]).collect(),
                    (0..fixed.len())
                        .map(|i| (0..fixed.len()).map(|j| s22[(i, j)]).collect())
                        .collect(),
                )?;
                Ok((cond, marg))
            }
            MeasureKind::Discrete { .. } => Err(Error::NotFactorizable("discrete".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_exact_on_unit_interval() {
        let m = BaseMeasure::unit_box(1);
        let r = m.integrate(&IntegrationScheme::default(), |x| x[0]).unwrap();
        assert_abs_diff_eq!(r.value, 0.5, epsilon = 1e-12);
        assert!(r.error_estimate < 1e-12);
    }

    #[test]
    fn gaussian_second_moment() {
        let m = BaseMeasure::gaussian(vec![0.0], vec![vec![2.0]]).unwrap();
        let r = m.integrate(&IntegrationScheme::default(), |x| x[0] * x[0]).unwrap();
        assert_abs_diff_eq!(r.value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn shifted_square_on_unit_interval() {
        let m = BaseMeasure::unit_box(1);
        let r = m
            .integrate(&IntegrationScheme::default(), |x| (1.0 + x[0]).powi(2))
            .unwrap();
        assert_abs_diff_eq!(r.value, 7.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn monomials_exact_up_to_rule_degree() {
        for nodes in [2usize, 5, 16, 64] {
            let m = BaseMeasure::unit_box(1);
            let s = IntegrationScheme::quadrature(nodes);
            for k in 0..(2 * nodes) {
                let r = m.integrate(&s, |x| x[0].powi(k as i32)).unwrap();
                let exact = 1.0 / (k as f64 + 1.0);
                assert!(((r.value - exact) / exact).abs() < 1e-10, "nodes {nodes} k {k}");
            }
            let g = BaseMeasure::standard_gaussian(1);
            for k in (0..(2 * nodes).min(40)).step_by(2) {
                let r = g.integrate(&s, |x| x[0].powi(k as i32)).unwrap();
                // (k-1)!!
                let exact: f64 = (1..k).step_by(2).map(|j| j as f64).product();
                assert!(((r.value - exact) / exact).abs() < 1e-10, "hermite nodes {nodes} k {k}");
            }
        }
    }

    #[test]
    fn correlated_gaussian_cross_moment() {
        let m = BaseMeasure::gaussian(vec![1.0, -1.0], vec![vec![2.0, 0.6], vec![0.6, 1.0]]).unwrap();
        let r = m
            .integrate(&IntegrationScheme::quadrature(16), |x| x[0] * x[1])
            .unwrap();
        assert_abs_diff_eq!(r.value, 0.6 - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn total_mass_cases() {
        assert_eq!(BaseMeasure::unit_box(2).total_mass(), 1.0);
        assert_eq!(BaseMeasure::standard_gaussian(3).total_mass(), 1.0);
        let d = BaseMeasure::discrete(vec![vec![0.0], vec![1.0]], vec![0.5, 2.0]).unwrap();
        assert_eq!(d.total_mass(), 2.5);
    }

    #[test]
    fn quadrature_dimension_limit() {
        let m = BaseMeasure::unit_box(4);
        assert!(matches!(
            m.integrate(&IntegrationScheme::default(), |_| 1.0),
            Err(Error::QuadratureDimension(4))
        ));
        let r = m
            .integrate(&IntegrationScheme::monte_carlo(1000, 1), |_| 1.0)
            .unwrap();
        assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        let m = BaseMeasure::unit_box(1);
        assert!(m
            .integrate(&IntegrationScheme::default(), |x| 1.0 / (x[0] - x[0]))
            .is_err());
    }

    #[test]
    fn draws_are_deterministic_and_centred() {
        let count = 200_000;
        let g = BaseMeasure::standard_gaussian(1);
        let a = g.draw(count, 5);
        assert_eq!(a, g.draw(count, 5));
        let mean: f64 = a.iter().map(|x| x[0]).sum::<f64>() / count as f64;
        assert!(mean.abs() < 4.0 / (count as f64).sqrt());
        let b = BaseMeasure::unit_box(1).draw(count, 6);
        let mean: f64 = b.iter().map(|x| x[0]).sum::<f64>() / count as f64;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12f64).sqrt() / (count as f64).sqrt());
    }

    #[test]
    fn monte_carlo_error_covers_truth() {
        let m = BaseMeasure::unit_box(1);
        let mut covered = 0;
        for seed in 0..200 {
            let r = m
                .integrate(&IntegrationScheme::monte_carlo(2000, seed), |x| x[0] * x[0])
                .unwrap();
            if (r.value - 1.0 / 3.0).abs() <= 4.0 * r.error_estimate {
                covered += 1;
            }
        }
        assert!(covered >= 198, "covered {covered}/200");
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(
            "quad:64".parse::<IntegrationScheme>().unwrap(),
            IntegrationScheme::quadrature(64)
        );
        assert_eq!(
            "mc:100:7".parse::<IntegrationScheme>().unwrap(),
            IntegrationScheme::monte_carlo(100, 7)
        );
        assert!("quad:1".parse::<IntegrationScheme>().is_err());
        assert!("simpson:4".parse::<IntegrationScheme>().is_err());
    }

    #[test]
    fn gaussian_split_conditions_in_closed_form() {
        let m = BaseMeasure::gaussian(vec![0.0, 1.0], vec![vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap();
        let (cond, marg) = m.split(&[1], &[2.0]).unwrap();
        assert_abs_diff_eq!(cond.mean().unwrap()[0], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(cond.covariance().unwrap()[(0, 0)], 0.875, epsilon = 1e-14);
        assert_abs_diff_eq!(marg.covariance().unwrap()[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_invalid_measures() {
        assert!(BaseMeasure::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(BaseMeasure::gaussian(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(BaseMeasure::discrete(vec![vec![0.0]], vec![0.0]).is_err());
        let text = r#"{"type":"box_lebesgue","lower":[0.0],"upper":[1.0],"oops":1}"#;
        assert!(serde_json::from_str::<BaseMeasure>(text).is_err());
        let ok = r#"{"type":"box_lebesgue","lower":[0.0],"upper":[1.0]}"#;
        assert_eq!(serde_json::from_str::<BaseMeasure>(ok).unwrap(), BaseMeasure::unit_box(1));
    }
}
