//! Exact samplers for squared family densities and goodness-of-fit helpers.

use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::measure::{gauss_legendre, BaseMeasure, MeasureKind};
use crate::model::SquaredFamilyModel;
use crate::rng;

pub const DEFAULT_SAFETY: f64 = 1.1;
pub const DEFAULT_CDF_NODES: usize = 4096;
pub const MIN_ACCEPTANCE: f64 = 1e-4;

const GRID_1D: usize = 4096;
const GRID_2D: usize = 128;
const GRID_3D: usize = 32;
/// Gaussian envelopes are searched over `mean +- GAUSSIAN_SPAN * sd`.
const GAUSSIAN_SPAN: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub samples: Vec<Vec<f64>>,
    pub proposals: usize,
    pub acceptance_rate: f64,
    pub envelope: f64,
    /// Set if some proposal had `ratio > envelope`.
    pub envelope_violation: bool,
}

fn envelope_probes(measure: &BaseMeasure) -> Result<Vec<Vec<f64>>> {
    let d = measure.dim();
    let per_dim = match d {
        1 => GRID_1D,
        2 => GRID_2D,
        3 => GRID_3D,
        _ => return Err(Error::QuadratureDimension(d)),
    };
    let ranges: Vec<(f64, f64)> = match measure.kind() {
        MeasureKind::BoxLebesgue { lower, upper } => {
            lower.iter().zip(upper).map(|(l, u)| (*l, *u)).collect()
        }
        MeasureKind::Gaussian { mean, covariance } => mean
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let sd = covariance[i][i].sqrt();
                (m - GAUSSIAN_SPAN * sd, m + GAUSSIAN_SPAN * sd)
            })
            .collect(),
        MeasureKind::Discrete { points, .. } => return Ok(points.clone()),
    };
    let axis: Vec<Vec<f64>> = ranges
        .iter()
        .map(|(l, u)| {
            (0..per_dim)
                .map(|i| l + (u - l) * i as f64 / (per_dim - 1) as f64)
                .collect()
        })
        .collect();
    let total = per_dim.pow(d as u32);
    Ok((0..total)
        .map(|mut idx| {
            (0..d)
                .map(|k| {
                    let v = axis[k][idx % per_dim];
                    idx /= per_dim;
                    v
                })
                .collect()
        })
        .collect())
}

/// Rejection sampling of a squared family model against its normalized
/// base measure.
///
/// The envelope is `safety` times the largest density ratio on a grid
/// (4096 nodes in 1D, 128^2 in 2D, 32^3 in 3D). Discrete measures are
/// sampled exactly from their point masses.
pub fn rejection_sample(
    model: &SquaredFamilyModel,
    count: usize,
    seed: u64,
    safety: f64,
) -> Result<SampleReport> {
    let scale = model.measure().total_mass() / model.normalizer();
    let mut psi = vec![0.0; model.dim()];
    rejection_sample_with(model.measure(), count, seed, safety, |x| {
        model.features().eval_into(x, &mut psi)?;
        Ok(model.numerator_from_features(&psi) * scale)
    })
}

/// Rejection sampling of any density given as its ratio to the normalized
/// base measure `mu / mu(X)`.
pub fn rejection_sample_with<F>(
    measure: &BaseMeasure,
    count: usize,
    seed: u64,
    safety: f64,
    mut ratio: F,
) -> Result<SampleReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(safety >= 1.0) {
        return Err(Error::InvalidArgument(format!("safety must be >= 1, got {safety}")));
    }
    let mut rng = rng::seeded(seed);
    if let MeasureKind::Discrete { points, weights } = measure.kind() {
        let mut cdf = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (p, w) in points.iter().zip(weights) {
            acc += w * ratio(p)?;
            cdf.push(acc);
        }
        let samples = (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let i = cdf.partition_point(|&c| c <= u).min(points.len() - 1);
                points[i].clone()
            })
            .collect();
        return Ok(SampleReport {
            samples,
            proposals: count,
            acceptance_rate: 1.0,
            envelope: 1.0,
            envelope_violation: false,
        });
    }
    let mut sup: f64 = 0.0;
    for x in envelope_probes(measure)? {
        sup = sup.max(ratio(&x)?);
    }
    let envelope = safety * sup;
    if !(envelope > 0.0) || !envelope.is_finite() {
        return Err(Error::NonFinite(format!("envelope {envelope}")));
    }
    if 1.0 / envelope < MIN_ACCEPTANCE {
        return Err(Error::LowAcceptance(1.0 / envelope));
    }
    let mut samples = Vec::with_capacity(count);
    let mut proposals = 0usize;
    let mut violation = false;
    let batch = 1024;
    while samples.len() < count {
        for x in measure.draw_with(batch, &mut rng) {
            proposals += 1;
            let r = ratio(&x)?;
            if r > envelope {
                violation = true;
            }
            if rng.random::<f64>() * envelope < r {
                samples.push(x);
                if samples.len() == count {
                    break;
                }
            }
        }
        if proposals >= 1_000_000 && (samples.len() as f64) < MIN_ACCEPTANCE * proposals as f64 {
            return Err(Error::LowAcceptance(samples.len() as f64 / proposals as f64));
        }
    }
    Ok(SampleReport {
        samples,
        proposals,
        acceptance_rate: if proposals == 0 { 1.0 } else { count as f64 / proposals as f64 },
        envelope,
        envelope_violation: violation,
    })
}

/// Tabulated CDF of a one-dimensional model on a box, exact per cell up to
/// an 8-point Gauss-Legendre rule.
#[derive(Clone, Debug)]
pub struct GridCdf {
    pub nodes: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl GridCdf {
    pub fn new(model: &SquaredFamilyModel, grid_nodes: usize) -> Result<Self> {
        let (lo, hi) = match model.measure().kind() {
            MeasureKind::BoxLebesgue { lower, upper } if lower.len() == 1 => (lower[0], upper[0]),
            _ => {
                return Err(Error::InvalidArgument(
                    "inverse CDF sampling needs a one-dimensional box measure".into(),
                ))
            }
        };
        if grid_nodes < 2 {
            return Err(Error::InvalidArgument("need at least two CDF nodes".into()));
        }
        let (t, w) = gauss_legendre(8);
        let nodes: Vec<f64> = (0..grid_nodes)
            .map(|i| lo + (hi - lo) * i as f64 / (grid_nodes - 1) as f64)
            .collect();
        let mut psi = vec![0.0; model.dim()];
        let mut cdf = Vec::with_capacity(grid_nodes);
        cdf.push(0.0);
        let mut acc = 0.0;
        for win in nodes.windows(2) {
            let (a, b) = (win[0], win[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (ti, wi) in t.iter().zip(&w) {
                model.features().eval_into(&[mid + half * ti], &mut psi)?;
                acc += half * wi * model.numerator_from_features(&psi);
            }
            cdf.push(acc);
        }
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        Ok(GridCdf { nodes, cdf })
    }

    /// Piecewise-linear CDF.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return 0.0;
        }
        if x >= self.nodes[n - 1] {
            return 1.0;
        }
        let i = self.nodes.partition_point(|&v| v <= x) - 1;
        let s = (x - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        self.cdf[i] + s * (self.cdf[i + 1] - self.cdf[i])
    }

    /// Piecewise-linear inverse; monotone in `u`.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = self.nodes.len();
        let u = u.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, n - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let s = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.nodes[i - 1] + s * (self.nodes[i] - self.nodes[i - 1])
    }
}

/// Maps uniforms through the model's inverse CDF.
pub fn inverse_cdf_transform(model: &SquaredFamilyModel, uniforms: &[f64], grid_nodes: usize) -> Result<Vec<f64>> {
    let table = GridCdf::new(model, grid_nodes)?;
    Ok(uniforms.iter().map(|&u| table.quantile(u)).collect())
}

pub fn inverse_cdf_sample_1d(
    model: &SquaredFamilyModel,
    count: usize,
    seed: u64,
    grid_nodes: usize,
) -> Result<Vec<f64>> {
    let mut rng = rng::seeded(seed);
    let us: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
    inverse_cdf_transform(model, &us, grid_nodes)
}

/// One-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov p-value for statistic `d` and effective size `n`
/// (`n` for one sample, `na nb / (na + nb)` for two).
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if (k as i64) % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of observed counts against bin probabilities.
pub fn chi_square_test(counts: &[usize], probabilities: &[f64]) -> Result<ChiSquareTest> {
    if counts.len() != probabilities.len() || counts.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: probabilities.len(),
            got: counts.len(),
        });
    }
    let n: usize = counts.iter().sum();
    let statistic: f64 = counts
        .iter()
        .zip(probabilities)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dof = counts.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}

/// Chi-square test of 1D samples on `bins` bins of equal model mass.
pub fn equal_mass_chi_square(model: &SquaredFamilyModel, samples: &[f64], bins: usize) -> Result<ChiSquareTest> {
    let table = GridCdf::new(model, DEFAULT_CDF_NODES)?;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = ((table.cdf(x) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    chi_square_test(&counts, &vec![1.0 / bins as f64; bins])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;
    use crate::measure::{BaseMeasure, IntegrationScheme};
    use crate::model::Parameter;
    use nalgebra::DVector;

    fn linear(theta: &[f64]) -> SquaredFamilyModel {
        SquaredFamilyModel::with_scheme(
            FeatureMap::polynomial(1, 1).unwrap(),
            BaseMeasure::unit_box(1),
            &IntegrationScheme::default(),
            Parameter::Vector(DVector::from_column_slice(theta)),
        )
        .unwrap()
    }

    #[test]
    fn uniform_acceptance() {
        let r = rejection_sample(&linear(&[0.0, 1.0]), 20_000, 1, DEFAULT_SAFETY).unwrap();
        assert!(r.acceptance_rate >= 1.0 / DEFAULT_SAFETY - 0.02);
        assert!(!r.envelope_violation);
    }

    #[test]
    fn rejection_mean() {
        let n = 100_000;
        let r = rejection_sample(&linear(&[1.0, 1.0]), n, 7, DEFAULT_SAFETY).unwrap();
        let mean = r.samples.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        // second moment (3/7) * int x^2 (x+1)^2 = (3/7)(1/5 + 1/2 + 1/3)
        let m2: f64 = 3.0 / 7.0 * (1.0 / 5.0 + 0.5 + 1.0 / 3.0);
        let exact = 17.0 / 28.0;
        let sd = (m2 - exact * exact).sqrt();
        assert!((mean - exact).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!(!r.envelope_violation);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = linear(&[1.0, -0.3]);
        assert_eq!(
            rejection_sample(&m, 100, 3, 1.1).unwrap(),
            rejection_sample(&m, 100, 3, 1.1).unwrap()
        );
        assert_eq!(
            inverse_cdf_sample_1d(&m, 100, 3, 512).unwrap(),
            inverse_cdf_sample_1d(&m, 100, 3, 512).unwrap()
        );
    }

    #[test]
    fn inverse_cdf_uniform_ks() {
        let n = 10_000;
        let xs = inverse_cdf_sample_1d(&linear(&[0.0, 1.0]), n, 11, DEFAULT_CDF_NODES).unwrap();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!(d < 1.63 / (n as f64).sqrt() + 1e-3);
    }

    #[test]
    fn inverse_cdf_monotone() {
        let m = linear(&[1.0, -0.4]);
        let us: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let xs = inverse_cdf_transform(&m, &us, 256).unwrap();
        assert!(xs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn samplers_agree() {
        let m = linear(&[1.0, -0.4]);
        let a: Vec<f64> = rejection_sample(&m, 10_000, 5, DEFAULT_SAFETY)
            .unwrap()
            .samples
            .into_iter()
            .map(|x| x[0])
            .collect();
        let b = inverse_cdf_sample_1d(&m, 10_000, 6, DEFAULT_CDF_NODES).unwrap();
        let d = ks_two_sample(&a, &b);
        assert!(ks_pvalue(d, 5_000.0) > 1e-3);
    }

    #[test]
    fn gaussian_base_measure() {
        let map = FeatureMap::cosine(vec![vec![1.0], vec![2.0], vec![0.0]], vec![0.3, 0.0, 0.0]).unwrap();
        let m = SquaredFamilyModel::with_scheme(
            map,
            BaseMeasure::standard_gaussian(1),
            &IntegrationScheme::default(),
            Parameter::Vector(DVector::from_vec(vec![1.0, 0.5, 0.7, 0.2])),
        )
        .unwrap();
        let r = rejection_sample(&m, 20_000, 2, DEFAULT_SAFETY).unwrap();
        assert!(!r.envelope_violation);
        let mean = r.samples.iter().map(|x| x[0]).sum::<f64>() / 20_000.0;
        let exact = m.measure().integrate(&IntegrationScheme::default(), |x| x[0] * m.density(x).unwrap()).unwrap().value;
        assert!((mean - exact).abs() < 0.05);
    }

    #[test]
    fn ks_pvalue_limits() {
        assert_eq!(ks_pvalue(0.0, 100.0), 1.0);
        assert!(ks_pvalue(0.5, 100.0) < 1e-10);
        // the 5% critical value of the Kolmogorov distribution is about 1.358
        let p = ks_pvalue(1.358 / 100.0, 1e4);
        assert!((p - 0.05).abs() < 0.003);
    }
}
