//! Fisher information, scores, Bregman and statistical divergences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::gfamily::{g_eval, g_prime, score_weight, GSpec};
use crate::measure::{BaseMeasure, Cubature, IntegrationScheme};
use crate::model::SquaredFamilyModel;
use crate::sampling::{rejection_sample, DEFAULT_SAFETY};

/// Densities below this are treated as zero inside logarithms.
pub const DENSITY_FLOOR: f64 = 1e-300;
/// Grid densities must integrate to one within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FisherVariant {
    SquaredSingular,
    SquaredAugmented { sigma: f64 },
    GFamily { gspec: GSpec, sigma: Option<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    pub variant: FisherVariant,
}

impl FisherMatrix {
    fn new(matrix: DMatrix<f64>, variant: FisherVariant) -> Self {
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        FisherMatrix { matrix, variant }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.symmetric_eigenvalues().min()
    }

    pub fn norm2(&self) -> f64 {
        self.matrix
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Symmetric with `min eigenvalue >= -1e-8 |G|_2`.
    pub fn is_valid(&self) -> bool {
        self.min_eigenvalue() >= -1e-8 * self.norm2()
    }
}

fn theta_of(model: &SquaredFamilyModel) -> Result<&DVector<f64>> {
    model
        .theta()
        .ok_or_else(|| Error::InvalidArgument("operation defined for vector parameters only".into()))
}

/// `grad_theta log p(x | theta) = 2 psi / (theta^T psi) - 2 K theta / z`.
pub fn score(model: &SquaredFamilyModel, x: &[f64]) -> Result<DVector<f64>> {
    let theta = theta_of(model)?;
    let psi = model.features().eval_features(x)?;
    let a = theta.dot(&psi);
    if a == 0.0 {
        return Err(Error::ZeroNumerator);
    }
    let kt = model.kernel().matrix() * theta;
    Ok(psi * (2.0 / a) - kt * (2.0 / model.normalizer()))
}

/// `grad z = 2 K theta`.
pub fn normalizer_gradient(model: &SquaredFamilyModel) -> Result<DVector<f64>> {
    Ok(model.kernel().matrix() * theta_of(model)? * 2.0)
}

/// `G = 4K/z - 4 K theta theta^T K / z^2`.
pub fn fisher_squared(model: &SquaredFamilyModel) -> Result<FisherMatrix> {
    let z = model.normalizer();
    if !(z > 0.0) {
        return Err(Error::NullSpaceParameter(z));
    }
    let k = model.kernel().matrix();
    let grad = normalizer_gradient(model)?;
    let g = k * (4.0 / z) - &grad * grad.transpose() / (z * z);
    Ok(FisherMatrix::new(g, FisherVariant::SquaredSingular))
}

/// Fisher information of `a ~ N(log z(theta), sigma^2)`:
/// `grad z grad z^T / (sigma^2 z^2)`.
pub fn gaussian_fisher(grad_z: &DVector<f64>, z: f64, sigma: f64) -> DMatrix<f64> {
    grad_z * grad_z.transpose() / (sigma * sigma * z * z)
}

/// Fisher information of `(x, a)`: the squared family term plus the Gaussian one.
pub fn fisher_augmented(model: &SquaredFamilyModel, sigma: f64) -> Result<FisherMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let base = fisher_squared(model)?;
    let extra = gaussian_fisher(&normalizer_gradient(model)?, model.normalizer(), sigma);
    Ok(FisherMatrix::new(
        base.matrix + extra,
        FisherVariant::SquaredAugmented { sigma },
    ))
}

/// Fisher information of a g-family by numerical integration:
/// `E_p[psi psi^T (g'/g)^2] - grad z grad z^T / z^2`, or with augmentation
/// `E_p[psi psi^T (g'/g)^2] + (sigma^-2 - 1) grad z grad z^T / z^2`.
pub fn fisher_g_family(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    scheme: &IntegrationScheme,
    sigma: Option<f64>,
) -> Result<FisherMatrix> {
    if let Some(s) = sigma {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {s}")));
        }
    }
    let n = map.output_dim();
    if theta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: theta.len(),
        });
    }
    let tri = n * (n + 1) / 2;
    let mut psi = vec![0.0; n];
    // layout: [z, grad z (n), upper triangle of int psi psi^T g'^2/g]
    let (v, _) = measure.integrate_many(1 + n + tri, scheme, |x, out| {
        map.eval_into(x, &mut psi)?;
        let a: f64 = theta.iter().zip(&psi).map(|(t, p)| t * p).sum();
        let g = g_eval(spec, a);
        if g < 0.0 {
            return Err(Error::InvalidArgument(format!("g({a}) = {g} is negative")));
        }
        out[0] = g;
        let gp = g_prime(spec, a)?;
        for i in 0..n {
            out[1 + i] = psi[i] * gp;
        }
        let w = score_weight(spec, a)?;
        let mut idx = 1 + n;
        for i in 0..n {
            for j in i..n {
                out[idx] = psi[i] * psi[j] * w;
                idx += 1;
            }
        }
        Ok(())
    })?;
    let z = v[0];
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::NullSpaceParameter(z));
    }
    let grad = DVector::from_column_slice(&v[1..1 + n]);
    let mut e = DMatrix::zeros(n, n);
    let mut idx = 1 + n;
    for i in 0..n {
        for j in i..n {
            e[(i, j)] = v[idx] / z;
            e[(j, i)] = v[idx] / z;
            idx += 1;
        }
    }
    let coef = match sigma {
        None => -1.0,
        Some(s) => 1.0 / (s * s) - 1.0,
    };
    let g = e + &grad * grad.transpose() * (coef / (z * z));
    Ok(FisherMatrix::new(
        g,
        FisherVariant::GFamily {
            gspec: *spec,
            sigma,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloFisher {
    pub mean: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    pub samples: usize,
}

/// `E[score score^T]` estimated from samples of the model.
pub fn fisher_from_samples(model: &SquaredFamilyModel, samples: &[Vec<f64>]) -> Result<MonteCarloFisher> {
    let n = model.dim();
    let mut sum = DMatrix::zeros(n, n);
    let mut sum_sq = DMatrix::zeros(n, n);
    let mut used = 0usize;
    for x in samples {
        let s = match score(model, x) {
            Ok(s) => s,
            Err(Error::ZeroNumerator) => continue,
            Err(e) => return Err(e),
        };
        let outer = &s * s.transpose();
        sum_sq += outer.component_mul(&outer);
        sum += outer;
        used += 1;
    }
    if used < 2 {
        return Err(Error::InvalidArgument("need at least two usable samples".into()));
    }
    let m = used as f64;
    let mean = &sum / m;
    let var = (&sum_sq / m - mean.component_mul(&mean)) * (m / (m - 1.0));
    let std_error = var.map(|v| (v.max(0.0) / m).sqrt());
    Ok(MonteCarloFisher {
        mean,
        std_error,
        samples: used,
    })
}

/// Monte Carlo Fisher estimate from `count` rejection samples.
pub fn monte_carlo_fisher(model: &SquaredFamilyModel, count: usize, seed: u64) -> Result<MonteCarloFisher> {
    let draws = rejection_sample(model, count, seed, DEFAULT_SAFETY)?;
    if draws.envelope_violation {
        return Err(Error::Integration("rejection envelope violated".into()));
    }
    fisher_from_samples(model, &draws.samples)
}

/// `theta^T grad log p(x | theta)` at each probe, using the g-family score
/// `psi g'/g - grad z / z`. Probes where `g` vanishes are reported as NaN.
pub fn orthogonality_residuals(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    probes: &[Vec<f64>],
    scheme: &IntegrationScheme,
) -> Result<Vec<f64>> {
    // theta^T grad z and z on the same rule so the Euler identity is exact
    let n = map.output_dim();
    let mut psi = vec![0.0; n];
    let (v, _) = measure.integrate_many(2, scheme, |x, out| {
        map.eval_into(x, &mut psi)?;
        let a: f64 = theta.iter().zip(&psi).map(|(t, p)| t * p).sum();
        out[0] = g_eval(spec, a);
        out[1] = a * g_prime(spec, a)?;
        Ok(())
    })?;
    let (z, dir) = (v[0], v[1]);
    if !(z > 0.0) {
        return Err(Error::NullSpaceParameter(z));
    }
    probes
        .iter()
        .map(|x| {
            map.eval_into(x, &mut psi)?;
            let a: f64 = theta.iter().zip(&psi).map(|(t, p)| t * p).sum();
            let g = g_eval(spec, a);
            if g == 0.0 {
                return Ok(f64::NAN);
            }
            Ok(a * g_prime(spec, a)? / g - dir / z)
        })
        .collect()
}

/// True iff `|theta^T grad log p| < tol` at every probe.
pub fn orthogonal_singularity_check(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    probes: &[Vec<f64>],
    tol: f64,
    scheme: &IntegrationScheme,
) -> Result<bool> {
    let r = orthogonality_residuals(spec, map, measure, theta, probes, scheme)?;
    Ok(r.iter().all(|v| v.abs() < tol))
}

/// `(theta - theta')^T K (theta - theta')`.
pub fn bregman_divergence(k: &DMatrix<f64>, theta: &DVector<f64>, theta_prime: &DVector<f64>) -> Result<f64> {
    if theta.len() != k.nrows() || theta_prime.len() != k.nrows() {
        return Err(Error::DimensionMismatch {
            expected: k.nrows(),
            got: if theta.len() != k.nrows() { theta.len() } else { theta_prime.len() },
        });
    }
    let d = theta - theta_prime;
    Ok(d.dot(&(k * &d)))
}

/// `Tr((Theta - Theta') K (Theta - Theta')^T)` for `m x n` parameters.
pub fn bregman_divergence_matrix(k: &DMatrix<f64>, theta: &DMatrix<f64>, theta_prime: &DMatrix<f64>) -> Result<f64> {
    if theta.shape() != theta_prime.shape() || theta.ncols() != k.nrows() {
        return Err(Error::DimensionMismatch {
            expected: k.nrows(),
            got: theta.ncols(),
        });
    }
    let d = theta - theta_prime;
    Ok((&d * k * d.transpose()).trace())
}

/// `1/2 int (f - g)^2 dmu`.
pub fn sq_l2<F, G>(f: F, g: G, measure: &BaseMeasure, scheme: &IntegrationScheme) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<f64>,
{
    let (v, _) = measure.integrate_many(1, scheme, |x, out| {
        let d = f(x)? - g(x)?;
        out[0] = d * d;
        Ok(())
    })?;
    Ok(0.5 * v[0])
}

/// `1/2 int |f - g|^2 dmu` for vector-valued `f`, `g` of length `width`.
pub fn sq_l2_vector<F, G>(width: usize, f: F, g: G, measure: &BaseMeasure, scheme: &IntegrationScheme) -> Result<f64>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()>,
    G: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    let mut a = vec![0.0; width];
    let mut b = vec![0.0; width];
    let (v, _) = measure.integrate_many(1, scheme, |x, out| {
        f(x, &mut a)?;
        g(x, &mut b)?;
        out[0] = a.iter().zip(&b).map(|(u, w)| (u - w) * (u - w)).sum();
        Ok(())
    })?;
    Ok(0.5 * v[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Kl,
    Tv,
    Sh,
}

impl std::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Divergence::Kl),
            "tv" => Ok(Divergence::Tv),
            "sh" | "hellinger" => Ok(Divergence::Sh),
            _ => Err(Error::InvalidArgument(format!("unknown divergence {s:?}"))),
        }
    }
}

fn check_grid(p: &[f64], q: &[f64], weights: &[f64]) -> Result<()> {
    if p.len() != weights.len() || q.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: if p.len() != weights.len() { p.len() } else { q.len() },
        });
    }
    for dens in [p, q] {
        if dens.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("densities must be finite and nonnegative".into()));
        }
        let mass: f64 = dens.iter().zip(weights).map(|(d, w)| d * w).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized(mass));
        }
    }
    Ok(())
}

/// Divergence between densities tabulated at the nodes of a rule with
/// `weights`. KL is `int p log(p/q)`, `+inf` if `q = 0` where `p > 0`;
/// TV is `1/2 int |p - q|`; SH is `1/2 int (sqrt p - sqrt q)^2`.
pub fn divergence_grid(p: &[f64], q: &[f64], weights: &[f64], which: Divergence) -> Result<f64> {
    check_grid(p, q, weights)?;
    let terms = p.iter().zip(q).zip(weights);
    Ok(match which {
        Divergence::Kl => {
            let mut s = 0.0;
            for ((&pi, &qi), &w) in terms {
                if pi <= DENSITY_FLOOR {
                    continue;
                }
                if qi == 0.0 {
                    return Ok(f64::INFINITY);
                }
                s += w * pi * (pi.ln() - qi.max(DENSITY_FLOOR).ln());
            }
            s.max(0.0)
        }
        Divergence::Tv => 0.5 * terms.map(|((a, b), w)| w * (a - b).abs()).sum::<f64>(),
        Divergence::Sh => {
            0.5 * terms
                .map(|((a, b), w)| w * (a.sqrt() - b.sqrt()).powi(2))
                .sum::<f64>()
        }
    })
}

/// Slacks of `SH <= TV <= sqrt(2 SH) <= sqrt(KL)`; all are `>= 0` when the
/// chain holds.
pub fn divergence_chain_slacks(p: &[f64], q: &[f64], weights: &[f64]) -> Result<[f64; 3]> {
    let sh = divergence_grid(p, q, weights, Divergence::Sh)?;
    let tv = divergence_grid(p, q, weights, Divergence::Tv)?;
    let kl = divergence_grid(p, q, weights, Divergence::Kl)?;
    Ok([tv - sh, (2.0 * sh).sqrt() - tv, kl.sqrt() - (2.0 * sh).sqrt()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReversePinsker {
    /// `inf p / q` over the grid.
    pub r0: f64,
    pub tv: f64,
    /// `KL(q : p) = int q log(q / p)`.
    pub kl: f64,
    /// `sqrt(log(1/r0) / (1 - r0) * TV)`.
    pub bound: f64,
    /// The same expression with the constant halved. It is not a valid bound
    /// in general and is reported for comparison only.
    pub half_constant_bound: f64,
}

impl ReversePinsker {
    pub fn holds(&self) -> bool {
        self.kl <= self.bound * self.bound
    }
}

/// Reverse Pinsker bound for `KL(q : p)` when `r0 = inf p/q` is in `(0, 1)`.
pub fn reverse_pinsker_bound(p: &[f64], q: &[f64], weights: &[f64]) -> Result<ReversePinsker> {
    check_grid(p, q, weights)?;
    let r0 = p
        .iter()
        .zip(q)
        .filter(|(_, &qi)| qi > 0.0)
        .map(|(pi, qi)| pi / qi)
        .fold(f64::INFINITY, f64::min);
    if !(r0 > 0.0 && r0 < 1.0) {
        return Err(Error::RatioOutOfRange(r0));
    }
    let tv = divergence_grid(p, q, weights, Divergence::Tv)?;
    let kl = divergence_grid(q, p, weights, Divergence::Kl)?;
    let c = (1.0 / r0).ln() / (1.0 - r0);
    Ok(ReversePinsker {
        r0,
        tv,
        kl,
        bound: (c * tv).sqrt(),
        half_constant_bound: (0.5 * c * tv).sqrt(),
    })
}

/// `(1 - eps) p + eps / mass`, the mixture with the normalized base measure.
pub fn smooth_density(p: &[f64], eps: f64, mass: f64) -> Vec<f64> {
    p.iter().map(|v| (1.0 - eps) * v + eps / mass).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformalCheck {
    /// Finite-difference Hessian of `z`.
    pub lhs: DMatrix<f64>,
    /// `((k - 1) / k) z G` with `G` the augmented Fisher information at `sigma = 1`.
    pub rhs: DMatrix<f64>,
    pub max_abs_diff: f64,
}

/// Central-difference step `1e-4 max(1, |theta|)`.
pub fn default_fd_step(theta: &DVector<f64>) -> f64 {
    1e-4 * theta.norm().max(1.0)
}

/// Compares the Hessian of `z` with the scaled augmented Fisher information
/// of an even-order monomial family.
pub fn conformal_hessian_check(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    fd_step: Option<f64>,
    scheme: &IntegrationScheme,
) -> Result<ConformalCheck> {
    let GSpec::Monomial { k } = *spec else {
        return Err(Error::InvalidArgument("conformal check needs a monomial g".into()));
    };
    let n = map.output_dim();
    let h = fd_step.unwrap_or_else(|| default_fd_step(theta));
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let rule: Cubature = measure.cubature(scheme)?;
    let mut feats = Vec::with_capacity(rule.len() * n);
    let mut psi = vec![0.0; n];
    for x in rule.points() {
        map.eval_into(x, &mut psi)?;
        feats.extend_from_slice(&psi);
    }
    let z_at = |t: &DVector<f64>| -> f64 {
        feats
            .chunks_exact(n)
            .zip(rule.weights())
            .map(|(p, w)| {
                let a: f64 = t.iter().zip(p).map(|(u, v)| u * v).sum();
                w * g_eval(spec, a)
            })
            .sum()
    };
    let z = z_at(theta);
    if !(z > 0.0) {
        return Err(Error::NullSpaceParameter(z));
    }
    let mut lhs = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let shifted = |si: f64, sj: f64| {
                let mut t = theta.clone();
                t[i] += si * h;
                t[j] += sj * h;
                z_at(&t)
            };
            let v = (shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0))
                / (4.0 * h * h);
            if !v.is_finite() {
                return Err(Error::NonFinite("finite-difference Hessian".into()));
            }
            lhs[(i, j)] = v;
            lhs[(j, i)] = v;
        }
    }
    let g = fisher_g_family(spec, map, measure, theta, scheme, Some(1.0))?;
    let kf = k as f64;
    let rhs = g.matrix * ((kf - 1.0) / kf * z);
    let max_abs_diff = (&lhs - &rhs).amax();
    Ok(ConformalCheck {
        lhs,
        rhs,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Parameter;
    use approx::assert_abs_diff_eq;

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
    fn uniform_score_is_zero() {
        let s = score(&linear(&[0.0, 1.0]), &[0.5]).unwrap();
        assert!(s.amax() < 1e-14);
    }

    #[test]
    fn score_orthogonal_and_matches_fd() {
        let m = linear(&[1.3, -0.4]);
        let theta = m.theta().unwrap().clone();
        for x in [0.1, 0.45, 0.9] {
            let s = score(&m, &[x]).unwrap();
            assert!(theta.dot(&s).abs() < 1e-12);
            let h = 1e-6;
            for i in 0..2 {
                let mut tp = theta.clone();
                tp[i] += h;
                let mut tm = theta.clone();
                tm[i] -= h;
                let fd = (m.with_theta(tp).unwrap().log_density(&[x]).unwrap()
                    - m.with_theta(tm).unwrap().log_density(&[x]).unwrap())
                    / (2.0 * h);
                assert!((fd - s[i]).abs() < 1e-6);
            }
        }
        assert!(matches!(score(&linear(&[1.0, -0.5]), &[0.5]), Err(Error::ZeroNumerator)));
    }

    #[test]
    fn fisher_closed_form_example() {
        let g = fisher_squared(&linear(&[0.0, 1.0])).unwrap();
        assert_abs_diff_eq!(g.matrix[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.matrix[(0, 1)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.matrix[(1, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn augmented_limits() {
        let m = linear(&[0.7, 0.2]);
        let k = m.kernel().matrix();
        let a1 = fisher_augmented(&m, 1.0).unwrap();
        assert!((&a1.matrix - k * (4.0 / m.normalizer())).amax() < 1e-12);
        assert!(a1.min_eigenvalue() > 0.0);
        let big = fisher_augmented(&m, 1e8).unwrap();
        assert!((big.matrix - fisher_squared(&m).unwrap().matrix).amax() < 1e-7);
    }

    #[test]
    fn g_family_reduces_to_squared() {
        let m = linear(&[0.7, 0.2]);
        let theta = m.theta().unwrap();
        let spec = GSpec::monomial(2).unwrap();
        let g = fisher_g_family(&spec, m.features(), m.measure(), theta, &IntegrationScheme::default(), None).unwrap();
        assert!((g.matrix - fisher_squared(&m).unwrap().matrix).amax() < 1e-10);
    }

    #[test]
    fn exponential_fisher_is_covariance() {
        let map = FeatureMap::polynomial(1, 1).unwrap();
        let mu = BaseMeasure::unit_box(1);
        let theta = DVector::from_vec(vec![1.5, 0.0]);
        let s = IntegrationScheme::default();
        let g = fisher_g_family(&GSpec::Exponential, &map, &mu, &theta, &s, None).unwrap();
        // density of x is 1.5 e^{1.5 x} / (e^{1.5} - 1); psi = (x, 1)
        let z = (1.5f64.exp() - 1.0) / 1.5;
        let m1 = mu.integrate(&s, |x| x[0] * (1.5 * x[0]).exp() / z).unwrap().value;
        let m2 = mu.integrate(&s, |x| x[0] * x[0] * (1.5 * x[0]).exp() / z).unwrap().value;
        assert_abs_diff_eq!(g.matrix[(0, 0)], m2 - m1 * m1, epsilon = 1e-10);
        assert!(g.matrix[(1, 1)].abs() < 1e-10 && g.matrix[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn orthogonality() {
        let map = FeatureMap::polynomial(1, 2).unwrap();
        let mu = BaseMeasure::unit_box(1);
        let theta = DVector::from_vec(vec![1.0, -1.2, 0.3]);
        let probes: Vec<Vec<f64>> = (0..20).map(|i| vec![0.025 + 0.05 * i as f64]).collect();
        let s = IntegrationScheme::default();
        for spec in [
            GSpec::monomial(2).unwrap(),
            GSpec::monomial(4).unwrap(),
            GSpec::pos_homogeneous(2.0, 2.0).unwrap(),
        ] {
            assert!(orthogonal_singularity_check(&spec, &map, &mu, &theta, &probes, 1e-8, &s).unwrap());
        }
        let r = orthogonality_residuals(&GSpec::Exponential, &map, &mu, &theta, &probes, &s).unwrap();
        assert!(r.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn bregman_example() {
        let m = linear(&[1.0, 0.0]);
        let k = m.kernel().matrix();
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        assert_abs_diff_eq!(bregman_divergence(k, &a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-14);
        assert_eq!(bregman_divergence(k, &a, &a).unwrap(), 0.0);
        let sq = sq_l2(
            |x| Ok(x[0]),
            |_| Ok(0.0),
            m.measure(),
            &IntegrationScheme::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(sq, 1.0 / 6.0, epsilon = 1e-14);
    }

    #[test]
    fn divergences_vanish_on_equal_inputs() {
        let rule = BaseMeasure::unit_box(1).cubature(&IntegrationScheme::default()).unwrap();
        let p: Vec<f64> = rule.points().map(|x| 2.0 * x[0]).collect();
        for d in [Divergence::Kl, Divergence::Tv, Divergence::Sh] {
            assert_abs_diff_eq!(divergence_grid(&p, &p, rule.weights(), d).unwrap(), 0.0, epsilon = 1e-15);
        }
        let bad = vec![0.5; p.len()];
        assert!(matches!(
            divergence_grid(&p, &bad, rule.weights(), Divergence::Tv),
            Err(Error::NotNormalized(_))
        ));
        assert!(matches!(
            reverse_pinsker_bound(&p, &p, rule.weights()),
            Err(Error::RatioOutOfRange(_))
        ));
    }

    #[test]
    fn kl_infinite_on_missing_support() {
        let w = vec![0.5, 0.5];
        assert_eq!(
            divergence_grid(&[1.0, 1.0], &[2.0, 0.0], &w, Divergence::Kl).unwrap(),
            f64::INFINITY
        );
        assert!(divergence_grid(&[2.0, 0.0], &[1.0, 1.0], &w, Divergence::Kl).unwrap().is_finite());
    }

    #[test]
    fn conformal_quadratic_case() {
        let m = linear(&[1.0, 1.0]);
        let c = conformal_hessian_check(
            &GSpec::monomial(2).unwrap(),
            m.features(),
            m.measure(),
            m.theta().unwrap(),
            None,
            &IntegrationScheme::default(),
        )
        .unwrap();
        assert!((&c.lhs - m.kernel().matrix() * 2.0).amax() < 1e-6);
        assert!(c.max_abs_diff < 1e-6);
    }

    #[test]
    fn conformal_quartic_case() {
        let m = linear(&[1.0, 1.0]);
        let spec = GSpec::monomial(4).unwrap();
        for scale in [1.0, 2.0] {
            let theta = m.theta().unwrap() * scale;
            let c = conformal_hessian_check(&spec, m.features(), m.measure(), &theta, None, &IntegrationScheme::default())
                .unwrap();
            assert!(c.max_abs_diff < 1e-4 * c.lhs.amax().max(1.0), "{}", c.max_abs_diff);
        }
    }
}
