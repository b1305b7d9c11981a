//! Dimension-augmented maximum likelihood, KL projection and sandwich
//! covariance, plus the simulation experiments built on them.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::kernel::{compute_kernel, SquaredKernel};
use crate::measure::{BaseMeasure, Cubature, IntegrationScheme, MeasureKind};
use crate::model::{canonicalize, ParameterSpaceSpec, Parameter, SquaredFamilyModel};
use crate::rng;
use crate::sampling::{rejection_sample, rejection_sample_with, DEFAULT_SAFETY};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
const ROUNDING: f64 = 1e-12;
const MAX_REFLECTIONS: usize = 4;

/// Features, base measure and kernel: everything but the parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilySpec {
    pub features: FeatureMap,
    pub measure: BaseMeasure,
    pub kernel: SquaredKernel,
}

impl FamilySpec {
    pub fn new(features: FeatureMap, measure: BaseMeasure, scheme: &IntegrationScheme) -> Result<Self> {
        let kernel = compute_kernel(&features, &measure, scheme)?;
        Self::from_parts(features, measure, kernel)
    }

    pub fn from_parts(features: FeatureMap, measure: BaseMeasure, kernel: SquaredKernel) -> Result<Self> {
        if kernel.dim() != features.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: features.output_dim(),
                got: kernel.dim(),
            });
        }
        if features.input_dim() != measure.dim() {
            return Err(Error::DimensionMismatch {
                expected: measure.dim(),
                got: features.input_dim(),
            });
        }
        Ok(FamilySpec {
            features,
            measure,
            kernel,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.output_dim()
    }

    pub fn k(&self) -> &DMatrix<f64> {
        self.kernel.matrix()
    }

    pub fn model(&self, theta: &DVector<f64>) -> Result<SquaredFamilyModel> {
        SquaredFamilyModel::new(
            self.features.clone(),
            self.measure.clone(),
            self.kernel.clone(),
            Parameter::Vector(theta.clone()),
        )
    }

    /// `theta = e_1 / sqrt(K_11)`.
    pub fn canonical_e1(&self) -> Result<DVector<f64>> {
        let mut e1 = DVector::zeros(self.dim());
        e1[0] = 1.0;
        canonicalize(&e1, &self.kernel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitStrategy {
    CanonicalE1,
    Supplied { theta: Vec<f64> },
    /// `count` starts: `canonical_e1` followed by random directions.
    Multistart { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epsilon: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    /// Standard deviation of the augmentation coordinate; only 1 is supported.
    pub sigma: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init: InitStrategy,
    /// Seed of the augmentation draws `a_i`.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epsilon: 1e-3,
            radius: 10.0,
            sigma: 1.0,
            max_iters: 500,
            grad_tol: 1e-8,
            init: InitStrategy::CanonicalE1,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.space(false).validate()?;
        if self.sigma != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "augmentation sigma is fixed at 1, got {}",
                self.sigma
            )));
        }
        if self.max_iters == 0 || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("max_iters and grad_tol must be positive".into()));
        }
        if let InitStrategy::Multistart { count: 0, .. } = self.init {
            return Err(Error::InvalidArgument("multistart needs at least one start".into()));
        }
        Ok(())
    }

    pub fn space(&self, normalized: bool) -> ParameterSpaceSpec {
        ParameterSpaceSpec {
            epsilon: self.epsilon,
            radius: self.radius,
            normalized,
        }
    }

    pub fn multistart(count: usize, seed: u64) -> Self {
        FitConfig {
            init: InitStrategy::Multistart { count, seed },
            ..FitConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveConstraints {
    /// `theta_1 = epsilon`.
    pub lower_bound: bool,
    /// `theta^T K theta = R`.
    pub radius: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    /// Norm of the projected gradient of the per-observation objective.
    pub grad_norm: f64,
    pub iterations: usize,
    pub active_constraints: ActiveConstraints,
    pub converged: bool,
}

impl FitResult {
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_hat)
    }
}

struct Outcome {
    theta: DVector<f64>,
    value: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

/// Projected gradient descent with Armijo backtracking and Barzilai-Borwein
/// trial steps on `objective / scale`. `f` returns the value (possibly
/// `+inf`) and gradient of the unscaled objective.
fn projected_gradient<F>(
    mut f: F,
    start: &DVector<f64>,
    space: &ParameterSpaceSpec,
    k: &DMatrix<f64>,
    scale: f64,
    max_iters: usize,
    grad_tol: f64,
) -> Outcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut theta = start.clone();
    space.project(&mut theta, k);
    let (v0, g0) = f(&theta);
    let mut value = v0 / scale;
    let mut grad = g0 / scale;
    let pg_norm = |theta: &DVector<f64>, grad: &DVector<f64>| {
        let mut t = theta - grad;
        space.project(&mut t, k);
        (theta - t).norm()
    };
    if !value.is_finite() {
        return Outcome {
            theta,
            value: f64::INFINITY,
            grad_norm: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
    }
    let mut step = 1.0 / grad.norm().max(1.0);
    let mut iterations = 0;
    let mut gn = pg_norm(&theta, &grad);
    while iterations < max_iters {
        if gn < grad_tol {
            return Outcome {
                theta,
                value,
                grad_norm: gn,
                iterations,
                converged: true,
            };
        }
        iterations += 1;
        let mut t = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut cand = &theta - &grad * t;
            space.project(&mut cand, k);
            let (cv, cg) = f(&cand);
            let cv = cv / scale;
            let cg = cg / scale;
            let decrease = grad.dot(&(&cand - &theta));
            // values within rounding of each other cannot certify a decrease;
            // fall back to the projected gradient there
            let flat = cv <= value + ROUNDING * (1.0 + value.abs()) && pg_norm(&cand, &cg) < gn;
            if cv.is_finite() && (cv <= value + ARMIJO_C * decrease || flat) {
                accepted = Some((cand, cv, cg));
                break;
            }
            t *= BACKTRACK;
        }
        let Some((cand, cv, cg)) = accepted else {
            break;
        };
        let s = &cand - &theta;
        let y = &cg - &grad;
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { 2.0 * t };
        step = step.clamp(1e-12, 1e12);
        let stalled = s.norm() <= 1e-15 * (1.0 + theta.norm());
        theta = cand;
        value = cv;
        grad = cg;
        gn = pg_norm(&theta, &grad);
        if stalled {
            break;
        }
    }
    Outcome {
        theta,
        value,
        grad_norm: gn,
        converged: gn < grad_tol,
        iterations,
    }
}

/// Draws `a_i ~ N(0, 1)`, one per observation.
pub fn augment_data(count: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..count).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Observations with precomputed features and augmentation values.
#[derive(Clone, Debug)]
pub struct FitData {
    n: usize,
    psi: Vec<f64>,
    a: Vec<f64>,
}

impl FitData {
    pub fn new(family: &FamilySpec, x: &[Vec<f64>], a: &[f64]) -> Result<Self> {
        if x.len() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: a.len(),
            });
        }
        let n = family.dim();
        let mut psi = vec![0.0; x.len() * n];
        for (row, chunk) in x.iter().zip(psi.chunks_exact_mut(n)) {
            let v = family.features.eval_features(row)?;
            chunk.copy_from_slice(v.as_slice());
        }
        Ok(FitData {
            n,
            psi,
            a: a.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Objective and gradient; `+inf` if `theta^T psi(x_i) = 0` for some `i`.
    pub fn nll_and_grad(&self, theta: &DVector<f64>, k: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let kt = k * theta;
        let z = theta.dot(&kt);
        let mut grad = DVector::zeros(self.n);
        if !(z > 0.0) {
            return (f64::INFINITY, grad);
        }
        let lz = z.ln();
        let mut value = 0.0;
        let mut coef = 0.0;
        for (p, &a) in self.psi.chunks_exact(self.n).zip(&self.a) {
            let s: f64 = theta.iter().zip(p).map(|(t, v)| t * v).sum();
            if s == 0.0 {
                return (f64::INFINITY, grad);
            }
            value += -(s * s).ln() + lz + 0.5 * (a - lz) * (a - lz);
            for (g, v) in grad.iter_mut().zip(p) {
                *g -= 2.0 * v / s;
            }
            coef += 1.0 - (a - lz);
        }
        grad += kt * (2.0 * coef / z);
        (value, grad)
    }

    /// `sum_i -2 psi_i / (theta^T psi_i)`, the gradient of the numerator part.
    pub fn numerator_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let mut grad = DVector::zeros(self.n);
        for p in self.psi.chunks_exact(self.n) {
            let s: f64 = theta.iter().zip(p).map(|(t, v)| t * v).sum();
            if s == 0.0 {
                return Err(Error::ZeroNumerator);
            }
            for (g, v) in grad.iter_mut().zip(p) {
                *g -= 2.0 * v / s;
            }
        }
        Ok(grad)
    }
}

fn check_theta(family: &FamilySpec, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != family.dim() {
        return Err(Error::DimensionMismatch {
            expected: family.dim(),
            got: theta.len(),
        });
    }
    let z = family.kernel.quadratic_form(theta.as_slice());
    if !(z > 0.0) {
        return Err(Error::NullSpaceParameter(z));
    }
    Ok(())
}

/// `sum_i -log p(x_i | theta) + (a_i - log theta^T K theta)^2 / 2`.
pub fn nll_augmented(theta: &DVector<f64>, x: &[Vec<f64>], a: &[f64], family: &FamilySpec) -> Result<f64> {
    check_theta(family, theta)?;
    Ok(FitData::new(family, x, a)?.nll_and_grad(theta, family.k()).0)
}

pub fn grad_nll(theta: &DVector<f64>, x: &[Vec<f64>], a: &[f64], family: &FamilySpec) -> Result<DVector<f64>> {
    check_theta(family, theta)?;
    let (v, g) = FitData::new(family, x, a)?.nll_and_grad(theta, family.k());
    if !v.is_finite() {
        return Err(Error::ZeroNumerator);
    }
    Ok(g)
}

/// Random start in the half-space, scaled to the unit ellipsoid.
fn random_start(family: &FamilySpec, seed: u64, index: u64) -> Result<DVector<f64>> {
    let mut r = rng::stream(seed, index);
    let mut t = DVector::from_fn(family.dim(), |_, _| { let v: f64 = StandardNormal.sample(&mut r); v });
    t[0] = t[0].abs();
    canonicalize(&t, &family.kernel)
}

fn starts(family: &FamilySpec, init: &InitStrategy) -> Result<Vec<DVector<f64>>> {
    match init {
        InitStrategy::CanonicalE1 => Ok(vec![family.canonical_e1()?]),
        InitStrategy::Supplied { theta } => {
            let t = DVector::from_column_slice(theta);
            check_theta(family, &t)?;
            Ok(vec![t])
        }
        InitStrategy::Multistart { count, seed } => {
            let mut v = vec![family.canonical_e1()?];
            for j in 1..*count {
                v.push(random_start(family, *seed, j as u64)?);
            }
            Ok(v)
        }
    }
}

fn active(theta: &DVector<f64>, k: &DMatrix<f64>, space: &ParameterSpaceSpec) -> ActiveConstraints {
    let z = theta.dot(&(k * theta));
    ActiveConstraints {
        lower_bound: theta[0] <= space.epsilon * (1.0 + 1e-9),
        radius: !space.normalized && z >= space.radius * (1.0 - 1e-9),
    }
}

/// Runs [`projected_gradient`] and, while the result sits on the face
/// `theta_1 = epsilon`, restarts from its mirror `(epsilon, -theta_2, ...)`.
/// Both points give the same density as `epsilon -> 0`, so the restart
/// continues the descent across the face; the lower value is kept.
#[allow(clippy::too_many_arguments)]
fn descend<F>(
    mut f: F,
    start: &DVector<f64>,
    space: &ParameterSpaceSpec,
    k: &DMatrix<f64>,
    scale: f64,
    max_iters: usize,
    grad_tol: f64,
) -> Outcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut best = projected_gradient(&mut f, start, space, k, scale, max_iters, grad_tol);
    for _ in 0..MAX_REFLECTIONS {
        if !best.value.is_finite() || !active(&best.theta, k, space).lower_bound {
            break;
        }
        let mut mirror = -&best.theta;
        mirror[0] = space.epsilon;
        let out = projected_gradient(&mut f, &mirror, space, k, scale, max_iters, grad_tol);
        if !(out.value < best.value - ROUNDING * (1.0 + best.value.abs())) {
            break;
        }
        let spent = best.iterations;
        best = out;
        best.iterations += spent;
    }
    best
}

/// Augmented maximum likelihood with augmentation values `a`.
pub fn fit_mle_augmented(x: &[Vec<f64>], a: &[f64], family: &FamilySpec, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let data = FitData::new(family, x, a)?;
    let space = config.space(false);
    let k = family.k();
    let scale = data.len() as f64;
    let mut best: Option<Outcome> = None;
    for start in starts(family, &config.init)? {
        let out = descend(
            |t| data.nll_and_grad(t, k),
            &start,
            &space,
            k,
            scale,
            config.max_iters,
            config.grad_tol,
        );
        if out.value.is_finite() && best.as_ref().is_none_or(|b| out.value < b.value) {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| Error::Optimizer("every start has an infinite objective".into()))?;
    Ok(FitResult {
        active_constraints: active(&best.theta, k, &space),
        theta_hat: best.theta.as_slice().to_vec(),
        objective: best.value * scale,
        grad_norm: best.grad_norm,
        iterations: best.iterations,
        converged: best.converged,
    })
}

/// Augmented maximum likelihood; the `a_i` are drawn from `config.seed`.
pub fn fit_mle(x: &[Vec<f64>], family: &FamilySpec, config: &FitConfig) -> Result<FitResult> {
    let a = augment_data(x.len(), config.seed);
    fit_mle_augmented(x, &a, family, config)
}

/// A target density tabulated on the nodes of a cubature rule.
#[derive(Clone, Debug)]
pub struct GridTarget {
    pub rule: Cubature,
    pub q: Vec<f64>,
}

impl GridTarget {
    pub fn new(rule: Cubature, q: Vec<f64>) -> Result<Self> {
        if q.len() != rule.len() {
            return Err(Error::DimensionMismatch {
                expected: rule.len(),
                got: q.len(),
            });
        }
        if q.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("target density must be finite and nonnegative".into()));
        }
        let mass: f64 = q.iter().zip(rule.weights()).map(|(a, w)| a * w).sum();
        if (mass - 1.0).abs() > 1e-3 {
            return Err(Error::NotNormalized(mass));
        }
        Ok(GridTarget { rule, q })
    }

    pub fn from_fn<F: FnMut(&[f64]) -> f64>(measure: &BaseMeasure, scheme: &IntegrationScheme, mut f: F) -> Result<Self> {
        let rule = measure.cubature(scheme)?;
        let q = rule.points().map(&mut f).collect();
        Self::new(rule, q)
    }

    /// Tabulated features `psi(x_j)` at the rule nodes, row-major.
    fn features(&self, map: &FeatureMap) -> Result<Vec<f64>> {
        let n = map.output_dim();
        let mut out = vec![0.0; self.rule.len() * n];
        for (x, chunk) in self.rule.points().zip(out.chunks_exact_mut(n)) {
            map.eval_into(x, chunk)?;
        }
        Ok(out)
    }
}

/// `KL(q : p(. | theta)) = int q log(q / p)` on the target's rule.
pub fn kl_to_model(target: &GridTarget, family: &FamilySpec, theta: &DVector<f64>) -> Result<f64> {
    let psi = target.features(&family.features)?;
    Ok(KlObjective::new(target, family, psi).kl(theta))
}

struct KlObjective<'a> {
    target: &'a GridTarget,
    k: &'a DMatrix<f64>,
    n: usize,
    psi: Vec<f64>,
    mass: f64,
    entropy: f64,
}

impl<'a> KlObjective<'a> {
    fn new(target: &'a GridTarget, family: &'a FamilySpec, psi: Vec<f64>) -> Self {
        let mut mass = 0.0;
        let mut entropy = 0.0;
        for (q, w) in target.q.iter().zip(target.rule.weights()) {
            mass += w * q;
            if *q > 0.0 {
                entropy += w * q * q.ln();
            }
        }
        KlObjective {
            target,
            k: family.k(),
            n: family.dim(),
            psi,
            mass,
            entropy,
        }
    }

    /// `-int q log (theta^T psi)^2 + log z` and its gradient.
    fn value_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let kt = self.k * theta;
        let z = theta.dot(&kt);
        let mut grad = DVector::zeros(self.n);
        if !(z > 0.0) {
            return (f64::INFINITY, grad);
        }
        let mut value = self.mass * z.ln();
        for ((p, &q), &w) in self
            .psi
            .chunks_exact(self.n)
            .zip(&self.target.q)
            .zip(self.target.rule.weights())
        {
            if q == 0.0 {
                continue;
            }
            let s: f64 = theta.iter().zip(p).map(|(t, v)| t * v).sum();
            if s == 0.0 {
                return (f64::INFINITY, grad);
            }
            value -= w * q * (s * s).ln();
            for (g, v) in grad.iter_mut().zip(p) {
                *g -= 2.0 * w * q * v / s;
            }
        }
        grad += kt * (2.0 * self.mass / z);
        (value, grad)
    }

    fn kl(&self, theta: &DVector<f64>) -> f64 {
        let v = self.value_grad(theta).0;
        if v.is_finite() {
            (self.entropy + v).max(0.0)
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlProjection {
    /// On the unit ellipsoid with `theta_1 > 0`.
    pub theta: Vec<f64>,
    pub kl: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `argmin_theta int psi sqrt(q)`-style start: `(K + lambda I)^{-1} int psi sqrt(q)`.
pub fn l2_start(target: &GridTarget, family: &FamilySpec) -> Result<DVector<f64>> {
    let n = family.dim();
    let psi = target.features(&family.features)?;
    let mut b = DVector::zeros(n);
    for ((p, q), w) in psi.chunks_exact(n).zip(&target.q).zip(target.rule.weights()) {
        let sq = q.sqrt();
        for (bi, v) in b.iter_mut().zip(p) {
            *bi += w * v * sq;
        }
    }
    let lambda = 1e-10 * family.kernel.norm2().max(1e-300);
    let reg = family.k() + DMatrix::identity(n, n) * lambda;
    let sol = reg
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("kernel is not positive definite".into()))?
        .solve(&b);
    let mut t = sol;
    if t[0] < 0.0 {
        t = -t;
    }
    check_theta(family, &t)?;
    canonicalize(&t, &family.kernel).map(|c| if c[0] < 0.0 { -c } else { c })
}

/// Minimizes `KL(q : p(. | theta))` over `{theta_1 >= epsilon, theta^T K theta = 1}`.
///
/// Starts from the L2 projection of `sqrt(q)`, the starts named by
/// `config.init`, and any `extra_starts`; the best local minimum wins.
pub fn kl_projection_with_starts(
    target: &GridTarget,
    family: &FamilySpec,
    config: &FitConfig,
    extra_starts: &[DVector<f64>],
) -> Result<KlProjection> {
    config.validate()?;
    let obj = KlObjective::new(target, family, target.features(&family.features)?);
    let space = config.space(true);
    let k = family.k();
    let mut all = Vec::new();
    if let Ok(s) = l2_start(target, family) {
        all.push(s);
    }
    all.extend(starts(family, &config.init)?);
    all.extend(extra_starts.iter().cloned());
    let mut best: Option<Outcome> = None;
    for start in &all {
        let out = descend(
            |t| obj.value_grad(t),
            start,
            &space,
            k,
            1.0,
            config.max_iters,
            config.grad_tol,
        );
        if out.value.is_finite() && best.as_ref().is_none_or(|b| out.value < b.value) {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| Error::Optimizer("KL is infinite at every start".into()))?;
    let theta = canonicalize(&best.theta, &family.kernel)?;
    Ok(KlProjection {
        kl: obj.kl(&theta),
        theta: theta.as_slice().to_vec(),
        converged: best.converged,
        iterations: best.iterations,
    })
}

pub fn kl_projection(target: &GridTarget, family: &FamilySpec, config: &FitConfig) -> Result<KlProjection> {
    kl_projection_with_starts(target, family, config, &[])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sandwich {
    pub k_r: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub khat: DMatrix<f64>,
}

/// `A = -2 K_r - 2 K`, `B = 4 (K_r - K_r t t^T K - K t t^T K_r + 2 K t t^T K)`,
/// `Khat = A^{-1} B A^{-1}`.
pub fn sandwich_from_kernels(k: &DMatrix<f64>, k_r: &DMatrix<f64>, theta_star: &DVector<f64>) -> Result<Sandwich> {
    let n = k.nrows();
    if k_r.shape() != (n, n) || theta_star.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: theta_star.len(),
        });
    }
    let tt = theta_star * theta_star.transpose();
    let a = k_r * -2.0 - k * 2.0;
    let b = (k_r - k_r * &tt * k - k * &tt * k_r + k * &tt * k * 2.0) * 4.0;
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("expected Hessian is singular".into()))?;
    let khat = &a_inv * &b * &a_inv;
    Ok(Sandwich {
        k_r: k_r.clone(),
        a,
        b,
        khat: (&khat + khat.transpose()) * 0.5,
    })
}

/// Sandwich matrices with `K_r = int psi psi^T q / p(. | theta*) dmu`.
pub fn sandwich_covariance(target: &GridTarget, theta_star: &DVector<f64>, family: &FamilySpec) -> Result<Sandwich> {
    check_theta(family, theta_star)?;
    let n = family.dim();
    let z = family.kernel.quadratic_form(theta_star.as_slice());
    let psi = target.features(&family.features)?;
    let mut k_r = DMatrix::<f64>::zeros(n, n);
    for ((p, &q), &w) in psi.chunks_exact(n).zip(&target.q).zip(target.rule.weights()) {
        if q == 0.0 {
            continue;
        }
        let s: f64 = theta_star.iter().zip(p).map(|(t, v)| t * v).sum();
        let dens = s * s / z;
        if dens == 0.0 {
            return Err(Error::Integration("q / p is unbounded: model vanishes where q > 0".into()));
        }
        let r = q / dens;
        for i in 0..n {
            for j in i..n {
                k_r[(i, j)] += w * r * p[i] * p[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            k_r[(i, j)] = k_r[(j, i)];
        }
    }
    if k_r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration("K_r is not finite".into()));
    }
    sandwich_from_kernels(family.k(), &k_r, theta_star)
}

/// One-dimensional target densities on a box, normalized numerically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    TruncatedGaussian { mean: f64, sd: f64 },
    GaussianMixture { weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64> },
    /// A member of a squared family with the given features.
    Squared { features: FeatureMap, theta: Vec<f64> },
}

/// A target density bound to a one-dimensional box.
#[derive(Clone, Debug)]
pub struct Target {
    spec: TargetSpec,
    measure: BaseMeasure,
    norm: f64,
}

impl Target {
    pub fn new(spec: TargetSpec, measure: BaseMeasure) -> Result<Self> {
        if !matches!(measure.kind(), MeasureKind::BoxLebesgue { .. }) || measure.dim() != 1 {
            return Err(Error::InvalidArgument("targets live on a one-dimensional box".into()));
        }
        match &spec {
            TargetSpec::TruncatedGaussian { sd, .. } if !(*sd > 0.0) => {
                return Err(Error::InvalidArgument("sd must be > 0".into()))
            }
            TargetSpec::GaussianMixture { weights, means, sds } => {
                if weights.len() != means.len() || weights.len() != sds.len() || weights.is_empty() {
                    return Err(Error::InvalidArgument("mixture arrays differ in length".into()));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || sds.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::InvalidArgument("invalid mixture weights or sds".into()));
                }
            }
            TargetSpec::Squared { features, theta } if features.output_dim() != theta.len() => {
                return Err(Error::DimensionMismatch {
                    expected: features.output_dim(),
                    got: theta.len(),
                });
            }
            _ => {}
        }
        let mut t = Target {
            spec,
            measure,
            norm: 1.0,
        };
        let mut err = None;
        let total = t
            .measure
            .integrate(&IntegrationScheme::quadrature(1024), |x| match t.unnormalized(x) {
                Ok(v) => v,
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            })?
            .value;
        if let Some(e) = err {
            return Err(e);
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NonFinite(format!("target mass {total}")));
        }
        t.norm = total;
        Ok(t)
    }

    fn unnormalized(&self, x: &[f64]) -> Result<f64> {
        let gauss = |m: f64, s: f64| (-0.5 * ((x[0] - m) / s).powi(2)).exp() / s;
        Ok(match &self.spec {
            TargetSpec::TruncatedGaussian { mean, sd } => gauss(*mean, *sd),
            TargetSpec::GaussianMixture { weights, means, sds } => weights
                .iter()
                .zip(means)
                .zip(sds)
                .map(|((w, m), s)| w * gauss(*m, *s))
                .sum(),
            TargetSpec::Squared { features, theta } => {
                let psi = features.eval_features(x)?;
                let a: f64 = psi.iter().zip(theta).map(|(p, t)| p * t).sum();
                a * a
            }
        })
    }

    /// Density with respect to the box's Lebesgue measure.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.unnormalized(x)? / self.norm)
    }

    pub fn measure(&self) -> &BaseMeasure {
        &self.measure
    }

    pub fn grid(&self, scheme: &IntegrationScheme) -> Result<GridTarget> {
        let rule = self.measure.cubature(scheme)?;
        let q = rule.points().map(|x| self.density(x)).collect::<Result<Vec<_>>>()?;
        GridTarget::new(rule, q)
    }

    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mass = self.measure.total_mass();
        let r = rejection_sample_with(&self.measure, count, seed, DEFAULT_SAFETY, |x| {
            Ok(self.density(x)? * mass)
        })?;
        if r.envelope_violation {
            return Err(Error::Integration("target envelope violated".into()));
        }
        Ok(r.samples)
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean_covariance(devs: &[DVector<f64>], n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = devs.len() as f64;
    let mean = devs.iter().fold(DVector::zeros(n), |acc, d| acc + d) / m;
    let mut cov = DMatrix::zeros(n, n);
    for d in devs {
        let c = d - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (m - 1.0))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn default_scheme() -> IntegrationScheme {
    IntegrationScheme::default()
}

fn default_linear_features() -> FeatureMap {
    FeatureMap::polynomial(1, 1).expect("valid polynomial map")
}

fn default_unit_box() -> BaseMeasure {
    BaseMeasure::unit_box(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalityConfig {
    #[serde(default = "default_linear_features")]
    pub features: FeatureMap,
    #[serde(default = "default_unit_box")]
    pub measure: BaseMeasure,
    #[serde(default = "default_scheme")]
    pub scheme: IntegrationScheme,
    pub theta_star: Vec<f64>,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityRow {
    pub n: usize,
    /// `|C - K^{-1}/4|_F / |K^{-1}/4|_F`.
    pub rel_error: f64,
    /// The same error after canonicalizing each estimate onto the unit ellipsoid.
    pub rel_error_canonical: f64,
    pub covariance: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub mean_std_error: Vec<f64>,
    /// Every coordinate of the mean within four standard errors of 0.
    pub mean_within_band: bool,
    pub failures: usize,
    pub not_converged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub n: usize,
    pub rep: usize,
    pub theta_hat: Vec<f64>,
    /// `sqrt(N) (theta_hat - theta*)` for normality runs, `Delta_N` otherwise.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub theta_star: Vec<f64>,
    pub limit: Vec<Vec<f64>>,
    pub rows: Vec<NormalityRow>,
    pub replications: Vec<Replication>,
}

/// Sampling distribution of `sqrt(N) (theta_hat - theta*)` against the
/// limit `K^{-1}/4`.
///
/// `theta*` is put on the unit ellipsoid, matching the augmentation
/// `a ~ N(0, 1)`. Estimates are compared as returned: their sign is fixed by
/// `theta_1 >= epsilon` and their scale is identified by the augmentation.
pub fn experiment_asymptotic_normality(config: &NormalityConfig) -> Result<NormalityReport> {
    let family = FamilySpec::new(config.features.clone(), config.measure.clone(), &config.scheme)?;
    let theta_star = canonicalize(&DVector::from_column_slice(&config.theta_star), &family.kernel)?;
    let model = family.model(&theta_star)?;
    let n = family.dim();
    let k_inv = family
        .k()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("kernel is singular".into()))?;
    let limit = &k_inv * 0.25;
    if config.reps < 2 {
        return Err(Error::InvalidArgument("need at least two replications".into()));
    }
    let jobs: Vec<(usize, usize)> = config
        .n_list
        .iter()
        .flat_map(|&nn| (0..config.reps).map(move |r| (nn, r)))
        .collect();
    let results = par_map(&jobs, |&(nn, rep)| -> Result<FitResult> {
        let seed = |s: u64| rng::derive_seed(config.master_seed, &[nn as u64, rep as u64, s]);
        let x = rejection_sample(&model, nn, seed(0), DEFAULT_SAFETY)?.samples;
        let a = augment_data(nn, seed(1));
        let mut fit = config.fit.clone();
        if let InitStrategy::Multistart { count, .. } = fit.init {
            fit.init = InitStrategy::Multistart { count, seed: seed(2) };
        }
        fit_mle_augmented(&x, &a, &family, &fit)
    });
    let mut rows = Vec::new();
    let mut replications = Vec::new();
    for &nn in &config.n_list {
        let mut devs: Vec<DVector<f64>> = Vec::new();
        let mut canon_devs: Vec<DVector<f64>> = Vec::new();
        let mut failures = 0;
        let mut not_converged = 0;
        for ((jn, rep), res) in jobs.iter().zip(&results) {
            if *jn != nn {
                continue;
            }
            match res {
                Ok(fit) => {
                    if !fit.converged {
                        not_converged += 1;
                    }
                    let d = (fit.theta() - &theta_star) * (nn as f64).sqrt();
                    replications.push(Replication {
                        n: nn,
                        rep: *rep,
                        theta_hat: fit.theta_hat.clone(),
                        values: d.as_slice().to_vec(),
                    });
                    devs.push(d);
                    canon_devs.push((canonicalize(&fit.theta(), &family.kernel)? - &theta_star) * (nn as f64).sqrt());
                }
                Err(_) => failures += 1,
            }
        }
        let m = devs.len() as f64;
        if devs.len() < 2 {
            return Err(Error::Optimizer(format!("fewer than two successful fits at N = {nn}")));
        }
        let (mean, cov) = mean_covariance(&devs, n);
        let (_, canon_cov) = mean_covariance(&canon_devs, n);
        let se: Vec<f64> = (0..n).map(|i| (cov[(i, i)] / m).sqrt()).collect();
        let within = mean.iter().zip(&se).all(|(v, s)| v.abs() <= 4.0 * s);
        rows.push(NormalityRow {
            n: nn,
            rel_error: (&cov - &limit).norm() / limit.norm(),
            rel_error_canonical: (&canon_cov - &limit).norm() / limit.norm(),
            covariance: matrix_rows(&cov),
            mean: mean.as_slice().to_vec(),
            mean_std_error: se,
            mean_within_band: within,
            failures,
            not_converged,
        });
    }
    Ok(NormalityReport {
        theta_star: theta_star.as_slice().to_vec(),
        limit: matrix_rows(&limit),
        rows,
        replications,
    })
}

fn default_misspec_features() -> FeatureMap {
    use std::f64::consts::PI;
    FeatureMap::cosine(vec![vec![PI], vec![2.0 * PI], vec![3.0 * PI]], vec![0.0; 3])
        .expect("valid cosine map")
}

fn default_truncated_gaussian() -> TargetSpec {
    TargetSpec::TruncatedGaussian { mean: 0.3, sd: 0.15 }
}

fn default_kl_scheme() -> IntegrationScheme {
    IntegrationScheme::quadrature(256)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisspecConfig {
    #[serde(default = "default_truncated_gaussian")]
    pub target: TargetSpec,
    #[serde(default = "default_misspec_features")]
    pub features: FeatureMap,
    #[serde(default = "default_unit_box")]
    pub measure: BaseMeasure,
    #[serde(default = "default_kl_scheme")]
    pub scheme: IntegrationScheme,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub master_seed: u64,
    /// Starts per fit, the first being `canonical_e1`.
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub fit: FitConfig,
}

fn default_starts() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisspecRow {
    pub n: usize,
    /// Median of `sqrt(N) |KL(q : p_hat) - KL(q : p*)|`.
    pub median: f64,
    pub p90: f64,
    /// Median of `sqrt(N) KL(q : p_hat)`.
    pub median_scaled_kl: f64,
    /// Smallest `KL(q : p_hat) - KL(q : p*)` over replications.
    pub min_excess: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisspecReport {
    pub theta_star: Vec<f64>,
    pub kl_star: f64,
    pub rows: Vec<MisspecRow>,
    pub replications: Vec<Replication>,
}

/// `sqrt(N) |KL(q : p_hat_N) - KL(q : p*)|` across sample sizes.
pub fn experiment_misspecified_rate(config: &MisspecConfig) -> Result<MisspecReport> {
    let family = FamilySpec::new(config.features.clone(), config.measure.clone(), &config.scheme)?;
    let target = Target::new(config.target.clone(), config.measure.clone())?;
    let grid = target.grid(&config.scheme)?;
    let proj_config = FitConfig {
        init: InitStrategy::Multistart {
            count: config.starts.max(1),
            seed: rng::derive_seed(config.master_seed, &[u64::MAX]),
        },
        max_iters: config.fit.max_iters.max(2000),
        ..config.fit.clone()
    };
    let star = kl_projection(&grid, &family, &proj_config)?;
    let jobs: Vec<(usize, usize)> = config
        .n_list
        .iter()
        .flat_map(|&nn| (0..config.reps).map(move |r| (nn, r)))
        .collect();
    let results = par_map(&jobs, |&(nn, rep)| -> Result<(FitResult, f64)> {
        let seed = |s: u64| rng::derive_seed(config.master_seed, &[nn as u64, rep as u64, s]);
        let x = target.sample(nn, seed(0))?;
        let a = augment_data(nn, seed(1));
        let fit = FitConfig {
            init: InitStrategy::Multistart {
                count: config.starts.max(1),
                seed: seed(2),
            },
            ..config.fit.clone()
        };
        let res = fit_mle_augmented(&x, &a, &family, &fit)?;
        let kl = kl_to_model(&grid, &family, &res.theta())?;
        Ok((res, kl))
    });
    let mut rows = Vec::new();
    let mut replications = Vec::new();
    for &nn in &config.n_list {
        let mut deltas = Vec::new();
        let mut scaled = Vec::new();
        let mut min_excess = f64::INFINITY;
        let mut failures = 0;
        for ((jn, rep), res) in jobs.iter().zip(&results) {
            if *jn != nn {
                continue;
            }
            match res {
                Ok((fit, kl)) => {
                    let sn = (nn as f64).sqrt();
                    let d = sn * (kl - star.kl).abs();
                    min_excess = min_excess.min(kl - star.kl);
                    deltas.push(d);
                    scaled.push(sn * kl);
                    replications.push(Replication {
                        n: nn,
                        rep: *rep,
                        theta_hat: fit.theta_hat.clone(),
                        values: vec![d, *kl],
                    });
                }
                Err(_) => failures += 1,
            }
        }
        deltas.sort_by(f64::total_cmp);
        scaled.sort_by(f64::total_cmp);
        rows.push(MisspecRow {
            n: nn,
            median: quantile(&deltas, 0.5),
            p90: quantile(&deltas, 0.9),
            median_scaled_kl: quantile(&scaled, 0.5),
            min_excess,
            failures,
        });
    }
    Ok(MisspecReport {
        theta_star: star.theta,
        kl_star: star.kl,
        rows,
        replications,
    })
}

fn default_mixture() -> TargetSpec {
    TargetSpec::GaussianMixture {
        weights: vec![0.6, 0.4],
        means: vec![0.3, 0.72],
        sds: vec![0.1, 0.08],
    }
}

fn default_bandwidth() -> f64 {
    10.0
}

fn default_approx_scheme() -> IntegrationScheme {
    IntegrationScheme::quadrature(512)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxConfig {
    #[serde(default = "default_mixture")]
    pub target: TargetSpec,
    #[serde(default = "default_unit_box")]
    pub measure: BaseMeasure,
    #[serde(default = "default_approx_scheme")]
    pub scheme: IntegrationScheme,
    pub n_list: Vec<usize>,
    pub feature_seeds: Vec<u64>,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub fit: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub n: usize,
    /// `KL(q : p*(n))` per feature seed.
    pub kl: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub rows: Vec<ApproxRow>,
    /// Least-squares slope of `log median KL` against `log n`.
    pub slope: f64,
    pub reference_slope: f64,
}

/// Rescales coefficients of a random cosine map with `n_old` features to one
/// with `n_new >= n_old` sharing the first features.
fn extend_coefficients(theta: &[f64], n_old: usize, n_new: usize) -> DVector<f64> {
    let s = ((n_new - 1) as f64 / (n_old - 1) as f64).sqrt();
    let mut out = DVector::zeros(n_new);
    for j in 0..n_old - 1 {
        out[j] = theta[j] * s;
    }
    out[n_new - 1] = theta[n_old - 1];
    out
}

/// `KL(q : p*(n))` for random cosine families of growing size.
///
/// Feature maps of one seed are nested, and each projection is also started
/// from the previous optimum so the reported minimum cannot increase with `n`.
pub fn experiment_approximation(config: &ApproxConfig) -> Result<ApproxReport> {
    if config.n_list.is_empty() || config.feature_seeds.is_empty() {
        return Err(Error::InvalidArgument("empty n_list or feature_seeds".into()));
    }
    let mut ns = config.n_list.clone();
    ns.sort_unstable();
    let target = Target::new(config.target.clone(), config.measure.clone())?;
    let grid = target.grid(&config.scheme)?;
    let per_seed = par_map(&config.feature_seeds, |&seed| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut prev: Option<(usize, Vec<f64>)> = None;
        for &n in &ns {
            let map = FeatureMap::random_cosine(1, n, config.bandwidth, seed)?;
            let family = FamilySpec::new(map, config.measure.clone(), &config.scheme)?;
            let extra: Vec<DVector<f64>> = prev
                .iter()
                .map(|(n_old, t)| extend_coefficients(t, *n_old, n))
                .collect();
            let proj = kl_projection_with_starts(&grid, &family, &config.fit, &extra)?;
            out.push(proj.kl);
            prev = Some((n, proj.theta));
        }
        Ok(out)
    });
    let per_seed: Vec<Vec<f64>> = per_seed.into_iter().collect::<Result<_>>()?;
    let rows: Vec<ApproxRow> = ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let kl: Vec<f64> = per_seed.iter().map(|v| v[i]).collect();
            let mut sorted = kl.clone();
            sorted.sort_by(f64::total_cmp);
            ApproxRow {
                n,
                kl,
                median: quantile(&sorted, 0.5),
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.median > 0.0)
        .map(|r| ((r.n as f64).ln(), r.median.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    Ok(ApproxReport {
        rows,
        slope,
        reference_slope: -0.25,
    })
}

/// Random feasible parameter for spot checks.
pub fn random_feasible(family: &FamilySpec, seed: u64) -> Result<DVector<f64>> {
    let mut r = rng::seeded(seed);
    let mut t = DVector::from_fn(family.dim(), |_, _| { let v: f64 = StandardNormal.sample(&mut r); v });
    t[0] = t[0].abs() + r.random::<f64>();
    canonicalize(&t, &family.kernel)
}
