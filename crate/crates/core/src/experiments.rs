//! Canned acceptance suites. Every tolerance and problem size lives in
//! `config/acceptance.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    experiment_approximation, experiment_asymptotic_normality, experiment_misspecified_rate, sandwich_covariance,
    sandwich_from_kernels, ApproxConfig, FamilySpec, GridTarget, MisspecConfig, NormalityConfig,
};
use crate::features::FeatureMap;
use crate::geometry::{
    bregman_divergence, conformal_hessian_check, divergence_chain_slacks, fisher_augmented, fisher_squared,
    monte_carlo_fisher, orthogonality_residuals, reverse_pinsker_bound, smooth_density, sq_l2,
};
use crate::gfamily::{z_monomial_tensor_checked, z_quadrature, GSpec};
use crate::kernel::{closed_form_cosine_gaussian, compute_kernel, moment_tensor};
use crate::measure::{BaseMeasure, IntegrationScheme, MeasureKind};
use crate::model::{canonicalize, Parameter, SquaredFamilyModel};
use crate::rng::{self, Rng};
use crate::sampling::{equal_mass_chi_square, rejection_sample, DEFAULT_SAFETY};

const CONFIG_JSON: &str = include_str!("../config/acceptance.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Factorisation,
    Singularity,
    FisherOracle,
    Bregman,
    Marginals,
    TensorNormaliser,
    Conformal,
    Orthogonality,
    Normality,
    MisspecRate,
    ApproxTrend,
    DivergenceChain,
    Sandwich,
    Sampler,
}

impl Suite {
    pub const ALL: [Suite; 14] = [
        Suite::Factorisation,
        Suite::Singularity,
        Suite::FisherOracle,
        Suite::Bregman,
        Suite::Marginals,
        Suite::TensorNormaliser,
        Suite::Conformal,
        Suite::Orthogonality,
        Suite::Normality,
        Suite::MisspecRate,
        Suite::ApproxTrend,
        Suite::DivergenceChain,
        Suite::Sandwich,
        Suite::Sampler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Factorisation => "factorisation",
            Suite::Singularity => "singularity",
            Suite::FisherOracle => "fisher_oracle",
            Suite::Bregman => "bregman",
            Suite::Marginals => "marginals",
            Suite::TensorNormaliser => "tensor_normaliser",
            Suite::Conformal => "conformal",
            Suite::Orthogonality => "orthogonality",
            Suite::Normality => "normality",
            Suite::MisspecRate => "misspec_rate",
            Suite::ApproxTrend => "approx_trend",
            Suite::DivergenceChain => "divergence_chain",
            Suite::Sandwich => "sandwich",
            Suite::Sampler => "sampler",
        }
    }

    /// Position in the acceptance table, from 1.
    pub fn criterion(self) -> usize {
        Suite::ALL.iter().position(|s| *s == self).unwrap_or(0) + 1
    }

    fn tag(self) -> u64 {
        self.criterion() as u64
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorisationConfig {
    pub instances: usize,
    pub nodes: usize,
    pub reference_nodes: usize,
    pub abs_tol: f64,
    pub error_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularityConfig {
    pub models: usize,
    pub rel_tol: f64,
    /// Kernels with `lambda_min > pd_tol * |K|` count as strictly positive definite.
    pub pd_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherOracleConfig {
    pub models: usize,
    pub samples: usize,
    pub sigmas: f64,
    pub max_exceedances: usize,
    /// `min theta^T psi >= margin * (max - min)` on the domain.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BregmanConfig {
    pub pairs: usize,
    pub abs_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalsConfig {
    pub models: usize,
    pub grid: usize,
    pub rows: usize,
    pub abs_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorConfig {
    pub orders: Vec<u32>,
    pub instances: usize,
    pub abs_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalConfig {
    pub orders: Vec<u32>,
    pub instances: usize,
    pub rel_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrthogonalityConfig {
    pub probes: usize,
    pub singular_tol: f64,
    pub exponential_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalitySuiteConfig {
    /// `master_seed` is replaced by the suite seed.
    pub experiment: NormalityConfig,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisspecSuiteConfig {
    /// `master_seed` is replaced by the suite seed.
    pub experiment: MisspecConfig,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSuiteConfig {
    pub experiment: ApproxConfig,
    pub max_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceConfig {
    pub pairs: usize,
    pub nodes: usize,
    pub min_slack: f64,
    pub smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichConfig {
    pub abs_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub models: usize,
    pub samples: usize,
    pub bins: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub seed: u64,
    /// Wall-clock budget per suite, in seconds.
    pub budgets: BTreeMap<Suite, f64>,
    /// Suites whose checks are decided by Monte Carlo noise at the configured
    /// size. They are reported like any other but do not fail the run.
    #[serde(default)]
    pub expected_failures: Vec<Suite>,
    pub factorisation: FactorisationConfig,
    pub singularity: SingularityConfig,
    pub fisher_oracle: FisherOracleConfig,
    pub bregman: BregmanConfig,
    pub marginals: MarginalsConfig,
    pub tensor_normaliser: TensorConfig,
    pub conformal: ConformalConfig,
    pub orthogonality: OrthogonalityConfig,
    pub normality: NormalitySuiteConfig,
    pub misspec_rate: MisspecSuiteConfig,
    pub approx_trend: ApproxSuiteConfig,
    pub divergence_chain: DivergenceConfig,
    pub sandwich: SandwichConfig,
    pub sampler: SamplerConfig,
}

impl AcceptanceConfig {
    /// The configuration compiled into the crate.
    pub fn pinned() -> Self {
        serde_json::from_str(CONFIG_JSON).expect("bundled acceptance config is valid")
    }

    pub fn budget(&self, suite: Suite) -> f64 {
        self.budgets.get(&suite).copied().unwrap_or(f64::INFINITY)
    }
}

/// One thresholded quantity: passes iff `value <= limit` (or `>=` for lower bounds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
        }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            limit,
            passed: value >= limit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub criterion: usize,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Informational values that are not thresholded.
    pub metrics: BTreeMap<String, f64>,
}

impl SuiteReport {
    fn new(suite: Suite, seed: u64, checks: Vec<Check>, metrics: BTreeMap<String, f64>) -> Self {
        SuiteReport {
            suite,
            criterion: suite.criterion(),
            seed,
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            checks,
            metrics,
        }
    }

    /// `name=value (limit)` for every check.
    pub fn summary(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{}={:.3e} (limit {:.1e})", c.name, c.value, c.limit))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Runs a suite with the pinned configuration.
pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    run_suite_with(suite, seed, &AcceptanceConfig::pinned())
}

pub fn run_suite_with(suite: Suite, seed: u64, config: &AcceptanceConfig) -> Result<SuiteReport> {
    let run = Runner {
        seed,
        suite,
        config,
    };
    match suite {
        Suite::Factorisation => run.factorisation(),
        Suite::Singularity => run.singularity(),
        Suite::FisherOracle => run.fisher_oracle(),
        Suite::Bregman => run.bregman(),
        Suite::Marginals => run.marginals(),
        Suite::TensorNormaliser => run.tensor_normaliser(),
        Suite::Conformal => run.conformal(),
        Suite::Orthogonality => run.orthogonality(),
        Suite::Normality => run.normality(),
        Suite::MisspecRate => run.misspec_rate(),
        Suite::ApproxTrend => run.approx_trend(),
        Suite::DivergenceChain => run.divergence_chain(),
        Suite::Sandwich => run.sandwich(),
        Suite::Sampler => run.sampler(),
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_vec(r: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(r))
}

fn random_box(r: &mut Rng, d: usize) -> Result<BaseMeasure> {
    let lower: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..0.5)).collect();
    let upper = lower.iter().map(|l| l + r.random_range(0.5..2.0)).collect();
    BaseMeasure::boxed(lower, upper)
}

fn random_cosine_map(r: &mut Rng, d: usize, count: usize) -> Result<FeatureMap> {
    let freqs = (0..count)
        .map(|_| (0..d).map(|_| r.random_range(0.3..3.0)).collect())
        .collect();
    let phases = (0..count).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    FeatureMap::cosine(freqs, phases)
}

/// A random feature map and base measure. `bounded` restricts to box measures.
fn random_family(r: &mut Rng, d: usize, bounded: bool) -> Result<(FeatureMap, BaseMeasure)> {
    let kinds = if bounded { 3 } else { 5 };
    Ok(match r.random_range(0..kinds) {
        0 => (FeatureMap::polynomial(d, r.random_range(1..=3))?, random_box(r, d)?),
        1 => {
            let count = r.random_range(2..=3);
            (random_cosine_map(r, d, count)?, random_box(r, d)?)
        }
        2 => (
            FeatureMap::random_cosine(d, r.random_range(3..=5), 2.0, r.random())?,
            random_box(r, d)?,
        ),
        3 => {
            let mean = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let cov = (0..d)
                .map(|i| (0..d).map(|j| if i == j { r.random_range(0.25..2.0) } else { 0.0 }).collect())
                .collect();
            let count = r.random_range(2..=3);
            (random_cosine_map(r, d, count)?, BaseMeasure::gaussian(mean, cov)?)
        }
        _ => (FeatureMap::polynomial(d, r.random_range(1..=2))?, BaseMeasure::standard_gaussian(d)),
    })
}

fn symmetric_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().amax()
}

/// Evenly spaced interior points of a box, or of `mean +- span sd` for a Gaussian.
fn probe_grid(measure: &BaseMeasure, per_dim: usize, span: f64) -> Vec<Vec<f64>> {
    let ranges: Vec<(f64, f64)> = match measure.kind() {
        MeasureKind::BoxLebesgue { lower, upper } => lower.iter().zip(upper).map(|(l, u)| (*l, *u)).collect(),
        MeasureKind::Gaussian { mean, covariance } => mean
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let s = covariance[i][i].sqrt();
                (m - span * s, m + span * s)
            })
            .collect(),
        MeasureKind::Discrete { points, .. } => return points.clone(),
    };
    let d = ranges.len();
    (0..per_dim.pow(d as u32))
        .map(|mut idx| {
            ranges
                .iter()
                .map(|(l, u)| {
                    let i = idx % per_dim;
                    idx /= per_dim;
                    l + (u - l) * (i as f64 + 0.5) / per_dim as f64
                })
                .collect()
        })
        .collect()
}

struct Runner<'a> {
    seed: u64,
    suite: Suite,
    config: &'a AcceptanceConfig,
}

impl Runner<'_> {
    fn rng(&self, index: u64) -> Rng {
        rng::seeded(rng::derive_seed(self.seed, &[self.suite.tag(), index]))
    }

    fn sub_seed(&self, index: u64) -> u64 {
        rng::derive_seed(self.seed, &[self.suite.tag(), index, 1])
    }

    fn report(&self, checks: Vec<Check>, metrics: BTreeMap<String, f64>) -> Result<SuiteReport> {
        Ok(SuiteReport::new(self.suite, self.seed, checks, metrics))
    }

    fn factorisation(&self) -> Result<SuiteReport> {
        let c = &self.config.factorisation;
        let scheme = IntegrationScheme::quadrature(c.nodes);
        let reference = IntegrationScheme::quadrature(c.reference_nodes);
        let mut worst_excess = f64::NEG_INFINITY;
        let mut max_diff: f64 = 0.0;
        let mut closed_forms = 0.0;
        for i in 0..c.instances {
            let mut r = self.rng(i as u64);
            let d = if i % 4 == 3 { 2 } else { 1 };
            let (map, measure) = random_family(&mut r, d, false)?;
            let kernel = match closed_form_cosine_gaussian(&map, &measure) {
                Ok(k) => {
                    closed_forms += 1.0;
                    k
                }
                Err(_) => compute_kernel(&map, &measure, &scheme)?,
            };
            let theta = normal_vec(&mut r, map.output_dim());
            let z = kernel.quadratic_form(theta.as_slice());
            let direct = z_quadrature(&GSpec::Monomial { k: 2 }, &map, &measure, &theta, &reference)?.value;
            let diff = (z - direct).abs();
            let tol = c.abs_tol.max(c.error_multiplier * kernel.error_estimate());
            max_diff = max_diff.max(diff);
            worst_excess = worst_excess.max(diff - tol);
        }
        let metrics = BTreeMap::from([
            ("max_abs_diff".to_string(), max_diff),
            ("closed_form_kernels".to_string(), closed_forms),
        ]);
        self.report(vec![Check::at_most("max_excess_over_tolerance", worst_excess, 0.0)], metrics)
    }

    fn singularity(&self) -> Result<SuiteReport> {
        let c = &self.config.singularity;
        let scheme = IntegrationScheme::default();
        let mut worst: f64 = 0.0;
        let mut min_aug = f64::INFINITY;
        let mut pd = 0.0;
        for i in 0..c.models {
            let mut r = self.rng(i as u64);
            let (map, measure) = random_family(&mut r, 1, false)?;
            let theta = normal_vec(&mut r, map.output_dim());
            let model = SquaredFamilyModel::with_scheme(map, measure, &scheme, Parameter::Vector(theta.clone()))?;
            let g = fisher_squared(&model)?;
            worst = worst.max((&g.matrix * &theta).norm() / g.norm2());
            let k = model.kernel();
            if k.min_eigenvalue() > c.pd_tol * k.norm2() {
                pd += 1.0;
                min_aug = min_aug.min(fisher_augmented(&model, 1.0)?.min_eigenvalue());
            }
        }
        let metrics = BTreeMap::from([("strictly_pd_models".to_string(), pd)]);
        self.report(
            vec![
                Check::at_most("max_rel_null_residual", worst, c.rel_tol),
                Check::at_least("min_augmented_eigenvalue", min_aug, f64::MIN_POSITIVE),
            ],
            metrics,
        )
    }

    /// A box model with `theta^T psi` bounded away from zero, so scores have
    /// finite moments of every order.
    fn positive_model(&self, r: &mut Rng, margin: f64) -> Result<SquaredFamilyModel> {
        let (map, measure) = random_family(r, 1, true)?;
        let n = map.output_dim();
        let mut theta = normal_vec(r, n);
        let probes = probe_grid(&measure, 4096, 0.0);
        let mut psi = vec![0.0; n];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut bias = 0.0;
        for x in &probes {
            map.eval_into(x, &mut psi)?;
            bias = psi[n - 1];
            let a = theta.dot(&DVector::from_column_slice(&psi));
            lo = lo.min(a);
            hi = hi.max(a);
        }
        // the last feature is the constant bias
        theta[n - 1] += (margin * (hi - lo).max(1e-3) - lo) / bias;
        SquaredFamilyModel::with_scheme(map, measure, &IntegrationScheme::default(), Parameter::Vector(theta))
    }

    fn fisher_oracle(&self) -> Result<SuiteReport> {
        let c = &self.config.fisher_oracle;
        let mut exceed = 0usize;
        let mut worst_z: f64 = 0.0;
        let mut entries = 0.0;
        for i in 0..c.models {
            let mut r = self.rng(i as u64);
            let model = self.positive_model(&mut r, c.margin)?;
            let g = fisher_squared(&model)?;
            let mc = monte_carlo_fisher(&model, c.samples, self.sub_seed(i as u64))?;
            let n = model.dim();
            for a in 0..n {
                for b in a..n {
                    entries += 1.0;
                    let diff = (mc.mean[(a, b)] - g.matrix[(a, b)]).abs();
                    let se = mc.std_error[(a, b)];
                    let zscore = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
                    worst_z = worst_z.max(zscore);
                    if zscore > c.sigmas {
                        exceed += 1;
                    }
                }
            }
        }
        let metrics = BTreeMap::from([
            ("max_z_score".to_string(), worst_z),
            ("entries_compared".to_string(), entries),
        ]);
        self.report(
            vec![Check::at_most("exceedances", exceed as f64, c.max_exceedances as f64)],
            metrics,
        )
    }

    fn bregman(&self) -> Result<SuiteReport> {
        let c = &self.config.bregman;
        let scheme = IntegrationScheme::default();
        let mut worst: f64 = 0.0;
        for i in 0..c.pairs {
            let mut r = self.rng(i as u64);
            let d = if i % 5 == 4 { 2 } else { 1 };
            let (map, measure) = random_family(&mut r, d, false)?;
            let kernel = compute_kernel(&map, &measure, &scheme)?;
            let n = map.output_dim();
            let (t1, t2) = (normal_vec(&mut r, n), normal_vec(&mut r, n));
            let b = bregman_divergence(kernel.matrix(), &t1, &t2)?;
            let lin = |t: &DVector<f64>| {
                let t = t.clone();
                let map = map.clone();
                move |x: &[f64]| -> Result<f64> { Ok(map.eval_features(x)?.dot(&t)) }
            };
            let l2 = sq_l2(lin(&t1), lin(&t2), &measure, &scheme)?;
            worst = worst.max((b - 2.0 * l2).abs());
        }
        self.report(
            vec![Check::at_most("max_abs_diff", worst, c.abs_tol)],
            BTreeMap::new(),
        )
    }

    fn marginal_models(&self) -> Result<Vec<(FeatureMap, BaseMeasure)>> {
        let mut r = self.rng(u64::MAX);
        let corr = BaseMeasure::gaussian(vec![0.2, -0.3], vec![vec![1.0, 0.5], vec![0.5, 0.8]])?;
        let mut out = vec![
            (FeatureMap::polynomial(2, 2)?, BaseMeasure::unit_box(2)),
            (FeatureMap::polynomial(2, 1)?, BaseMeasure::boxed(vec![-1.0, 0.0], vec![1.0, 2.0])?),
            (FeatureMap::polynomial(2, 2)?, corr),
            (FeatureMap::random_cosine(2, 6, 2.0, r.random())?, random_box(&mut r, 2)?),
            (random_cosine_map(&mut r, 2, 3)?, BaseMeasure::standard_gaussian(2)),
        ];
        let extra = self.config.marginals.models.saturating_sub(out.len());
        for _ in 0..extra {
            out.push(random_family(&mut r, 2, false)?);
        }
        out.truncate(self.config.marginals.models);
        Ok(out)
    }

    fn marginals(&self) -> Result<SuiteReport> {
        let c = &self.config.marginals;
        let scheme = IntegrationScheme::default();
        let mut worst: f64 = 0.0;
        let mut peak: f64 = 0.0;
        for (i, (map, measure)) in self.marginal_models()?.into_iter().enumerate() {
            let mut r = self.rng(i as u64);
            let theta = DMatrix::from_fn(c.rows, map.output_dim(), |_, _| normal(&mut r));
            let model = SquaredFamilyModel::with_scheme(map, measure, &scheme, Parameter::Matrix(theta))?;
            let axis = probe_grid(model.measure(), c.grid, 2.5);
            for x2 in axis.iter().step_by(c.grid).map(|p| p[1]) {
                let cond = model.conditional(&[1], &[x2], &scheme)?;
                let marginal = cond.normalizer() / model.normalizer();
                for x1 in axis.iter().take(c.grid).map(|p| p[0]) {
                    let joint = model.density(&[x1, x2])?;
                    let product = cond.density(&[x1])? * marginal;
                    worst = worst.max((joint - product).abs());
                    peak = peak.max(joint);
                }
            }
        }
        self.report(
            vec![Check::at_most("max_abs_diff", worst, c.abs_tol)],
            BTreeMap::from([("max_joint_density".to_string(), peak)]),
        )
    }

    fn tensor_normaliser(&self) -> Result<SuiteReport> {
        let c = &self.config.tensor_normaliser;
        let scheme = IntegrationScheme::default();
        let mut r = self.rng(u64::MAX);
        let families = [
            (FeatureMap::polynomial(1, 2)?, BaseMeasure::unit_box(1)),
            (FeatureMap::polynomial(2, 1)?, BaseMeasure::unit_box(2)),
            (random_cosine_map(&mut r, 1, 2)?, BaseMeasure::standard_gaussian(1)),
        ];
        let mut worst_excess = f64::NEG_INFINITY;
        let mut max_diff: f64 = 0.0;
        for &k in &c.orders {
            let spec = GSpec::monomial(k)?;
            for (f, (map, measure)) in families.iter().enumerate() {
                let tensor = moment_tensor(map, measure, k as usize, &scheme)?;
                for i in 0..c.instances {
                    let mut r = self.rng(((k as u64) << 32) | ((f as u64) << 16) | i as u64);
                    let theta = normal_vec(&mut r, map.output_dim()).normalize();
                    let zt = z_monomial_tensor_checked(&spec, &theta, &tensor)?;
                    let zq = z_quadrature(&spec, map, measure, &theta, &scheme)?;
                    let diff = (zt - zq.value).abs();
                    max_diff = max_diff.max(diff);
                    worst_excess = worst_excess.max(diff - c.abs_tol.max(zq.error_estimate));
                }
            }
        }
        self.report(
            vec![Check::at_most("max_excess_over_tolerance", worst_excess, 0.0)],
            BTreeMap::from([("max_abs_diff".to_string(), max_diff)]),
        )
    }

    fn conformal(&self) -> Result<SuiteReport> {
        let c = &self.config.conformal;
        let scheme = IntegrationScheme::default();
        let mut worst: f64 = 0.0;
        for &k in &c.orders {
            let spec = GSpec::monomial(k)?;
            for i in 0..c.instances {
                let mut r = self.rng(((k as u64) << 32) | i as u64);
                let (map, measure) = random_family(&mut r, 1, false)?;
                let theta = normal_vec(&mut r, map.output_dim());
                let check = conformal_hessian_check(&spec, &map, &measure, &theta, None, &scheme)?;
                worst = worst.max(check.max_abs_diff / symmetric_norm(&check.lhs));
            }
        }
        self.report(
            vec![Check::at_most("max_rel_diff", worst, c.rel_tol)],
            BTreeMap::new(),
        )
    }

    fn orthogonality(&self) -> Result<SuiteReport> {
        let c = &self.config.orthogonality;
        let scheme = IntegrationScheme::default();
        let mut r = self.rng(0);
        let (map, measure) = random_family(&mut r, 1, true)?;
        let theta = normal_vec(&mut r, map.output_dim());
        let probes = probe_grid(&measure, c.probes, 0.0);
        let singular = [
            GSpec::monomial(2)?,
            GSpec::monomial(4)?,
            GSpec::monomial(6)?,
            GSpec::pos_homogeneous(3.0, 0.5)?,
            GSpec::pos_homogeneous(2.0, 2.0)?,
        ];
        let mut worst: f64 = 0.0;
        let mut skipped = 0.0;
        for spec in &singular {
            for v in orthogonality_residuals(spec, &map, &measure, &theta, &probes, &scheme)? {
                if v.is_nan() {
                    skipped += 1.0;
                } else {
                    worst = worst.max(v.abs());
                }
            }
        }
        let exp = orthogonality_residuals(&GSpec::Exponential, &map, &measure, &theta, &probes, &scheme)?;
        let exp_max = exp.iter().filter(|v| !v.is_nan()).fold(0.0f64, |a, v| a.max(v.abs()));
        self.report(
            vec![
                Check::at_most("max_singular_residual", worst, c.singular_tol),
                Check::at_least("max_exponential_residual", exp_max, c.exponential_min),
            ],
            BTreeMap::from([("skipped_zero_probes".to_string(), skipped)]),
        )
    }

    fn normality(&self) -> Result<SuiteReport> {
        let c = &self.config.normality;
        let mut exp = c.experiment.clone();
        exp.master_seed = rng::derive_seed(self.seed, &[self.suite.tag()]);
        let report = experiment_asymptotic_normality(&exp)?;
        let mut rows = report.rows.clone();
        rows.sort_by_key(|r| r.n);
        let errors: Vec<f64> = rows.iter().map(|r| r.rel_error).collect();
        let mut metrics = BTreeMap::new();
        for r in &rows {
            metrics.insert(format!("rel_error_n{}", r.n), r.rel_error);
            metrics.insert(format!("rel_error_canonical_n{}", r.n), r.rel_error_canonical);
            metrics.insert(format!("failed_fits_n{}", r.n), r.failures as f64);
            metrics.insert(format!("mean_within_band_n{}", r.n), f64::from(u8::from(r.mean_within_band)));
        }
        let last = errors.last().copied().unwrap_or(f64::NAN);
        let increases = errors.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        self.report(
            vec![
                Check::at_most("rel_error_at_largest_n", last, c.max_rel_error),
                Check::at_most("largest_increase_in_rel_error", increases, 0.0),
            ],
            metrics,
        )
    }

    fn misspec_rate(&self) -> Result<SuiteReport> {
        let c = &self.config.misspec_rate;
        let mut exp = c.experiment.clone();
        exp.master_seed = rng::derive_seed(self.seed, &[self.suite.tag()]);
        let report = experiment_misspecified_rate(&exp)?;
        let mut rows = report.rows.clone();
        rows.sort_by_key(|r| r.n);
        let medians: Vec<f64> = rows.iter().map(|r| r.median).collect();
        let mut metrics = BTreeMap::from([("kl_star".to_string(), report.kl_star)]);
        for r in &rows {
            metrics.insert(format!("median_n{}", r.n), r.median);
            metrics.insert(format!("p90_n{}", r.n), r.p90);
            metrics.insert(format!("failed_fits_n{}", r.n), r.failures as f64);
        }
        let increases = medians.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let ratio = medians.last().unwrap_or(&f64::NAN) / medians.first().unwrap_or(&f64::NAN);
        self.report(
            vec![
                Check::at_most("largest_increase_in_median", increases, 0.0),
                Check::at_most("final_to_initial_median", ratio, c.max_ratio),
            ],
            metrics,
        )
    }

    fn approx_trend(&self) -> Result<SuiteReport> {
        let c = &self.config.approx_trend;
        let report = experiment_approximation(&c.experiment)?;
        let medians: Vec<f64> = report.rows.iter().map(|r| r.median).collect();
        let mut metrics = BTreeMap::from([("reference_slope".to_string(), report.reference_slope)]);
        for r in &report.rows {
            metrics.insert(format!("median_kl_n{}", r.n), r.median);
        }
        let increases = medians.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        self.report(
            vec![
                Check::at_most("largest_increase_in_median", increases, 0.0),
                Check::at_most("log_log_slope", report.slope, c.max_slope),
            ],
            metrics,
        )
    }

    fn divergence_chain(&self) -> Result<SuiteReport> {
        let c = &self.config.divergence_chain;
        let scheme = IntegrationScheme::quadrature(c.nodes);
        let mut min_slack = f64::INFINITY;
        let mut rp_fail = 0.0;
        let mut half_fail = 0.0;
        let mut worst_ratio: f64 = 0.0;
        for i in 0..c.pairs {
            let mut r = self.rng(i as u64);
            let (map, measure) = random_family(&mut r, 1, false)?;
            let rule = measure.cubature(&scheme)?;
            let kernel = compute_kernel(&map, &measure, &scheme)?;
            let n = map.output_dim();
            let tabulate = |t: &DVector<f64>| -> Result<Vec<f64>> {
                let z = kernel.quadratic_form(t.as_slice());
                rule.points()
                    .map(|x| Ok(map.eval_features(x)?.dot(t).powi(2) / z))
                    .collect()
            };
            let p = tabulate(&normal_vec(&mut r, n))?;
            let q = tabulate(&normal_vec(&mut r, n))?;
            for s in divergence_chain_slacks(&p, &q, rule.weights())? {
                min_slack = min_slack.min(s);
            }
            let ps = smooth_density(&p, c.smoothing, measure.total_mass());
            let rp = reverse_pinsker_bound(&ps, &q, rule.weights())?;
            if !rp.holds() {
                rp_fail += 1.0;
            }
            if rp.kl > rp.half_constant_bound.powi(2) {
                half_fail += 1.0;
            }
            worst_ratio = worst_ratio.max(rp.kl / rp.bound.powi(2));
        }
        self.report(
            vec![
                Check::at_least("min_chain_slack", min_slack, c.min_slack),
                Check::at_most("reverse_pinsker_violations", rp_fail, 0.0),
            ],
            BTreeMap::from([
                ("max_kl_over_bound_squared".to_string(), worst_ratio),
                ("half_constant_violations".to_string(), half_fail),
            ]),
        )
    }

    fn sandwich(&self) -> Result<SuiteReport> {
        let c = &self.config.sandwich;
        let scheme = IntegrationScheme::default();
        let mut worst_closed: f64 = 0.0;
        let mut worst_grid: f64 = 0.0;
        for (i, deg) in [1usize, 1, 2, 2].into_iter().enumerate() {
            let mut r = self.rng(i as u64);
            let family = FamilySpec::new(FeatureMap::polynomial(1, deg)?, BaseMeasure::unit_box(1), &scheme)?;
            let theta = canonicalize(&normal_vec(&mut r, family.dim()), &family.kernel)?;
            let quarter = family
                .k()
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::InvalidArgument("singular kernel".into()))?
                * 0.25;
            let s = sandwich_from_kernels(family.k(), family.k(), &theta)?;
            worst_closed = worst_closed.max((&s.khat - &quarter).amax());
            // r = q / p* = 1 through the quadrature path
            let model = family.model(&theta)?;
            let mut zero = false;
            let target = GridTarget::from_fn(&family.measure, &scheme, |x| {
                let v = model.density(x).unwrap_or(0.0);
                zero |= v == 0.0;
                v
            })?;
            if !zero {
                let s = sandwich_covariance(&target, &theta, &family)?;
                worst_grid = worst_grid.max((&s.khat - &quarter).amax());
            }
        }
        self.report(
            vec![
                Check::at_most("closed_form_max_abs_diff", worst_closed, c.abs_tol),
                Check::at_most("quadrature_max_abs_diff", worst_grid, c.abs_tol),
            ],
            BTreeMap::new(),
        )
    }

    fn sampler(&self) -> Result<SuiteReport> {
        let c = &self.config.sampler;
        let mut min_p = f64::INFINITY;
        let mut violations = 0.0;
        let mut min_rate = f64::INFINITY;
        for i in 0..c.models {
            let mut r = self.rng(i as u64);
            let (map, measure) = random_family(&mut r, 1, true)?;
            let theta = normal_vec(&mut r, map.output_dim());
            let model =
                SquaredFamilyModel::with_scheme(map, measure, &IntegrationScheme::default(), Parameter::Vector(theta))?;
            let draws = rejection_sample(&model, c.samples, self.sub_seed(i as u64), DEFAULT_SAFETY)?;
            if draws.envelope_violation {
                violations += 1.0;
            }
            min_rate = min_rate.min(draws.acceptance_rate);
            let xs: Vec<f64> = draws.samples.iter().map(|x| x[0]).collect();
            let test = equal_mass_chi_square(&model, &xs, c.bins)?;
            min_p = min_p.min(test.p_value);
        }
        self.report(
            vec![
                Check::at_least("min_p_value", min_p, c.alpha),
                Check::at_most("envelope_violations", violations, 0.0),
            ],
            BTreeMap::from([("min_acceptance_rate".to_string(), min_rate)]),
        )
    }
}
