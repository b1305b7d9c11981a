//! Squared and m-squared family densities.
//!
//! `p(x | theta) = (theta^T psi(x))^2 / theta^T K theta` and, for an `m x n`
//! matrix parameter, `p(x | Theta) = |Theta psi(x)|^2 / Tr(Theta^T Theta K)`.
//! Matrix parameters are flattened column-major (`vec` stacks columns) so that
//! `Tr(Theta K Theta^T) = vec(Theta)^T (K (x) I_m) vec(Theta)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::gfamily::GSpec;
use crate::kernel::{compute_kernel, SquaredKernel};
use crate::measure::{BaseMeasure, IntegrationScheme};

#[derive(Clone, Debug, PartialEq)]
pub enum Parameter {
    Vector(DVector<f64>),
    /// `m x n`; row `r` is the `r`-th squared component.
    Matrix(DMatrix<f64>),
}

impl Parameter {
    pub fn ncols(&self) -> usize {
        match self {
            Parameter::Vector(v) => v.len(),
            Parameter::Matrix(m) => m.ncols(),
        }
    }

    /// Column-major `vec` of the parameter (a vector is its own `vec`).
    pub fn vec(&self) -> DVector<f64> {
        match self {
            Parameter::Vector(v) => v.clone(),
            Parameter::Matrix(m) => DVector::from_column_slice(m.as_slice()),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Parameter::Vector(_) => 1,
            Parameter::Matrix(m) => m.nrows(),
        }
    }
}

/// Constraint set `{theta_1 >= epsilon, theta^T K theta <= R}` used by the
/// estimators; `normalized` further restricts to the unit ellipsoid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpaceSpec {
    pub epsilon: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(default)]
    pub normalized: bool,
}

impl Default for ParameterSpaceSpec {
    fn default() -> Self {
        ParameterSpaceSpec {
            epsilon: 1e-3,
            radius: 10.0,
            normalized: false,
        }
    }
}

impl ParameterSpaceSpec {
    pub fn new(epsilon: f64, radius: f64, normalized: bool) -> Result<Self> {
        let s = ParameterSpaceSpec {
            epsilon,
            radius,
            normalized,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.radius > 1.0) {
            return Err(Error::InvalidArgument(format!("R must be > 1, got {}", self.radius)));
        }
        Ok(())
    }

    /// Projects onto the constraint set: clamp `theta_1`, then rescale in the
    /// K-norm, alternating up to 50 times until both constraints hold.
    pub fn project(&self, theta: &mut DVector<f64>, k: &DMatrix<f64>) {
        let target = if self.normalized { 1.0 } else { self.radius };
        for _ in 0..50 {
            if theta[0] < self.epsilon {
                theta[0] = self.epsilon;
            }
            let z = theta.dot(&(k * &*theta));
            if !(z > 0.0) {
                return;
            }
            let radial_ok = if self.normalized {
                (z - 1.0).abs() <= 1e-12
            } else {
                z <= target * (1.0 + 1e-12)
            };
            if radial_ok && theta[0] >= self.epsilon {
                return;
            }
            if self.normalized || z > target {
                *theta *= (target / z).sqrt();
            }
            if theta[0] >= self.epsilon * (1.0 - 1e-12) {
                return;
            }
        }
    }

    pub fn contains(&self, theta: &DVector<f64>, k: &DMatrix<f64>, tol: f64) -> bool {
        let z = theta.dot(&(k * theta));
        let radial = if self.normalized {
            (z - 1.0).abs() <= tol
        } else {
            z <= self.radius * (1.0 + tol)
        };
        theta[0] >= self.epsilon * (1.0 - tol) && radial
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SquaredFamilyModel {
    features: FeatureMap,
    measure: BaseMeasure,
    kernel: SquaredKernel,
    parameter: Parameter,
    z: f64,
}

/// `Tr(Theta^T Theta K)`; equals `theta^T K theta` for a vector.
pub fn trace_form(parameter: &Parameter, k: &DMatrix<f64>) -> f64 {
    match parameter {
        Parameter::Vector(v) => v.dot(&(k * v)),
        Parameter::Matrix(m) => (m * k * m.transpose()).trace(),
    }
}

impl SquaredFamilyModel {
    pub fn new(
        features: FeatureMap,
        measure: BaseMeasure,
        kernel: SquaredKernel,
        parameter: Parameter,
    ) -> Result<Self> {
        let n = features.output_dim();
        if features.input_dim() != measure.dim() {
            return Err(Error::DimensionMismatch {
                expected: measure.dim(),
                got: features.input_dim(),
            });
        }
        if kernel.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: kernel.dim(),
            });
        }
        if parameter.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: parameter.ncols(),
            });
        }
        let z = trace_form(&parameter, kernel.matrix());
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::NullSpaceParameter(z));
        }
        Ok(SquaredFamilyModel {
            features,
            measure,
            kernel,
            parameter,
            z,
        })
    }

    /// Builds the model, computing the kernel with `scheme`.
    pub fn with_scheme(
        features: FeatureMap,
        measure: BaseMeasure,
        scheme: &IntegrationScheme,
        parameter: Parameter,
    ) -> Result<Self> {
        let kernel = compute_kernel(&features, &measure, scheme)?;
        Self::new(features, measure, kernel, parameter)
    }

    /// Same family, different parameter; the kernel is reused.
    pub fn with_parameter(&self, parameter: Parameter) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.measure.clone(),
            self.kernel.clone(),
            parameter,
        )
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> Result<Self> {
        self.with_parameter(Parameter::Vector(theta))
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn measure(&self) -> &BaseMeasure {
        &self.measure
    }

    pub fn kernel(&self) -> &SquaredKernel {
        &self.kernel
    }

    pub fn parameter(&self) -> &Parameter {
        &self.parameter
    }

    pub fn theta(&self) -> Option<&DVector<f64>> {
        match &self.parameter {
            Parameter::Vector(v) => Some(v),
            Parameter::Matrix(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.output_dim()
    }

    /// `z = theta^T K theta` (or `Tr(Theta^T Theta K)`).
    pub fn normalizer(&self) -> f64 {
        self.z
    }

    /// Unnormalised density `|Theta psi(x)|^2` given precomputed features.
    pub fn numerator_from_features(&self, psi: &[f64]) -> f64 {
        match &self.parameter {
            Parameter::Vector(v) => {
                let a: f64 = v.iter().zip(psi).map(|(t, p)| t * p).sum();
                a * a
            }
            Parameter::Matrix(m) => (0..m.nrows())
                .map(|r| {
                    let a: f64 = (0..m.ncols()).map(|c| m[(r, c)] * psi[c]).sum();
                    a * a
                })
                .sum(),
        }
    }

    /// `log p(x)`; `-inf` on the zero set of the numerator.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let psi = self.features.eval_features(x)?;
        let num = self.numerator_from_features(psi.as_slice());
        if num == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(num.ln() - self.z.ln())
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        let psi = self.features.eval_features(x)?;
        Ok(self.numerator_from_features(psi.as_slice()) / self.z)
    }

    /// The family of `x1 | x2` with `x2` (coordinates `coords2`) pinned.
    ///
    /// Its statistic is `psi((x1, x2))`, its base measure is `mu(dx1 | x2)`
    /// and the parameter is unchanged; the kernel is recomputed for the
    /// conditional measure with `scheme`.
    pub fn conditional(
        &self,
        coords2: &[usize],
        x2: &[f64],
        scheme: &IntegrationScheme,
    ) -> Result<SquaredFamilyModel> {
        if coords2.len() != x2.len() {
            return Err(Error::DimensionMismatch {
                expected: coords2.len(),
                got: x2.len(),
            });
        }
        if coords2.is_empty() {
            return Ok(self.clone());
        }
        let (cond_measure, _) = self.measure.split(coords2, x2)?;
        let features = self.features.pinned(coords2.to_vec(), x2.to_vec())?;
        Self::with_scheme(features, cond_measure, scheme, self.parameter.clone())
    }

    /// Density of `x2` with respect to the marginal base measure `mu_2`:
    /// `Tr(M K_{1|2}) / Tr(M K)` with `M = Theta^T Theta`.
    pub fn marginal_density(
        &self,
        coords2: &[usize],
        x2: &[f64],
        scheme: &IntegrationScheme,
    ) -> Result<f64> {
        let cond = self.conditional(coords2, x2, scheme)?;
        Ok(cond.normalizer() / self.z)
    }
}

/// Rescales and flips `theta` onto `{theta^T K theta = 1, theta_1 > 0}`.
///
/// When `theta_1 == 0` the sign is fixed by the first nonzero coordinate.
pub fn canonicalize(theta: &DVector<f64>, kernel: &SquaredKernel) -> Result<DVector<f64>> {
    let Some(lead) = theta.iter().copied().find(|v| *v != 0.0) else {
        return Err(Error::InvalidArgument("cannot canonicalize the zero vector".into()));
    };
    let z = kernel.quadratic_form(theta.as_slice());
    if !(z > 0.0) {
        return Err(Error::NullSpaceParameter(z));
    }
    let sign = if lead > 0.0 { 1.0 } else { -1.0 };
    Ok(theta * (sign / z.sqrt()))
}

/// Column-major `vec(L)` of a lower-triangular factor with positive diagonal.
pub fn cholesky_flatten(l: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_cholesky_factor(l)?;
    Ok(DVector::from_column_slice(l.as_slice()))
}

/// Inverse of [`cholesky_flatten`].
pub fn cholesky_unflatten(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: v.len(),
        });
    }
    let l = DMatrix::from_column_slice(n, n, v.as_slice());
    check_cholesky_factor(&l)?;
    Ok(l)
}

fn check_cholesky_factor(l: &DMatrix<f64>) -> Result<()> {
    if !l.is_square() {
        return Err(Error::InvalidArgument("Cholesky factor must be square".into()));
    }
    let n = l.nrows();
    for j in 0..n {
        if !(l[(j, j)] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "nonpositive diagonal entry {} at {j}",
                l[(j, j)]
            )));
        }
        for i in 0..j {
            if l[(i, j)] != 0.0 {
                return Err(Error::InvalidArgument("factor is not lower-triangular".into()));
            }
        }
    }
    Ok(())
}

/// Single-document JSON form of a model: features, measure, optional kernel
/// and either a vector or a matrix parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub features: FeatureMap,
    pub measure: BaseMeasure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<SquaredKernel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Row-major `m x n` parameter for m-squared families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<GSpec>,
}

impl ModelBundle {
    pub fn parameter(&self) -> Result<Parameter> {
        match (&self.theta, &self.theta_matrix) {
            (Some(t), None) => Ok(Parameter::Vector(DVector::from_vec(t.clone()))),
            (None, Some(rows)) => {
                let m = rows.len();
                let n = rows.first().map_or(0, Vec::len);
                if m == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidArgument("theta_matrix must be rectangular".into()));
                }
                Ok(Parameter::Matrix(DMatrix::from_fn(m, n, |i, j| rows[i][j])))
            }
            _ => Err(Error::InvalidArgument(
                "exactly one of theta and theta_matrix is required".into(),
            )),
        }
    }

    /// Builds the model, computing the kernel with `scheme` if the bundle has none.
    pub fn into_model(self, scheme: &IntegrationScheme) -> Result<SquaredFamilyModel> {
        let parameter = self.parameter()?;
        match self.kernel {
            Some(k) => SquaredFamilyModel::new(self.features, self.measure, k, parameter),
            None => SquaredFamilyModel::with_scheme(self.features, self.measure, scheme, parameter),
        }
    }

    pub fn from_model(model: &SquaredFamilyModel) -> Self {
        let (theta, theta_matrix) = match model.parameter() {
            Parameter::Vector(v) => (Some(v.as_slice().to_vec()), None),
            Parameter::Matrix(m) => (
                None,
                Some(
                    (0..m.nrows())
                        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                        .collect(),
                ),
            ),
        };
        ModelBundle {
            features: model.features().clone(),
            measure: model.measure().clone(),
            kernel: Some(model.kernel().clone()),
            theta,
            theta_matrix,
            g: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn linear_model(theta: &[f64]) -> SquaredFamilyModel {
        SquaredFamilyModel::with_scheme(
            FeatureMap::polynomial(1, 1).unwrap(),
            BaseMeasure::unit_box(1),
            &IntegrationScheme::default(),
            Parameter::Vector(DVector::from_column_slice(theta)),
        )
        .unwrap()
    }

    #[test]
    fn normalizer_values() {
        assert_abs_diff_eq!(linear_model(&[0.0, 1.0]).normalizer(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(linear_model(&[1.0, 1.0]).normalizer(), 7.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            linear_model(&[3.0, 3.0]).normalizer(),
            9.0 * 7.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_density_values() {
        let m = linear_model(&[1.0, 1.0]);
        assert_abs_diff_eq!(m.log_density(&[1.0]).unwrap(), (12.0f64 / 7.0).ln(), epsilon = 1e-14);
        let u = linear_model(&[0.0, 1.0]);
        for x in [0.0, 0.3, 1.0] {
            assert_abs_diff_eq!(u.log_density(&[x]).unwrap(), 0.0, epsilon = 1e-14);
        }
        let zero = linear_model(&[1.0, -0.5]);
        assert_eq!(zero.log_density(&[0.5]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn null_space_parameter_rejected() {
        let m = linear_model(&[1.0, 1.0]);
        assert!(matches!(
            m.with_theta(DVector::from_vec(vec![0.0, 0.0])),
            Err(Error::NullSpaceParameter(_))
        ));
    }

    #[test]
    fn canonicalize_examples() {
        let m = linear_model(&[1.0, 1.0]);
        let c = canonicalize(&DVector::from_vec(vec![-2.0, 0.0]), m.kernel()).unwrap();
        assert_abs_diff_eq!(c[0], 3f64.sqrt(), epsilon = 1e-14);
        assert_eq!(c[1], 0.0);
        let again = canonicalize(&c, m.kernel()).unwrap();
        assert!((again - &c).amax() < 1e-15);
        let tie = canonicalize(&DVector::from_vec(vec![0.0, -1.0]), m.kernel()).unwrap();
        assert!(tie[1] > 0.0);
        assert!(canonicalize(&DVector::zeros(2), m.kernel()).is_err());
    }

    #[test]
    fn conditional_substitutes_coordinates() {
        let model = SquaredFamilyModel::with_scheme(
            FeatureMap::polynomial(2, 1).unwrap(),
            BaseMeasure::unit_box(2),
            &IntegrationScheme::quadrature(16),
            Parameter::Vector(DVector::from_vec(vec![1.0, 2.0, 0.5])),
        )
        .unwrap();
        let s = IntegrationScheme::quadrature(16);
        let cond = model.conditional(&[1], &[0.5], &s).unwrap();
        assert_eq!(
            cond.features().eval_features(&[0.3]).unwrap().as_slice(),
            &[0.3, 0.5, 1.0]
        );
        assert_eq!(cond.measure(), &BaseMeasure::unit_box(1));
        let same = model.conditional(&[], &[], &s).unwrap();
        assert_eq!(same, model);
    }

    #[test]
    fn conditional_rejects_discrete_measure() {
        let mu = BaseMeasure::discrete(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.2]], vec![1.0; 3]).unwrap();
        let model = SquaredFamilyModel::with_scheme(
            FeatureMap::polynomial(2, 1).unwrap(),
            mu,
            &IntegrationScheme::default(),
            Parameter::Vector(DVector::from_vec(vec![1.0, 1.0, 1.0])),
        )
        .unwrap();
        assert!(matches!(
            model.conditional(&[0], &[0.0], &IntegrationScheme::default()),
            Err(Error::NotFactorizable(_))
        ));
    }

    #[test]
    fn cholesky_flattening() {
        let id = DMatrix::<f64>::identity(3, 3);
        let v = cholesky_flatten(&id).unwrap();
        for (i, val) in v.iter().enumerate() {
            assert_eq!(*val, if i % 4 == 0 { 1.0 } else { 0.0 });
        }
        let mut bad = id.clone();
        bad[(1, 1)] = 0.0;
        assert!(cholesky_flatten(&bad).is_err());
        let mut upper = id.clone();
        upper[(0, 2)] = 1.0;
        assert!(cholesky_flatten(&upper).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let m = linear_model(&[1.0, 0.5]);
        let text = serde_json::to_string(&ModelBundle::from_model(&m)).unwrap();
        let back: ModelBundle = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_model(&IntegrationScheme::default()).unwrap(), m);
    }
}
