//! g-families `p(x | theta) = g(theta^T psi(x)) / z(theta)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::kernel::{multinomial, MomentTensor};
use crate::measure::{BaseMeasure, Integral, IntegrationScheme};

pub const MAX_MONOMIAL_ORDER: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GSpecRepr", into = "GSpecRepr")]
pub enum GSpec {
    /// `g(a) = exp(a)`; kept for comparison with exponential families.
    Exponential,
    /// `a^k` for `a > 0`, `c |a|^k` for `a <= 0`.
    PosHomogeneous { k: f64, c: f64 },
    /// `a^k` with `k` even.
    Monomial { k: u32 },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum GSpecRepr {
    Exponential,
    PosHomogeneous { k: f64, c: f64 },
    Monomial { k: u32 },
}

impl TryFrom<GSpecRepr> for GSpec {
    type Error = Error;

    fn try_from(r: GSpecRepr) -> Result<Self> {
        match r {
            GSpecRepr::Exponential => Ok(GSpec::Exponential),
            GSpecRepr::PosHomogeneous { k, c } => GSpec::pos_homogeneous(k, c),
            GSpecRepr::Monomial { k } => GSpec::monomial(k),
        }
    }
}

impl From<GSpec> for GSpecRepr {
    fn from(g: GSpec) -> Self {
        match g {
            GSpec::Exponential => GSpecRepr::Exponential,
            GSpec::PosHomogeneous { k, c } => GSpecRepr::PosHomogeneous { k, c },
            GSpec::Monomial { k } => GSpecRepr::Monomial { k },
        }
    }
}

impl GSpec {
    pub fn monomial(k: u32) -> Result<Self> {
        if k < 2 || k % 2 != 0 || k > MAX_MONOMIAL_ORDER {
            return Err(Error::InvalidArgument(format!(
                "monomial order must be even in [2, {MAX_MONOMIAL_ORDER}], got {k}"
            )));
        }
        Ok(GSpec::Monomial { k })
    }

    pub fn pos_homogeneous(k: f64, c: f64) -> Result<Self> {
        if !(k >= 2.0) || !k.is_finite() {
            return Err(Error::InvalidArgument(format!("homogeneity degree must be >= 2, got {k}")));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!("c must be > 0, got {c}")));
        }
        Ok(GSpec::PosHomogeneous { k, c })
    }

    /// Degree of positive homogeneity, if any.
    pub fn degree(&self) -> Option<f64> {
        match *self {
            GSpec::Exponential => None,
            GSpec::PosHomogeneous { k, .. } => Some(k),
            GSpec::Monomial { k } => Some(k as f64),
        }
    }

    /// The monomial spec as a positively homogeneous one (`c = 1`).
    pub fn as_pos_homogeneous(&self) -> Option<(f64, f64)> {
        match *self {
            GSpec::Exponential => None,
            GSpec::PosHomogeneous { k, c } => Some((k, c)),
            GSpec::Monomial { k } => Some((k as f64, 1.0)),
        }
    }
}

pub fn g_eval(spec: &GSpec, a: f64) -> f64 {
    match *spec {
        GSpec::Exponential => a.exp(),
        GSpec::Monomial { k } => a.powi(k as i32),
        GSpec::PosHomogeneous { k, c } => {
            if a > 0.0 {
                a.powf(k)
            } else {
                c * (-a).powf(k)
            }
        }
    }
}

pub fn g_prime(spec: &GSpec, a: f64) -> Result<f64> {
    Ok(match *spec {
        GSpec::Exponential => a.exp(),
        GSpec::Monomial { k } => k as f64 * a.powi(k as i32 - 1),
        GSpec::PosHomogeneous { k, c } => {
            if a > 0.0 {
                k * a.powf(k - 1.0)
            } else if a < 0.0 {
                -c * k * (-a).powf(k - 1.0)
            } else {
                0.0
            }
        }
    })
}

/// Second derivative. For a positively homogeneous `g` with `k = 2` and
/// `c != 1` the one-sided values at 0 disagree and [`Error::Kink`] is returned.
pub fn g_second(spec: &GSpec, a: f64) -> Result<f64> {
    match *spec {
        GSpec::Exponential => Ok(a.exp()),
        GSpec::Monomial { k } => Ok((k * (k - 1)) as f64 * a.powi(k as i32 - 2)),
        GSpec::PosHomogeneous { k, c } => {
            let kk = k * (k - 1.0);
            if a > 0.0 {
                Ok(kk * a.powf(k - 2.0))
            } else if a < 0.0 {
                Ok(c * kk * (-a).powf(k - 2.0))
            } else if k > 2.0 {
                Ok(0.0)
            } else if c == 1.0 {
                Ok(2.0)
            } else {
                Err(Error::Kink)
            }
        }
    }
}

/// `g'(a)^2 / g(a)`, with the limit taken on the zero set of `g`.
pub fn score_weight(spec: &GSpec, a: f64) -> Result<f64> {
    match *spec {
        GSpec::Exponential => Ok(a.exp()),
        GSpec::Monomial { k } => {
            let k = k as f64;
            Ok(k * k * a.powi(k as i32 - 2))
        }
        GSpec::PosHomogeneous { k, c } => {
            let base = k * k * a.abs().powf(k - 2.0);
            if a > 0.0 {
                Ok(base)
            } else if a < 0.0 || k > 2.0 {
                Ok(c * base)
            } else {
                // a == 0 with k == 2: value is 4 or 4c, a null set for the expectation
                Ok(4.0)
            }
        }
    }
}

/// `z(theta) = <theta^{(x)k}, T>` from an order-k moment tensor.
pub fn z_monomial_tensor(theta: &DVector<f64>, tensor: &MomentTensor) -> Result<f64> {
    if tensor.dim() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: tensor.dim(),
            got: theta.len(),
        });
    }
    let mut z = 0.0;
    for (alpha, value) in tensor.entries() {
        let mono: f64 = alpha
            .iter()
            .zip(theta.iter())
            .map(|(&e, &t)| t.powi(e as i32))
            .product();
        z += multinomial(alpha) * mono * value;
    }
    Ok(z)
}

/// Checks that `tensor` has the order of a monomial `spec` and evaluates z.
pub fn z_monomial_tensor_checked(spec: &GSpec, theta: &DVector<f64>, tensor: &MomentTensor) -> Result<f64> {
    match *spec {
        GSpec::Monomial { k } if k as usize == tensor.order() => z_monomial_tensor(theta, tensor),
        GSpec::Monomial { k } => Err(Error::DimensionMismatch {
            expected: k as usize,
            got: tensor.order(),
        }),
        _ => Err(Error::InvalidArgument("tensor normaliser needs a monomial g".into())),
    }
}

fn check_theta(map: &FeatureMap, measure: &BaseMeasure, theta: &DVector<f64>) -> Result<()> {
    if map.input_dim() != measure.dim() {
        return Err(Error::DimensionMismatch {
            expected: measure.dim(),
            got: map.input_dim(),
        });
    }
    if theta.len() != map.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: map.output_dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// `z(theta) = int g(theta^T psi) dmu`.
pub fn z_quadrature(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    scheme: &IntegrationScheme,
) -> Result<Integral> {
    check_theta(map, measure, theta)?;
    let mut psi = vec![0.0; map.output_dim()];
    let (v, e) = measure.integrate_many(1, scheme, |x, out| {
        map.eval_into(x, &mut psi)?;
        let a: f64 = theta.iter().zip(&psi).map(|(t, p)| t * p).sum();
        out[0] = g_eval(spec, a);
        Ok(())
    })?;
    let out = Integral {
        value: v[0],
        error_estimate: e[0],
    };
    if !out.value.is_finite() {
        return Err(Error::NonFinite(format!("normaliser evaluated to {}", out.value)));
    }
    Ok(out)
}

/// `grad z(theta) = int psi g'(theta^T psi) dmu`.
pub fn z_gradient(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    scheme: &IntegrationScheme,
) -> Result<DVector<f64>> {
    check_theta(map, measure, theta)?;
    let n = map.output_dim();
    let mut psi = vec![0.0; n];
    let (values, _) = measure.integrate_many(n, scheme, |x, out| {
        map.eval_into(x, &mut psi)?;
        let a: f64 = theta.iter().zip(&psi).map(|(t, p)| t * p).sum();
        let gp = g_prime(spec, a)?;
        for (o, p) in out.iter_mut().zip(&psi) {
            *o = p * gp;
        }
        Ok(())
    })?;
    Ok(DVector::from_vec(values))
}

/// A g-family member with its normaliser computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct GFamilyModel {
    pub spec: GSpec,
    pub features: FeatureMap,
    pub measure: BaseMeasure,
    pub theta: DVector<f64>,
    pub z: f64,
}

impl GFamilyModel {
    pub fn new(
        spec: GSpec,
        features: FeatureMap,
        measure: BaseMeasure,
        theta: DVector<f64>,
        scheme: &IntegrationScheme,
    ) -> Result<Self> {
        let z = z_quadrature(&spec, &features, &measure, &theta, scheme)?.value;
        if !(z > 0.0) {
            return Err(Error::NullSpaceParameter(z));
        }
        Ok(GFamilyModel {
            spec,
            features,
            measure,
            theta,
            z,
        })
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        let psi = self.features.eval_features(x)?;
        Ok(g_eval(&self.spec, self.theta.dot(&psi)) / self.z)
    }
}

/// `g(theta^T psi(x)) / z(theta)`.
pub fn density_g(
    spec: &GSpec,
    map: &FeatureMap,
    measure: &BaseMeasure,
    theta: &DVector<f64>,
    x: &[f64],
    scheme: &IntegrationScheme,
) -> Result<f64> {
    GFamilyModel::new(*spec, map.clone(), measure.clone(), theta.clone(), scheme)?.density(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{compute_kernel, moment_tensor};
    use approx::assert_abs_diff_eq;

    fn linear() -> (FeatureMap, BaseMeasure) {
        (FeatureMap::polynomial(1, 1).unwrap(), BaseMeasure::unit_box(1))
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(g_eval(&GSpec::monomial(2).unwrap(), -3.0), 9.0);
        let ph = GSpec::pos_homogeneous(2.0, 2.0).unwrap();
        assert_eq!(g_eval(&ph, -3.0), 18.0);
        assert_eq!(g_eval(&ph, 3.0), 9.0);
        for spec in [GSpec::monomial(4).unwrap(), ph, GSpec::pos_homogeneous(3.5, 0.5).unwrap()] {
            assert_eq!(g_eval(&spec, 1.0), 1.0);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let specs = [
            GSpec::Exponential,
            GSpec::monomial(4).unwrap(),
            GSpec::pos_homogeneous(2.0, 2.0).unwrap(),
            GSpec::pos_homogeneous(3.5, 0.7).unwrap(),
        ];
        let h = 1e-5;
        for spec in &specs {
            for a in [-1.3, -0.4, 0.2, 0.9, 1.7] {
                let fd = (g_eval(spec, a + h) - g_eval(spec, a - h)) / (2.0 * h);
                let gp = g_prime(spec, a).unwrap();
                assert!((fd - gp).abs() < 1e-6 * (1.0 + gp.abs()), "{spec:?} {a}");
                let fd2 = (g_prime(spec, a + h).unwrap() - g_prime(spec, a - h).unwrap()) / (2.0 * h);
                let g2 = g_second(spec, a).unwrap();
                assert!((fd2 - g2).abs() < 1e-5 * (1.0 + g2.abs()));
            }
        }
    }

    #[test]
    fn kink_at_zero() {
        assert!(matches!(
            g_second(&GSpec::pos_homogeneous(2.0, 2.0).unwrap(), 0.0),
            Err(Error::Kink)
        ));
        assert_eq!(g_second(&GSpec::pos_homogeneous(2.0, 1.0).unwrap(), 0.0).unwrap(), 2.0);
        assert_eq!(g_second(&GSpec::pos_homogeneous(3.0, 2.0).unwrap(), 0.0).unwrap(), 0.0);
        assert_eq!(g_prime(&GSpec::pos_homogeneous(2.0, 2.0).unwrap(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(GSpec::monomial(3).is_err());
        assert!(GSpec::monomial(0).is_err());
        assert!(GSpec::monomial(10).is_err());
        assert!(GSpec::pos_homogeneous(1.5, 1.0).is_err());
        assert!(GSpec::pos_homogeneous(2.0, 0.0).is_err());
        assert!(serde_json::from_str::<GSpec>(r#"{"kind":"monomial","k":3}"#).is_err());
        let g: GSpec = serde_json::from_str(r#"{"kind":"pos_homogeneous","k":2.0,"c":2.0}"#).unwrap();
        assert_eq!(g, GSpec::PosHomogeneous { k: 2.0, c: 2.0 });
    }

    #[test]
    fn tensor_normaliser() {
        let (map, mu) = linear();
        let s = IntegrationScheme::default();
        let t4 = moment_tensor(&map, &mu, 4, &s).unwrap();
        let one = DVector::from_vec(vec![1.0, 1.0]);
        assert_abs_diff_eq!(z_monomial_tensor(&one, &t4).unwrap(), 31.0 / 5.0, epsilon = 1e-12);
        let unit = DVector::from_vec(vec![0.0, 1.0]);
        assert_abs_diff_eq!(z_monomial_tensor(&unit, &t4).unwrap(), 1.0, epsilon = 1e-14);
        let t2 = moment_tensor(&map, &mu, 2, &s).unwrap();
        let k = compute_kernel(&map, &mu, &s).unwrap();
        let theta = DVector::from_vec(vec![0.3, -1.2]);
        assert_abs_diff_eq!(
            z_monomial_tensor(&theta, &t2).unwrap(),
            k.quadratic_form(theta.as_slice()),
            epsilon = 1e-12
        );
        assert!(z_monomial_tensor_checked(&GSpec::monomial(2).unwrap(), &theta, &t4).is_err());
    }

    #[test]
    fn quadrature_normaliser() {
        let (map, mu) = linear();
        let s = IntegrationScheme::default();
        let one = DVector::from_vec(vec![1.0, 1.0]);
        let m4 = GSpec::monomial(4).unwrap();
        let z = z_quadrature(&m4, &map, &mu, &one, &s).unwrap().value;
        assert_abs_diff_eq!(z, 6.2, epsilon = 1e-12);
        let z2 = z_quadrature(&m4, &map, &mu, &(&one * 2.0), &s).unwrap().value;
        assert_abs_diff_eq!(z2, 16.0 * z, epsilon = 1e-10);
        let e = z_quadrature(&GSpec::Exponential, &map, &mu, &DVector::from_vec(vec![1.0, 0.0]), &s)
            .unwrap()
            .value;
        assert_abs_diff_eq!(e, std::f64::consts::E - 1.0, epsilon = 1e-13);
    }

    #[test]
    fn unbounded_exponential_is_reported() {
        let map = FeatureMap::polynomial(1, 2).unwrap();
        let mu = BaseMeasure::standard_gaussian(1);
        let bad = DVector::from_vec(vec![1000.0, 0.0, 0.0]);
        assert!(z_quadrature(&GSpec::Exponential, &map, &mu, &bad, &IntegrationScheme::default()).is_err());
    }

    #[test]
    fn monomial_density_scale_invariant() {
        let (map, mu) = linear();
        let s = IntegrationScheme::default();
        let spec = GSpec::monomial(4).unwrap();
        let theta = DVector::from_vec(vec![1.0, -0.3]);
        for x in [0.1, 0.5, 0.95] {
            let a = density_g(&spec, &map, &mu, &theta, &[x], &s).unwrap();
            let b = density_g(&spec, &map, &mu, &(&theta * 3.5), &[x], &s).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let m = GFamilyModel::new(spec, map, mu.clone(), theta, &s).unwrap();
        let total = mu.integrate(&s, |x| m.density(x).unwrap()).unwrap().value;
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }
}
