//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A `Family` is the polynomial squared family `(theta^T psi(x))^2 / z` on
//! `[0, 1]` with `psi(x) = (x^degree, ..., x, 1)`.

use nalgebra::DVector;
use sqfam::estimation::{fit_mle, FamilySpec, FitConfig};
use sqfam::features::FeatureMap;
use sqfam::measure::{BaseMeasure, IntegrationScheme};
use sqfam::sampling::{rejection_sample, DEFAULT_SAFETY};
use wasm_bindgen::prelude::*;

const NODES: usize = 64;

#[wasm_bindgen]
pub struct Family {
    spec: FamilySpec,
}

#[wasm_bindgen]
impl Family {
    #[wasm_bindgen(constructor)]
    pub fn new(degree: usize) -> Result<Family, JsError> {
        Family::build(degree).map_err(js)
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Density on `points` equally spaced nodes of `[0, 1]`.
    #[wasm_bindgen(js_name = densityCurve)]
    pub fn density_curve(&self, theta: Vec<f64>, points: usize) -> Result<Vec<f64>, JsError> {
        self.curve(theta, points).map_err(js)
    }

    /// `z = theta^T K theta`.
    pub fn normalizer(&self, theta: Vec<f64>) -> Result<f64, JsError> {
        Ok(self.spec.model(&DVector::from_vec(theta)).map_err(js)?.normalizer())
    }

    /// Draws `count` points from the model at `theta` and returns the
    /// maximum likelihood estimate refitted on them.
    #[wasm_bindgen(js_name = sampleAndFit)]
    pub fn sample_and_fit(&self, theta: Vec<f64>, count: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        self.refit(theta, count, seed).map_err(js)
    }
}

impl Family {
    fn build(degree: usize) -> sqfam::Result<Family> {
        let spec = FamilySpec::new(
            FeatureMap::polynomial(1, degree)?,
            BaseMeasure::unit_box(1),
            &IntegrationScheme::quadrature(NODES),
        )?;
        Ok(Family { spec })
    }

    fn curve(&self, theta: Vec<f64>, points: usize) -> sqfam::Result<Vec<f64>> {
        let model = self.spec.model(&DVector::from_vec(theta))?;
        let step = 1.0 / (points.max(2) - 1) as f64;
        (0..points).map(|i| model.density(&[i as f64 * step])).collect()
    }

    fn refit(&self, theta: Vec<f64>, count: usize, seed: u64) -> sqfam::Result<Vec<f64>> {
        let model = self.spec.model(&DVector::from_vec(theta))?;
        let x = rejection_sample(&model, count, seed, DEFAULT_SAFETY)?.samples;
        let config = FitConfig {
            seed: seed.wrapping_add(1),
            ..FitConfig::default()
        };
        Ok(fit_mle(&x, &self.spec, &config)?.theta_hat.as_slice().to_vec())
    }
}

fn js(e: sqfam::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_integrates_to_one() {
        let f = Family::build(2).unwrap();
        let n = 2001;
        let v = f.curve(vec![1.0, -2.0, 3.0], n).unwrap();
        let h = 1.0 / (n - 1) as f64;
        // Simpson's rule on the equally spaced curve
        let s: f64 = v
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let w = if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * y
            })
            .sum();
        assert!((s * h / 3.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn refit_recovers_direction() {
        let f = Family::build(1).unwrap();
        let t = f.refit(vec![1.0, 1.0], 4000, 9).unwrap();
        let r = t[1] / t[0];
        assert!((r - 1.0).abs() < 0.35, "ratio {r}");
    }

    #[test]
    fn null_parameter_is_rejected() {
        let f = Family::build(1).unwrap();
        assert!(f.curve(vec![0.0, 0.0], 5).is_err());
    }
}
