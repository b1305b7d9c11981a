//! The squared family kernel `K = int psi psi^T dmu` and its higher-order
//! relatives.
//!
//! `K` is the only integral a squared family ever needs: normalising
//! constants, Fisher information and Bregman divergences are all quadratic
//! forms in it, so it is computed once and stored (JSON) for reuse.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::measure::{BaseMeasure, IntegrationScheme, MeasureKind};

pub const MOMENT_ENTRY_BUDGET: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub struct SquaredKernel {
    matrix: DMatrix<f64>,
    scheme_used: Option<IntegrationScheme>,
    error_estimate: f64,
    min_eigenvalue: f64,
}

/// Row-major JSON layout.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelRepr {
    matrix: Vec<Vec<f64>>,
    #[serde(default)]
    scheme_used: Option<IntegrationScheme>,
    #[serde(default)]
    error_estimate: f64,
    #[serde(default)]
    min_eigenvalue: Option<f64>,
}

impl TryFrom<KernelRepr> for SquaredKernel {
    type Error = Error;
    fn try_from(r: KernelRepr) -> Result<Self> {
        let n = r.matrix.len();
        if n == 0 || r.matrix.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument("kernel matrix must be square".into()));
        }
        let m = DMatrix::from_fn(n, n, |i, j| r.matrix[i][j]);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix".into()));
        }
        // min_eigenvalue is informational in the file; it is always recomputed
        Ok(SquaredKernel::from_matrix(m, r.scheme_used, r.error_estimate))
    }
}

impl From<SquaredKernel> for KernelRepr {
    fn from(k: SquaredKernel) -> Self {
        let n = k.matrix.nrows();
        KernelRepr {
            matrix: (0..n)
                .map(|i| (0..n).map(|j| k.matrix[(i, j)]).collect())
                .collect(),
            scheme_used: k.scheme_used,
            error_estimate: k.error_estimate,
            min_eigenvalue: Some(k.min_eigenvalue),
        }
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

impl SquaredKernel {
    /// Wraps a matrix, symmetrizing it and recording its smallest eigenvalue.
    pub fn from_matrix(
        matrix: DMatrix<f64>,
        scheme_used: Option<IntegrationScheme>,
        error_estimate: f64,
    ) -> Self {
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let min_eigenvalue = min_eigenvalue(&matrix);
        SquaredKernel {
            matrix,
            scheme_used,
            error_estimate,
            min_eigenvalue,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scheme_used(&self) -> Option<IntegrationScheme> {
        self.scheme_used
    }

    pub fn error_estimate(&self) -> f64 {
        self.error_estimate
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// Spectral norm (largest eigenvalue of the symmetric matrix, in absolute value).
    pub fn norm2(&self) -> f64 {
        self.matrix
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn default_tolerance(&self) -> f64 {
        1e-10 * self.norm2()
    }

    /// `theta^T K theta`.
    pub fn quadratic_form(&self, theta: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.matrix[(i, j)] * theta[j];
            }
            acc += theta[i] * row;
        }
        acc
    }

    /// `(is_strictly_pd, min_eigenvalue)` with `is_strictly_pd <=> min_eigenvalue > tol`.
    pub fn psd_check(&self, tol: f64) -> (bool, f64) {
        (self.min_eigenvalue > tol, self.min_eigenvalue)
    }

    /// `K (x) I_m`, the kernel acting on column-stacked `vec(Theta)` for an
    /// `m x n` parameter matrix.
    pub fn m_kernel(&self, m: usize) -> DMatrix<f64> {
        self.matrix.kronecker(&DMatrix::identity(m, m))
    }
}

/// Entry `(i, j)` is `int psi_i psi_j dmu` under `scheme`.
pub fn compute_kernel(
    map: &FeatureMap,
    measure: &BaseMeasure,
    scheme: &IntegrationScheme,
) -> Result<SquaredKernel> {
    if map.input_dim() != measure.dim() {
        return Err(Error::DimensionMismatch {
            expected: measure.dim(),
            got: map.input_dim(),
        });
    }
    let n = map.output_dim();
    let width = n * (n + 1) / 2;
    let mut psi = vec![0.0; n];
    let (values, errors) = measure.integrate_many(width, scheme, |x, out| {
        map.eval_into(x, &mut psi)?;
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                out[k] = psi[i] * psi[j];
                k += 1;
            }
        }
        Ok(())
    })?;
    let mut matrix = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            matrix[(i, j)] = values[k];
            matrix[(j, i)] = values[k];
            k += 1;
        }
    }
    let err = errors.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(SquaredKernel::from_matrix(matrix, Some(*scheme), err))
}

/// Exact kernel of cosine features under a Gaussian base measure.
///
/// Uses `cos a cos b = (cos(a-b) + cos(a+b)) / 2` and
/// `E[cos(u.x + c)] = exp(-u^T S u / 2) cos(u.m + c)` for `x ~ N(m, S)`.
pub fn closed_form_cosine_gaussian(
    map: &FeatureMap,
    measure: &BaseMeasure,
) -> Result<SquaredKernel> {
    let FeatureKind::Cosine {
        frequencies,
        phases,
        scale,
    } = map.kind()
    else {
        return Err(Error::InvalidArgument("feature map is not cosine".into()));
    };
    let MeasureKind::Gaussian { mean, .. } = measure.kind() else {
        return Err(Error::InvalidArgument("measure is not gaussian".into()));
    };
    if map.input_dim() != measure.dim() {
        return Err(Error::DimensionMismatch {
            expected: measure.dim(),
            got: map.input_dim(),
        });
    }
    let cov = measure.covariance().expect("gaussian covariance");
    let expect_cos = |u: &[f64], c: f64| {
        let d = u.len();
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += u[i] * cov[(i, j)] * u[j];
            }
        }
        let shift: f64 = u.iter().zip(mean).map(|(a, b)| a * b).sum();
        (-0.5 * quad).exp() * (shift + c).cos()
    };
    let m = frequencies.len();
    let n = m + 1;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..m {
        for j in i..m {
            let diff: Vec<f64> = frequencies[i]
                .iter()
                .zip(&frequencies[j])
                .map(|(a, b)| a - b)
                .collect();
            let sum: Vec<f64> = frequencies[i]
                .iter()
                .zip(&frequencies[j])
                .map(|(a, b)| a + b)
                .collect();
            let v = 0.5
                * scale
                * scale
                * (expect_cos(&diff, phases[i] - phases[j]) + expect_cos(&sum, phases[i] + phases[j]));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        let b = scale * expect_cos(&frequencies[i], phases[i]);
        k[(i, m)] = b;
        k[(m, i)] = b;
    }
    k[(m, m)] = 1.0;
    Ok(SquaredKernel::from_matrix(k, None, 0.0))
}

/// Symmetric moment tensor `int psi^{(x)k} dmu`, stored by exponent vector
/// `alpha` (length n, `|alpha| = k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTensor {
    order: usize,
    dim: usize,
    #[serde(with = "entries_serde")]
    entries: BTreeMap<Vec<u32>, f64>,
    error_estimate: f64,
}

mod entries_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        alpha: Vec<u32>,
        value: f64,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<Vec<u32>, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m
            .iter()
            .map(|(a, v)| Entry {
                alpha: a.clone(),
                value: *v,
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<Vec<u32>, f64>, D::Error> {
        let v: Vec<Entry> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.alpha, e.value)).collect())
    }
}

/// All exponent vectors of length `n` summing to `k`.
pub fn multi_indices(n: usize, k: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == n {
            prefix.push(k);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=k).rev() {
            prefix.push(first);
            rec(n, k - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(n, k, &mut Vec::with_capacity(n), &mut out);
    }
    out
}

pub fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// `k! / prod(alpha_i!)`.
pub fn multinomial(alpha: &[u32]) -> f64 {
    let mut total = 0u32;
    let mut acc = 1.0;
    for &a in alpha {
        for j in 1..=a {
            total += 1;
            acc *= total as f64 / j as f64;
        }
    }
    acc
}

impl MomentTensor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn error_estimate(&self) -> f64 {
        self.error_estimate
    }

    pub fn get(&self, alpha: &[u32]) -> Option<f64> {
        self.entries.get(alpha).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<u32>, &f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn moment_tensor(
    map: &FeatureMap,
    measure: &BaseMeasure,
    k: usize,
    scheme: &IntegrationScheme,
) -> Result<MomentTensor> {
    if k < 2 || k % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "moment order must be even and >= 2, got {k}"
        )));
    }
    let n = map.output_dim();
    let entries = binomial((n + k - 1) as u128, k as u128);
    if entries > MOMENT_ENTRY_BUDGET {
        return Err(Error::EntryBudget {
            entries,
            budget: MOMENT_ENTRY_BUDGET,
        });
    }
    let alphas = multi_indices(n, k as u32);
    let mut psi = vec![0.0; n];
    let mut powers = vec![vec![0.0; k + 1]; n];
    let (values, errors) = measure.integrate_many(alphas.len(), scheme, |x, out| {
        map.eval_into(x, &mut psi)?;
        for (p, &v) in powers.iter_mut().zip(&psi) {
            p[0] = 1.0;
            for e in 1..=k {
                p[e] = p[e - 1] * v;
            }
        }
        for (slot, alpha) in out.iter_mut().zip(&alphas) {
            *slot = alpha
                .iter()
                .zip(&powers)
                .map(|(&a, p)| p[a as usize])
                .product();
        }
        Ok(())
    })?;
    Ok(MomentTensor {
        order: k,
        dim: n,
        entries: alphas.into_iter().zip(values).collect(),
        error_estimate: errors.iter().fold(0.0f64, |a, &b| a.max(b)),
    })
}
