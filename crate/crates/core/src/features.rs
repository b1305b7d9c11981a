//! Feature maps `psi: X -> R^n`.
//!
//! Every map emits its non-constant coordinates first and a constant `1.0`
//! in the last slot. The half-space constraint used during fitting is placed
//! on the first coordinate, so this ordering is part of the public contract.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureKind {
    /// All monomials of total degree `degree` down to 1, highest degree first.
    Polynomial { degree: usize },
    /// `scale * cos(w_i . x + b_i)`; `frequencies` is row-major, one row per feature.
    Cosine {
        frequencies: Vec<Vec<f64>>,
        phases: Vec<f64>,
        scale: f64,
    },
    /// `scale * max(0, w_i . x + b_i)`.
    Relu {
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
        scale: f64,
    },
    /// One-dimensional piecewise-linear table; `values[node]` holds the
    /// non-constant coordinates at `grid[node]`.
    Tabulated { grid: Vec<f64>, values: Vec<Vec<f64>> },
    /// `base` evaluated with the coordinates in `fixed` pinned to `values`;
    /// the remaining (free) coordinates are supplied by the caller in order.
    Pinned {
        base: Box<FeatureMap>,
        fixed: Vec<usize>,
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMapRepr", into = "FeatureMapRepr")]
pub struct FeatureMap {
    input_dim: usize,
    output_dim: usize,
    kind: FeatureKind,
    exponents: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMapRepr {
    input_dim: usize,
    output_dim: usize,
    kind: FeatureKind,
}

impl TryFrom<FeatureMapRepr> for FeatureMap {
    type Error = Error;

    fn try_from(repr: FeatureMapRepr) -> Result<Self> {
        let map = FeatureMap::new(repr.input_dim, repr.kind)?;
        if map.output_dim != repr.output_dim {
            return Err(Error::InvalidArgument(format!(
                "output_dim {} does not match kind (expected {})",
                repr.output_dim, map.output_dim
            )));
        }
        Ok(map)
    }
}

impl From<FeatureMap> for FeatureMapRepr {
    fn from(map: FeatureMap) -> Self {
        FeatureMapRepr {
            input_dim: map.input_dim,
            output_dim: map.output_dim,
            kind: map.kind,
        }
    }
}

fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    // compositions of `total` into `dim` parts, lexicographically descending
    fn compositions(dim: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == dim {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            compositions(dim, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in (1..=degree as u32).rev() {
        compositions(dim, total, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}

fn check_rows(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<()> {
    for row in rows {
        if row.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
    }
    Ok(())
}

impl FeatureMap {
    pub fn new(input_dim: usize, kind: FeatureKind) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        let mut exponents = Vec::new();
        let output_dim = match &kind {
            FeatureKind::Polynomial { degree } => {
                exponents = monomial_exponents(input_dim, *degree);
                exponents.len() + 1
            }
            FeatureKind::Cosine {
                frequencies,
                phases,
                scale,
            } => {
                check_rows(frequencies, input_dim, "cosine frequencies")?;
                if phases.len() != frequencies.len() {
                    return Err(Error::DimensionMismatch {
                        expected: frequencies.len(),
                        got: phases.len(),
                    });
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidArgument("scale must be positive".into()));
                }
                frequencies.len() + 1
            }
            FeatureKind::Relu {
                weights,
                biases,
                scale,
            } => {
                check_rows(weights, input_dim, "relu weights")?;
                if biases.len() != weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: weights.len(),
                        got: biases.len(),
                    });
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidArgument("scale must be positive".into()));
                }
                weights.len() + 1
            }
            FeatureKind::Tabulated { grid, values } => {
                if input_dim != 1 {
                    return Err(Error::InvalidArgument(
                        "tabulated maps are one-dimensional".into(),
                    ));
                }
                if grid.len() < 2 || grid.len() != values.len() {
                    return Err(Error::InvalidArgument(
                        "tabulated map needs >= 2 nodes and one value row per node".into(),
                    ));
                }
                if grid.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidArgument(
                        "tabulated grid must be strictly increasing".into(),
                    ));
                }
                let width = values[0].len();
                check_rows(values, width, "tabulated values")?;
                width + 1
            }
            FeatureKind::Pinned {
                base,
                fixed,
                values,
            } => {
                if fixed.len() != values.len() {
                    return Err(Error::DimensionMismatch {
                        expected: fixed.len(),
                        got: values.len(),
                    });
                }
                let mut seen = vec![false; base.input_dim];
                for &c in fixed {
                    if c >= base.input_dim || seen[c] {
                        return Err(Error::InvalidArgument(format!(
                            "invalid pinned coordinate {c}"
                        )));
                    }
                    seen[c] = true;
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("pinned values".into()));
                }
                if base.input_dim - fixed.len() != input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: base.input_dim - fixed.len(),
                        got: input_dim,
                    });
                }
                base.output_dim
            }
        };
        if output_dim < 2 {
            return Err(Error::InvalidArgument(
                "a feature map needs at least one non-constant coordinate".into(),
            ));
        }
        Ok(FeatureMap {
            input_dim,
            output_dim,
            kind,
            exponents,
        })
    }

    pub fn polynomial(input_dim: usize, degree: usize) -> Result<Self> {
        Self::new(input_dim, FeatureKind::Polynomial { degree })
    }

    /// Cosine features with the conventional `1/sqrt(n-1)` scale.
    pub fn cosine(frequencies: Vec<Vec<f64>>, phases: Vec<f64>) -> Result<Self> {
        let input_dim = frequencies.first().map_or(0, Vec::len);
        let scale = 1.0 / (frequencies.len().max(1) as f64).sqrt();
        Self::new(
            input_dim,
            FeatureKind::Cosine {
                frequencies,
                phases,
                scale,
            },
        )
    }

    /// Random Fourier features: `n - 1` frequencies drawn from `N(0, bandwidth^2 I)`
    /// and phases from `U[0, 2 pi)`, plus the bias.
    ///
    /// Features are drawn one at a time from the seeded stream, so the first
    /// `j` features are the same for every `n > j`.
    pub fn random_cosine(input_dim: usize, n: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("n must be at least 2".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut frequencies = Vec::with_capacity(n - 1);
        let mut phases = Vec::with_capacity(n - 1);
        for _ in 0..n - 1 {
            let w: Vec<f64> = (0..input_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    bandwidth * z
                })
                .collect();
            frequencies.push(w);
            phases.push(rng.random::<f64>() * std::f64::consts::TAU);
        }
        Self::cosine(frequencies, phases)
    }

    /// Random ReLU features with standard-normal weights and biases.
    pub fn random_relu(input_dim: usize, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("n must be at least 2".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::with_capacity(n - 1);
        let mut biases = Vec::with_capacity(n - 1);
        for _ in 0..n - 1 {
            weights.push(
                (0..input_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>(),
            );
            biases.push(StandardNormal.sample(&mut rng));
        }
        Self::new(
            input_dim,
            FeatureKind::Relu {
                weights,
                biases,
                scale: 1.0 / ((n - 1) as f64).sqrt(),
            },
        )
    }

    pub fn tabulated(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(1, FeatureKind::Tabulated { grid, values })
    }

    /// Restricts `self` to the free coordinates by pinning `fixed[i]` to `values[i]`.
    pub fn pinned(&self, fixed: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let input_dim = self.input_dim.saturating_sub(fixed.len());
        Self::new(
            input_dim,
            FeatureKind::Pinned {
                base: Box::new(self.clone()),
                fixed,
                values,
            },
        )
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    /// Evaluates `psi(x)` into `out` without validating `x`.
    ///
    /// Panics if `out.len() != output_dim`; tabulated maps return `OutOfGrid`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.output_dim;
        match &self.kind {
            FeatureKind::Polynomial { .. } => {
                for (slot, exps) in out.iter_mut().zip(&self.exponents) {
                    *slot = exps
                        .iter()
                        .zip(x)
                        .map(|(&e, &xi)| xi.powi(e as i32))
                        .product();
                }
            }
            FeatureKind::Cosine {
                frequencies,
                phases,
                scale,
            } => {
                for ((slot, w), b) in out.iter_mut().zip(frequencies).zip(phases) {
                    let arg: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
                    *slot = scale * arg.cos();
                }
            }
            FeatureKind::Relu {
                weights,
                biases,
                scale,
            } => {
                for ((slot, w), b) in out.iter_mut().zip(weights).zip(biases) {
                    let arg: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
                    *slot = scale * arg.max(0.0);
                }
            }
            FeatureKind::Tabulated { grid, values } => {
                let t = x[0];
                let last = grid.len() - 1;
                if !(t >= grid[0] && t <= grid[last]) {
                    return Err(Error::OutOfGrid(t));
                }
                let hi = grid.partition_point(|&g| g < t).clamp(1, last);
                let lo = hi - 1;
                let w = (t - grid[lo]) / (grid[hi] - grid[lo]);
                for (j, slot) in out[..n - 1].iter_mut().enumerate() {
                    *slot = (1.0 - w) * values[lo][j] + w * values[hi][j];
                }
            }
            FeatureKind::Pinned {
                base,
                fixed,
                values,
            } => {
                let mut full = vec![0.0; base.input_dim];
                let mut is_fixed = vec![false; base.input_dim];
                for (&c, &v) in fixed.iter().zip(values) {
                    full[c] = v;
                    is_fixed[c] = true;
                }
                let mut free = x.iter();
                for (slot, pinned) in full.iter_mut().zip(&is_fixed) {
                    if !pinned {
                        *slot = *free.next().expect("free coordinate count");
                    }
                }
                return base.eval_into(&full, out);
            }
        }
        out[n - 1] = 1.0;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature input".into()));
        }
        Ok(())
    }

    pub fn eval_features(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut out = DVector::zeros(self.output_dim);
        self.eval_into(x, out.as_mut_slice())?;
        Ok(out)
    }

    /// Evaluates every row of `xs` (N x d); returns an N x n matrix.
    pub fn eval_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xs.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: xs.ncols(),
            });
        }
        let mut out = DMatrix::zeros(xs.nrows(), self.output_dim);
        let mut row = vec![0.0; self.input_dim];
        let mut buf = vec![0.0; self.output_dim];
        for i in 0..xs.nrows() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = xs[(i, j)];
            }
            self.check_input(&row)?;
            self.eval_into(&row, &mut buf)?;
            for (j, v) in buf.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }

    /// Numerical rank of the probe feature matrix: singular values above
    /// `tol * largest`. Rank `n` certifies that the features span `R^n` on the probes.
    pub fn span_rank(&self, probes: &[Vec<f64>], tol: f64) -> Result<usize> {
        if probes.is_empty() {
            return Err(Error::InvalidArgument("no probe points".into()));
        }
        let mut rows = Vec::with_capacity(probes.len() * self.output_dim);
        for p in probes {
            rows.extend(self.eval_features(p)?.iter().copied());
        }
        let m = DMatrix::from_row_slice(probes.len(), self.output_dim, &rows);
        let sv = m.singular_values();
        let largest = sv.max();
        Ok(sv.iter().filter(|&&s| s > tol * largest).count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_degree_one() {
        let map = FeatureMap::polynomial(1, 1).unwrap();
        assert_eq!(map.eval_features(&[0.5]).unwrap().as_slice(), &[0.5, 1.0]);
    }

    #[test]
    fn polynomial_degree_two() {
        let map = FeatureMap::polynomial(1, 2).unwrap();
        assert_eq!(
            map.eval_features(&[0.5]).unwrap().as_slice(),
            &[0.25, 0.5, 1.0]
        );
    }

    #[test]
    fn polynomial_two_dims_ordering() {
        let map = FeatureMap::polynomial(2, 2).unwrap();
        assert_eq!(map.output_dim(), 6);
        let v = map.eval_features(&[2.0, 3.0]).unwrap();
        assert_eq!(v.as_slice(), &[4.0, 6.0, 9.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn zero_frequency_cosine() {
        let map = FeatureMap::cosine(vec![vec![0.0]], vec![0.0]).unwrap();
        assert_eq!(map.eval_features(&[0.3]).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let map = FeatureMap::polynomial(2, 1).unwrap();
        assert!(matches!(
            map.eval_features(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            map.eval_features(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(FeatureMap::polynomial(1, 0).is_err());
    }

    #[test]
    fn batch_matches_pointwise() {
        let map = FeatureMap::random_cosine(2, 5, 3.0, 11).unwrap();
        let xs = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.5, -1.0, 0.1, 0.2]);
        let out = map.eval_batch(&xs).unwrap();
        for i in 0..3 {
            let p = map.eval_features(&[xs[(i, 0)], xs[(i, 1)]]).unwrap();
            for j in 0..5 {
                assert_eq!(out[(i, j)].to_bits(), p[j].to_bits());
            }
        }
        assert_eq!(out.row(0), out.row(2));
        let empty = map.eval_batch(&DMatrix::zeros(0, 2)).unwrap();
        assert_eq!(empty.shape(), (0, 5));
    }

    #[test]
    fn random_cosine_is_prefix_consistent() {
        let small = FeatureMap::random_cosine(1, 4, 5.0, 3).unwrap();
        let large = FeatureMap::random_cosine(1, 9, 5.0, 3).unwrap();
        let (FeatureKind::Cosine { frequencies: a, phases: pa, .. }, FeatureKind::Cosine { frequencies: b, phases: pb, .. }) =
            (small.kind(), large.kind())
        else {
            unreachable!()
        };
        assert_eq!(&a[..], &b[..3]);
        assert_eq!(&pa[..], &pb[..3]);
    }

    #[test]
    fn span_rank_cases() {
        let map = FeatureMap::polynomial(1, 1).unwrap();
        let probes = vec![vec![0.0], vec![0.5], vec![1.0]];
        assert_eq!(map.span_rank(&probes, 1e-12).unwrap(), 2);
        assert_eq!(map.span_rank(&probes[1..2], 1e-12).unwrap(), 1);
        let flat = FeatureMap::tabulated(vec![0.0, 1.0], vec![vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(flat.span_rank(&probes, 1e-12).unwrap(), 1);
    }

    #[test]
    fn tabulated_interpolates_and_rejects_out_of_grid() {
        let map =
            FeatureMap::tabulated(vec![0.0, 1.0, 2.0], vec![vec![0.0], vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(map.eval_features(&[0.25]).unwrap().as_slice(), &[0.5, 1.0]);
        assert_eq!(map.eval_features(&[1.5]).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(map.eval_features(&[2.0]).unwrap().as_slice(), &[0.0, 1.0]);
        assert!(matches!(map.eval_features(&[2.5]), Err(Error::OutOfGrid(_))));
    }

    #[test]
    fn pinned_substitutes_fixed_coordinates() {
        let map = FeatureMap::polynomial(2, 1).unwrap();
        let cond = map.pinned(vec![1], vec![0.5]).unwrap();
        assert_eq!(cond.input_dim(), 1);
        assert_eq!(cond.eval_features(&[0.2]).unwrap().as_slice(), &[0.2, 0.5, 1.0]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let map = FeatureMap::random_cosine(2, 6, 4.0, 99).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        let back: FeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(map, back);
        let bad = text.replace("\"input_dim\"", "\"extra\":1,\"input_dim\"");
        assert!(serde_json::from_str::<FeatureMap>(&bad).is_err());
    }
}
