//! Causation entropy of library features with respect to time derivatives
//! under the Gaussian approximation.
//!
//! Everything is derived from one factored grand covariance. The factor is
//! the R of a tall-skinny QR of the sample matrix `[1 | features | targets]`:
//! `R^T R` is the (uncentered) Gram matrix, and eliminating the leading
//! constant column leaves the Cholesky factor of `N` times the centered
//! covariance. Conditional variances then come out of the factor as sums of
//! squares, without the cancellation that forming the covariance explicitly
//! would cause when a target is almost exactly a combination of features.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::basis::CoefficientSeries;
use crate::derivative::DerivativeScheme;
use crate::error::{Error, Result};
use crate::galerkin::QuadraticModel;
use crate::library::FeatureLibrary;
use crate::linalg::{Cholesky, TsqrAccumulator};

/// Rows per QR block when streaming samples.
const BLOCK_ROWS: usize = 2048;
/// Independent accumulation groups; merged in order so the result does not
/// depend on the number of worker threads.
const GROUPS: usize = 8;
/// Relative pivot below which the feature block counts as singular.
const PIVOT_TOL: f64 = 1e-8;

/// Triangular factor of the Gram matrix of `[1 | features | targets]`.
#[derive(Debug, Clone)]
pub struct RegressionFactor {
    r: DMatrix<f64>,
    features: usize,
    targets: usize,
    samples: usize,
}

impl RegressionFactor {
    /// Factor from in-memory data: `features` is `M x N`, `targets` is `n x N`.
    pub fn from_data(features: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Self> {
        if features.ncols() != targets.ncols() {
            return Err(Error::invalid(format!(
                "feature matrix has {} samples, targets have {}",
                features.ncols(),
                targets.ncols()
            )));
        }
        let (m, n, len) = (features.nrows(), targets.nrows(), features.ncols());
        let r = tsqr_blocks(len, m + n + 1, |j0, j1, block| {
            for (row, j) in (j0..j1).enumerate() {
                block[(row, 0)] = 1.0;
                for k in 0..m {
                    block[(row, 1 + k)] = features[(k, j)];
                }
                for k in 0..n {
                    block[(row, 1 + m + k)] = targets[(k, j)];
                }
            }
        });
        Ok(Self {
            r,
            features: m,
            targets: n,
            samples: len,
        })
    }

    /// Factor streamed from a coefficient series: features of every
    /// `stride`-th sample with a derivative estimate, targets the derivative
    /// minus the optional known vector field.
    pub fn from_series(
        lib: &FeatureLibrary,
        series: &CoefficientSeries,
        scheme: &dyn DerivativeScheme,
        stride: usize,
        known: Option<&QuadraticModel>,
    ) -> Result<Self> {
        if series.dim() != lib.n() {
            return Err(Error::invalid(format!(
                "series has dimension {}, library expects {}",
                series.dim(),
                lib.n()
            )));
        }
        if let Some(q) = known {
            if q.n() != lib.n() {
                return Err(Error::invalid("known vector field has the wrong dimension"));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if series.len() < scheme.min_samples() {
            return Err(Error::TooFewSamples {
                needed: scheme.min_samples(),
                got: series.len(),
            });
        }
        let range = scheme.valid_range(series.len());
        let idx: Vec<usize> = range.step_by(stride).collect();
        let (m, n) = (lib.len(), lib.n());
        let known = known.map(|q| q.compile());
        let r = tsqr_blocks(idx.len(), m + n + 1, |j0, j1, block| {
            let mut f = vec![0.0; m];
            let mut d = vec![0.0; n];
            let mut q = vec![0.0; n];
            for (row, &j) in idx[j0..j1].iter().enumerate() {
                lib.evaluate_state(series.state(j), &mut f);
                scheme.at(series, j, &mut d);
                if let Some(k) = &known {
                    k.drift(series.state(j), &mut q);
                    for (a, b) in d.iter_mut().zip(&q) {
                        *a -= b;
                    }
                }
                block[(row, 0)] = 1.0;
                for k in 0..m {
                    block[(row, 1 + k)] = f[k];
                }
                for k in 0..n {
                    block[(row, 1 + m + k)] = d[k];
                }
            }
        });
        Ok(Self {
            r,
            features: m,
            targets: n,
            samples: idx.len(),
        })
    }

    /// Factor of an exactly known covariance over `(features, targets)`,
    /// treated as centered data from a unit number of samples.
    pub fn from_covariance(cov: &DMatrix<f64>, features: usize) -> Result<Self> {
        let d = cov.nrows();
        if cov.ncols() != d || features > d {
            return Err(Error::invalid("covariance must be square and contain the features"));
        }
        let chol = Cholesky::factor_with_jitter(d, |i, j| cov[(i, j)], || "population covariance".into())?;
        let mut r = DMatrix::zeros(d + 1, d + 1);
        r[(0, 0)] = 1.0;
        for i in 0..d {
            for j in 0..=i {
                r[(1 + j, 1 + i)] = chol.at(i, j);
            }
        }
        Ok(Self {
            r,
            features,
            targets: d - features,
            samples: 1,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Full upper-triangular factor including the constant column.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Cholesky factor (upper) of `N` times the centered grand covariance.
    pub fn centered(&self) -> DMatrix<f64> {
        let d = self.features + self.targets;
        self.r.view((1, 1), (d, d)).into_owned()
    }
}

/// QR of a tall matrix produced block by block by `fill(j0, j1, block)`.
fn tsqr_blocks<F>(rows: usize, cols: usize, fill: F) -> DMatrix<f64>
where
    F: Fn(usize, usize, &mut DMatrix<f64>) + Sync,
{
    let blocks: Vec<(usize, usize)> = (0..rows)
        .step_by(BLOCK_ROWS)
        .map(|j0| (j0, (j0 + BLOCK_ROWS).min(rows)))
        .collect();
    let per_group = blocks.len().div_ceil(GROUPS).max(1);
    let partial: Vec<TsqrAccumulator> = blocks
        .par_chunks(per_group)
        .map(|group| {
            let mut acc = TsqrAccumulator::new(cols);
            for &(j0, j1) in group {
                let mut block = DMatrix::zeros(j1 - j0, cols);
                fill(j0, j1, &mut block);
                acc.push(block);
            }
            acc
        })
        .collect();
    let mut total = TsqrAccumulator::new(cols);
    for p in partial {
        total.merge(p);
    }
    total.finish()
}

/// `n x M` causation entropies in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct CausationMatrix {
    pub values: DMatrix<f64>,
    /// Most negative value before clamping (0 when none were negative).
    pub min_raw: f64,
}

impl CausationMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Values in row-major (equation-major) order, matching flat term indices.
    pub fn flat(&self) -> Vec<f64> {
        let (n, m) = (self.n(), self.m());
        (0..n * m).map(|k| self.values[(k / m, k % m)]).collect()
    }
}

/// Givens rotation zeroing `b` against `a`.
#[inline]
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

/// Residual sums of squares of each target column of an upper-triangular
/// factor, conditioning on the first `k` columns.
fn residuals(t: &DMatrix<f64>, k: usize, targets: usize) -> Vec<f64> {
    (0..targets)
        .map(|i| {
            let c = k + i;
            (k..t.nrows()).map(|r| t[(r, c)].powi(2)).sum()
        })
        .collect()
}

/// Factor of the same data with feature column `m` removed.
fn delete_column(t: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let d = t.ncols();
    let mut out = t.clone().remove_column(m);
    // out is upper Hessenberg from column m on; restore triangularity
    for k in m..d - 1 {
        let (c, s, r) = givens(out[(k, k)], out[(k + 1, k)]);
        out[(k, k)] = r;
        out[(k + 1, k)] = 0.0;
        for j in k + 1..d - 1 {
            let (x, y) = (out[(k, j)], out[(k + 1, j)]);
            out[(k, j)] = c * x + s * y;
            out[(k + 1, j)] = -s * x + c * y;
        }
    }
    out
}

/// Re-triangularize with `lambda` added to the diagonal of the feature block.
fn with_jitter(t: &DMatrix<f64>, features: usize, lambda: f64) -> DMatrix<f64> {
    let d = t.ncols();
    let mut acc = TsqrAccumulator::new(d);
    acc.push(t.clone());
    let mut extra = DMatrix::zeros(features, d);
    for k in 0..features {
        extra[(k, k)] = lambda.sqrt();
    }
    acc.push(extra);
    acc.finish()
}

/// First feature whose pivot is negligible against its raw (uncentered)
/// column norm, so constant features count as singular too.
fn feature_block_singular(t: &DMatrix<f64>, raw_norms: &[f64]) -> Option<usize> {
    (0..raw_norms.len()).find(|&k| !(t[(k, k)].abs() > PIVOT_TOL * raw_norms[k]) || !t[(k, k)].is_finite())
}

/// All `n x M` causation entropies from a regression factor.
pub fn causation_entropy(factor: &RegressionFactor) -> Result<CausationMatrix> {
    let (m, n) = (factor.features, factor.targets);
    if m == 0 || n == 0 {
        return Err(Error::invalid("need at least one feature and one target"));
    }
    let mut t = factor.centered();
    let raw_norms: Vec<f64> = (0..m)
        .map(|k| (0..=k + 1).map(|r| factor.r[(r, k + 1)].powi(2)).sum::<f64>().sqrt())
        .collect();
    if let Some(k) = feature_block_singular(&t, &raw_norms) {
        let d = t.ncols();
        let trace: f64 = t.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let mut rel = 1e-12;
        loop {
            if rel > 1e-6 * (1.0 + 1e-9) {
                return Err(Error::DegenerateLibrary {
                    submatrix: format!("feature covariance (pivot at feature {})", k + 1),
                });
            }
            let jittered = with_jitter(&t, m, rel * trace);
            if feature_block_singular(&jittered, &raw_norms).is_none() {
                log::debug!("feature covariance needed jitter {:e}", rel * trace);
                t = jittered;
                break;
            }
            rel *= 10.0;
        }
    }
    let full = residuals(&t, m, n);
    let floor: Vec<f64> = (0..n)
        .map(|i| 1e-30 * (0..t.nrows()).map(|r| t[(r, m + i)].powi(2)).sum::<f64>() + f64::MIN_POSITIVE)
        .collect();
    let columns: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|k| {
            let tk = delete_column(&t, k);
            let reduced = residuals(&tk, m - 1, n);
            (0..n)
                .map(|i| 0.5 * ((reduced[i] + floor[i]) / (full[i] + floor[i])).log2())
                .collect()
        })
        .collect();
    let mut values = DMatrix::zeros(n, m);
    let mut min_raw: f64 = 0.0;
    for (k, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            min_raw = min_raw.min(v);
            values[(i, k)] = v.max(0.0);
        }
    }
    Ok(CausationMatrix { values, min_raw })
}

/// Causation entropies from an `M x N` feature matrix and `n x N` derivatives.
pub fn causation_entropy_matrix(features: &DMatrix<f64>, derivatives: &DMatrix<f64>) -> Result<CausationMatrix> {
    let (m, n, len) = (features.nrows(), derivatives.nrows(), features.ncols());
    if len < m + n + 1 {
        return Err(Error::TooFewSamples { needed: m + n + 1, got: len });
    }
    causation_entropy(&RegressionFactor::from_data(features, derivatives)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Independent route: explicit covariance, four principal submatrices,
    /// one full Cholesky each.
    fn oracle(cov: &DMatrix<f64>, m: usize, i: usize, k: usize) -> f64 {
        let logdet = |idx: &[usize]| -> f64 {
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| cov[(idx[a], idx[b])]);
            sub.cholesky().unwrap().determinant().log2()
        };
        let y: Vec<usize> = (0..m).filter(|&j| j != k).collect();
        let x = m + i;
        let xy: Vec<usize> = y.iter().copied().chain([x]).collect();
        let yz: Vec<usize> = (0..m).collect();
        let xyz: Vec<usize> = (0..m).chain([x]).collect();
        0.5 * (logdet(&xy) - logdet(&y) - logdet(&xyz) + logdet(&yz))
    }

    fn sample_cov(data: &DMatrix<f64>) -> DMatrix<f64> {
        let n = data.ncols() as f64;
        let mean = data.column_mean();
        let c = data - mean * nalgebra::RowDVector::from_element(data.ncols(), 1.0);
        &c * c.transpose() / n
    }

    fn gaussian_data(len: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut f = DMatrix::zeros(4, len);
        let mut x = DMatrix::zeros(2, len);
        for j in 0..len {
            let g: Vec<f64> = (0..6).map(|_| z()).collect();
            f[(0, j)] = g[0];
            f[(1, j)] = 0.6 * g[0] + 0.8 * g[1];
            f[(2, j)] = g[2] + 0.3 * g[1];
            f[(3, j)] = g[3];
            x[(0, j)] = f[(0, j)] - 0.5 * f[(2, j)] + 0.7 * g[4];
            x[(1, j)] = 0.2 * f[(1, j)] + g[5];
        }
        (f, x)
    }

    #[test]
    fn matches_explicit_cholesky_oracle() {
        let (f, x) = gaussian_data(5000, 3);
        let cem = causation_entropy_matrix(&f, &x).unwrap();
        let mut all = DMatrix::zeros(6, 5000);
        all.rows_mut(0, 4).copy_from(&f);
        all.rows_mut(4, 2).copy_from(&x);
        let cov = sample_cov(&all);
        for i in 0..2 {
            for k in 0..4 {
                let want = oracle(&cov, 4, i, k).max(0.0);
                assert!((cem.values[(i, k)] - want).abs() < 1e-10, "({i},{k}) {} vs {want}", cem.values[(i, k)]);
            }
        }
        assert!(cem.values[(0, 0)] > 0.1 && cem.values[(0, 3)] < 0.01);
        assert!(cem.min_raw > -1e-8);
    }

    #[test]
    fn population_covariance_closed_form() {
        // X, Z with rho^2 = 0.75, Y independent standard normal
        let rho = 0.75f64.sqrt();
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, rho, 0.0, 1.0, 0.0, rho, 0.0, 1.0]);
        let f = RegressionFactor::from_covariance(&cov, 2).unwrap();
        let cem = causation_entropy(&f).unwrap();
        assert!((cem.values[(0, 0)] - 1.0).abs() < 1e-10);
        assert!(cem.values[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn symmetric_in_target_and_candidate() {
        // swapping the roles of X and Z leaves the conditional MI unchanged
        let (f, x) = gaussian_data(3000, 9);
        let a = causation_entropy_matrix(&f, &x.rows(0, 1).into_owned()).unwrap();
        let mut f2 = f.clone();
        f2.row_mut(0).copy_from(&x.row(0));
        let b = causation_entropy_matrix(&f2, &f.rows(0, 1).into_owned()).unwrap();
        assert!((a.values[(0, 0)] - b.values[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn constant_feature_is_rescued_by_jitter() {
        let (mut f, x) = gaussian_data(500, 1);
        f.row_mut(2).fill(4.0);
        let cem = causation_entropy_matrix(&f, &x).unwrap();
        assert!(cem.values[(0, 2)] < 1e-6);
    }

    #[test]
    fn non_finite_feature_is_degenerate() {
        let (mut f, x) = gaussian_data(500, 1);
        f[(1, 7)] = f64::NAN;
        let err = causation_entropy_matrix(&f, &x).unwrap_err();
        assert!(matches!(err, Error::DegenerateLibrary { .. }), "{err}");
    }

    #[test]
    fn too_few_samples() {
        let f = DMatrix::zeros(4, 6);
        let x = DMatrix::zeros(2, 6);
        assert!(matches!(causation_entropy_matrix(&f, &x), Err(Error::TooFewSamples { .. })));
    }
}
