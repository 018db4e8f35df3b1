//! Closed-form maximum-likelihood estimation of drift coefficients (per
//! equation least squares over the selected terms) and of the noise
//! amplitude (quadratic variation of one-step residuals).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::basis::CoefficientSeries;
use crate::causal::RegressionFactor;
use crate::derivative::scheme_by_name;
use crate::error::{Error, Result};
use crate::galerkin::{Provenance, QuadraticModel};
use crate::library::FeatureLibrary;
use crate::linalg::lstsq_qr;
use crate::selection::ModelStructure;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub include_constant: bool,
    /// Known part of the vector field, subtracted from the derivatives before
    /// fitting and added back to the fitted model.
    pub known: Option<QuadraticModel>,
    pub derivative_scheme: String,
    /// Use every `stride`-th sample for the drift regression.
    pub stride: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            include_constant: false,
            known: None,
            derivative_scheme: "central".into(),
            stride: 1,
        }
    }
}

/// Build the regression factor that `fit_with_factor` consumes.
pub fn regression_factor(lib: &FeatureLibrary, series: &CoefficientSeries, opts: &FitOptions) -> Result<RegressionFactor> {
    let scheme = scheme_by_name(&opts.derivative_scheme)?;
    RegressionFactor::from_series(lib, series, scheme.as_ref(), opts.stride, opts.known.as_ref())
}

/// Drift coefficients of every equation from a precomputed factor.
/// Returns `(theta, constant)`.
pub fn fit_drift(structure: &ModelStructure, factor: &RegressionFactor, include_constant: bool) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (m, n) = (factor.features(), factor.targets());
    if structure.n() != n || structure.m() != m {
        return Err(Error::invalid(format!(
            "structure is {}x{}, data provide {n}x{m}",
            structure.n(),
            structure.m()
        )));
    }
    let r = factor.r();
    let mut theta = DMatrix::zeros(n, m);
    let mut constant = vec![0.0; n];
    for i in 0..n {
        let terms = structure.row_terms(i);
        let mut cols: Vec<usize> = Vec::with_capacity(terms.len() + 1);
        if include_constant {
            cols.push(0);
        }
        cols.extend(terms.iter().map(|t| 1 + t));
        if cols.is_empty() {
            continue;
        }
        if cols.len() > factor.samples() {
            return Err(Error::IllPosedFit { equation: i + 1 });
        }
        let target = 1 + m + i;
        // R is triangular, so only its first `target + 1` rows matter
        let rows = target + 1;
        let a = DMatrix::from_fn(rows, cols.len(), |row, c| r[(row, cols[c])]);
        let b: Vec<f64> = (0..rows).map(|row| r[(row, target)]).collect();
        let coef = solve_with_ridge(&a, &b).ok_or(Error::IllPosedFit { equation: i + 1 })?;
        for (c, &col) in cols.iter().enumerate() {
            if col == 0 {
                constant[i] = coef[c];
            } else {
                theta[(i, col - 1)] = coef[c];
            }
        }
    }
    Ok((theta, constant))
}

/// Least squares; on rank deficiency retry with an escalating ridge
/// `lambda = 1e-12 .. 1e-6 * trace(A^T A) / s`.
fn solve_with_ridge(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    if let Some(x) = lstsq_qr(a, b) {
        return Some(x);
    }
    let s = a.ncols();
    let trace = a.iter().map(|v| v * v).sum::<f64>() / s as f64;
    let mut rel = 1e-12;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let lam = (rel * trace).sqrt();
        let mut aug = DMatrix::zeros(a.nrows() + s, s);
        aug.rows_mut(0, a.nrows()).copy_from(a);
        for k in 0..s {
            aug[(a.nrows() + k, k)] = lam;
        }
        let mut rhs = b.to_vec();
        rhs.resize(a.nrows() + s, 0.0);
        if let Some(x) = lstsq_qr(&aug, &rhs) {
            log::debug!("least squares needed ridge {:e}", rel * trace);
            return Some(x);
        }
        rel *= 10.0;
    }
    None
}

/// Quadratic-variation estimate
/// `sigma sigma^T = 1/(K dt) sum (a^{j+1} - a^j - drift(a^j) dt)(...)^T`.
pub fn noise_covariance(model: &QuadraticModel, series: &CoefficientSeries) -> Result<DMatrix<f64>> {
    let n = model.n();
    if series.dim() != n {
        return Err(Error::invalid("series and model dimensions differ"));
    }
    if series.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: series.len() });
    }
    let dt = series.dt();
    let compiled = model.compile();
    let mut f = vec![0.0; n];
    let mut res = vec![0.0; n];
    let mut cov = DMatrix::zeros(n, n);
    let k = series.len() - 1;
    for j in 0..k {
        let (a, next) = (series.state(j), series.state(j + 1));
        compiled.drift(a, &mut f);
        for i in 0..n {
            res[i] = next[i] - a[i] - f[i] * dt;
        }
        for p in 0..n {
            for q in 0..=p {
                cov[(p, q)] += res[p] * res[q];
            }
        }
    }
    for p in 0..n {
        for q in 0..p {
            cov[(q, p)] = cov[(p, q)];
        }
    }
    Ok(cov / (k as f64 * dt))
}

/// Square-root factor of a noise covariance: Cholesky when positive
/// definite, otherwise a truncated eigendecomposition of its numerical rank.
pub fn noise_amplitude(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-12 * lmax).collect();
    if keep.len() == n {
        if let Some(ch) = cov.clone().cholesky() {
            return ch.l();
        }
    }
    let mut sigma = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for i in 0..n {
            sigma[(i, c)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    sigma
}

/// Fit drift and noise for `structure` on `series`.
pub fn fit_mle(structure: &ModelStructure, lib: &FeatureLibrary, series: &CoefficientSeries, opts: &FitOptions) -> Result<QuadraticModel> {
    let factor = regression_factor(lib, series, opts)?;
    fit_with_factor(structure, lib, &factor, series, opts)
}

/// `fit_mle` with the regression factor computed once and shared.
pub fn fit_with_factor(
    structure: &ModelStructure,
    lib: &FeatureLibrary,
    factor: &RegressionFactor,
    series: &CoefficientSeries,
    opts: &FitOptions,
) -> Result<QuadraticModel> {
    if let Some(q) = &opts.known {
        if q.n() != lib.n() {
            return Err(Error::invalid("known vector field has the wrong dimension"));
        }
    }
    let (mut theta, mut constant) = fit_drift(structure, factor, opts.include_constant)?;
    if let Some(q) = &opts.known {
        theta += q.to_theta(lib);
        for (c, k) in constant.iter_mut().zip(&q.constant) {
            *c += k;
        }
    }
    let n = lib.n();
    let mut model = QuadraticModel::from_theta(lib, &theta, constant, DMatrix::zeros(n, 0), Provenance::Learned)?;
    let cov = noise_covariance(&model, series)?;
    model.noise = noise_amplitude(&cov);
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct ResidualStats {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Equations whose `|mean| > 0.1 std`, candidates for a constant forcing.
    pub flagged: Vec<usize>,
}

/// Mean and covariance of `da/dt - drift(a)` over the series.
pub fn residual_stats(model: &QuadraticModel, series: &CoefficientSeries, opts: &FitOptions) -> Result<ResidualStats> {
    let n = model.n();
    if series.dim() != n {
        return Err(Error::invalid("series and model dimensions differ"));
    }
    let scheme = scheme_by_name(&opts.derivative_scheme)?;
    let d = scheme.derivatives(series)?;
    let compiled = model.compile();
    let mut f = vec![0.0; n];
    let cnt = d.values.ncols();
    let mut res = DMatrix::zeros(n, cnt);
    for (c, j) in d.range().enumerate() {
        compiled.drift(series.state(j), &mut f);
        for i in 0..n {
            res[(i, c)] = d.values[(i, c)] - f[i];
        }
    }
    let mean: Vec<f64> = (0..n).map(|i| res.row(i).mean()).collect();
    let mut covariance = DMatrix::zeros(n, n);
    for c in 0..cnt {
        for p in 0..n {
            for q in 0..n {
                covariance[(p, q)] += (res[(p, c)] - mean[p]) * (res[(q, c)] - mean[q]);
            }
        }
    }
    covariance /= cnt as f64;
    let flagged = (0..n)
        .filter(|&i| mean[i].abs() > 0.1 * covariance[(i, i)].sqrt())
        .collect();
    Ok(ResidualStats { mean, covariance, flagged })
}
