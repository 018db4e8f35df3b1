//! Quadratic feature library: the linear monomials `a_1..a_n` followed by the
//! quadratic monomials `a_j a_k` (`j <= k`) in lexicographic order.

use nalgebra::DMatrix;

use crate::basis::CoefficientSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Linear(usize),
    Quadratic(usize, usize),
}

impl Term {
    /// Human-readable 1-based label such as `a3` or `a1a2`.
    pub fn label(&self) -> String {
        match *self {
            Term::Linear(j) => format!("a{}", j + 1),
            Term::Quadratic(j, k) if j == k => format!("a{}^2", j + 1),
            Term::Quadratic(j, k) => format!("a{}a{}", j + 1, k + 1),
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64]) -> f64 {
        match *self {
            Term::Linear(j) => a[j],
            Term::Quadratic(j, k) => a[j] * a[k],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLibrary {
    n: usize,
    terms: Vec<Term>,
}

pub fn build_library(n: usize) -> Result<FeatureLibrary> {
    if n == 0 {
        return Err(Error::invalid("library needs n >= 1"));
    }
    let mut terms: Vec<Term> = (0..n).map(Term::Linear).collect();
    for j in 0..n {
        for k in j..n {
            terms.push(Term::Quadratic(j, k));
        }
    }
    Ok(FeatureLibrary { n, terms })
}

impl FeatureLibrary {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of candidate functions `M = n + n(n+1)/2`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Library index of a term (0-based).
    pub fn index_of(&self, term: Term) -> usize {
        let n = self.n;
        match term {
            Term::Linear(j) => j,
            Term::Quadratic(j, k) => {
                let (j, k) = if j <= k { (j, k) } else { (k, j) };
                // rows 0..j contribute n, n-1, ..., n-j+1 pairs
                n + j * n - j * j.saturating_sub(1) / 2 + (k - j)
            }
        }
    }

    /// All feature values at one state.
    pub fn evaluate_state(&self, a: &[f64], out: &mut [f64]) {
        debug_assert_eq!(a.len(), self.n);
        let n = self.n;
        out[..n].copy_from_slice(a);
        let mut m = n;
        for j in 0..n {
            let aj = a[j];
            for &ak in &a[j..] {
                out[m] = aj * ak;
                m += 1;
            }
        }
    }

    /// Feature matrix (`M x (j1 - j0)`) for samples `j0..j1` of a series.
    pub fn evaluate_range(&self, series: &CoefficientSeries, j0: usize, j1: usize) -> DMatrix<f64> {
        let m = self.len();
        let mut out = DMatrix::zeros(m, j1 - j0);
        for (c, j) in (j0..j1).enumerate() {
            let col = &mut out.as_mut_slice()[c * m..(c + 1) * m];
            self.evaluate_state(series.state(j), col);
        }
        out
    }
}

/// Feature matrix `M x N_t`.
pub fn evaluate_library(lib: &FeatureLibrary, series: &CoefficientSeries) -> Result<DMatrix<f64>> {
    if series.dim() != lib.n() {
        return Err(Error::invalid(format!(
            "series has dimension {}, library expects {}",
            series.dim(),
            lib.n()
        )));
    }
    Ok(lib.evaluate_range(series, 0, series.len()))
}
