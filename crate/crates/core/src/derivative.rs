//! Finite-difference time derivatives of coefficient series.

use nalgebra::DMatrix;

use crate::basis::CoefficientSeries;
use crate::error::{Error, Result};
use crate::registry::{expect_params, Registry};

/// Derivative estimates for samples `first..first + values.ncols()`.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub values: DMatrix<f64>,
    pub first: usize,
}

impl Derivatives {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.values.ncols()
    }
}

pub trait DerivativeScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn min_samples(&self) -> usize;
    /// Index range of samples that receive a derivative estimate.
    fn valid_range(&self, len: usize) -> std::ops::Range<usize>;
    /// Derivative at sample `j` (which must lie in `valid_range`).
    fn at(&self, series: &CoefficientSeries, j: usize, out: &mut [f64]);

    fn derivatives(&self, series: &CoefficientSeries) -> Result<Derivatives> {
        if series.len() < self.min_samples() {
            return Err(Error::TooFewSamples {
                needed: self.min_samples(),
                got: series.len(),
            });
        }
        let range = self.valid_range(series.len());
        let n = series.dim();
        let mut values = DMatrix::zeros(n, range.len());
        for (c, j) in range.clone().enumerate() {
            let col = &mut values.as_mut_slice()[c * n..(c + 1) * n];
            self.at(series, j, col);
        }
        Ok(Derivatives {
            values,
            first: range.start,
        })
    }
}

pub struct Central;

impl DerivativeScheme for Central {
    fn name(&self) -> &'static str {
        "central"
    }
    fn min_samples(&self) -> usize {
        3
    }
    fn valid_range(&self, len: usize) -> std::ops::Range<usize> {
        1..len.saturating_sub(1)
    }
    fn at(&self, s: &CoefficientSeries, j: usize, out: &mut [f64]) {
        let h = 2.0 * s.dt();
        for ((o, p), m) in out.iter_mut().zip(s.state(j + 1)).zip(s.state(j - 1)) {
            *o = (p - m) / h;
        }
    }
}

pub struct Forward;

impl DerivativeScheme for Forward {
    fn name(&self) -> &'static str {
        "forward"
    }
    fn min_samples(&self) -> usize {
        2
    }
    fn valid_range(&self, len: usize) -> std::ops::Range<usize> {
        0..len.saturating_sub(1)
    }
    fn at(&self, s: &CoefficientSeries, j: usize, out: &mut [f64]) {
        let h = s.dt();
        for ((o, p), c) in out.iter_mut().zip(s.state(j + 1)).zip(s.state(j)) {
            *o = (p - c) / h;
        }
    }
}

pub fn scheme_registry() -> Registry<dyn DerivativeScheme> {
    let mut reg: Registry<dyn DerivativeScheme> = Registry::new("derivative scheme");
    reg.register("central", |p| {
        expect_params("central", p, 0)?;
        Ok(Box::new(Central))
    });
    reg.register("forward", |p| {
        expect_params("forward", p, 0)?;
        Ok(Box::new(Forward))
    });
    reg
}

pub fn scheme_by_name(name: &str) -> Result<Box<dyn DerivativeScheme>> {
    scheme_registry().create(name, &[])
}

/// Finite-difference derivatives of `series` with the named scheme.
pub fn finite_diff_derivatives(series: &CoefficientSeries, scheme: &str) -> Result<Derivatives> {
    scheme_by_name(scheme)?.derivatives(series)
}
