//! Small dense linear-algebra kernels: packed Cholesky with a jitter policy,
//! bordered log-determinant updates, and a tall-skinny QR accumulator.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lower Cholesky factor stored as packed rows (row `i` holds `L[i][0..=i]`).
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    data: Vec<f64>,
    jitter: f64,
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

impl Cholesky {
    /// Factor the symmetric matrix given by `get(i, j)` (lower triangle read)
    /// with `jitter` added to the diagonal. `None` when a pivot is not positive.
    pub fn factor<F>(n: usize, get: F, jitter: f64) -> Option<Self>
    where
        F: Fn(usize, usize) -> f64,
    {
        let mut data = vec![0.0; row_start(n)];
        for i in 0..n {
            let ri = row_start(i);
            for j in 0..=i {
                let rj = row_start(j);
                let dot: f64 = data[ri..ri + j]
                    .iter()
                    .zip(&data[rj..rj + j])
                    .map(|(a, b)| a * b)
                    .sum();
                let mut v = get(i, j) - dot;
                if i == j {
                    v += jitter;
                    if !(v > 0.0) || !v.is_finite() {
                        return None;
                    }
                    data[ri + i] = v.sqrt();
                } else {
                    data[ri + j] = v / data[rj + j];
                }
            }
        }
        Some(Self { n, data, jitter })
    }

    /// Factor with the escalating jitter policy: plain first, then
    /// `lambda = 1e-12 * trace / n`, growing by 10x up to `1e-6 * trace / n`.
    pub fn factor_with_jitter<F>(n: usize, get: F, label: impl FnOnce() -> String) -> Result<Self>
    where
        F: Fn(usize, usize) -> f64,
    {
        if let Some(c) = Self::factor(n, &get, 0.0) {
            return Ok(c);
        }
        let scale = (0..n).map(|i| get(i, i)).sum::<f64>().abs() / n.max(1) as f64;
        let mut rel = 1e-12;
        while rel <= 1e-6 * (1.0 + 1e-9) {
            if let Some(c) = Self::factor(n, &get, rel * scale) {
                log::debug!("Cholesky needed jitter {:e}", rel * scale);
                return Ok(c);
            }
            rel *= 10.0;
        }
        Err(Error::DegenerateLibrary { submatrix: label() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        self.data[row_start(i) + j]
    }

    /// Natural log of the determinant of the factored matrix.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.at(i, i).ln()).sum::<f64>()
    }

    /// Solve `L x = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            let ri = row_start(i);
            let dot: f64 = self.data[ri..ri + i].iter().zip(&b[..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - dot) / self.data[ri + i];
        }
    }

    /// Solve `L^T x = b` in place.
    pub fn backward_solve(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            b[i] /= self.at(i, i);
            let bi = b[i];
            let ri = row_start(i);
            for (bj, l) in b[..i].iter_mut().zip(&self.data[ri..ri + i]) {
                *bj -= l * bi;
            }
        }
    }

    /// Schur complement `c - b^T A^{-1} b` of the bordered matrix `[[A, b], [b^T, c]]`.
    /// This is the last pivot squared of the bordered Cholesky factor.
    pub fn schur_complement(&self, b: &[f64], c: f64) -> f64 {
        let mut x = b.to_vec();
        self.forward_solve(&mut x);
        c - x.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Accumulates the R factor of a tall matrix streamed in row blocks.
#[derive(Debug, Clone)]
pub struct TsqrAccumulator {
    cols: usize,
    r: Option<DMatrix<f64>>,
}

impl TsqrAccumulator {
    pub fn new(cols: usize) -> Self {
        Self { cols, r: None }
    }

    /// Append a row block (rows x cols).
    pub fn push(&mut self, block: DMatrix<f64>) {
        assert_eq!(block.ncols(), self.cols);
        let stacked = match self.r.take() {
            None => block,
            Some(r) => {
                let mut s = DMatrix::zeros(r.nrows() + block.nrows(), self.cols);
                s.rows_mut(0, r.nrows()).copy_from(&r);
                s.rows_mut(r.nrows(), block.nrows()).copy_from(&block);
                s
            }
        };
        self.r = Some(stacked.qr().r());
    }

    pub fn merge(&mut self, other: TsqrAccumulator) {
        if let Some(r) = other.r {
            self.push(r);
        }
    }

    /// Square upper-triangular R (zero-padded when fewer rows than columns were seen).
    pub fn finish(self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.cols, self.cols);
        if let Some(r) = self.r {
            let rows = r.nrows().min(self.cols);
            out.rows_mut(0, rows).copy_from(&r.rows(0, rows));
        }
        out
    }
}

/// Least squares `min ||a x - b||` through a Householder QR of `a`.
/// Returns `None` when `a` is numerically rank deficient.
pub fn lstsq_qr(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let s = a.ncols();
    if s == 0 {
        return Some(Vec::new());
    }
    if a.nrows() < s {
        return None;
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let max_diag = (0..s).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if !(max_diag > 0.0) || (0..s).any(|i| r[(i, i)].abs() <= 1e-13 * max_diag) {
        return None;
    }
    let rhs = nalgebra::DVector::from_column_slice(b);
    let qtb = qr.q().transpose() * rhs;
    let mut x = qtb.rows(0, s).into_owned();
    for i in (0..s).rev() {
        let mut v = x[i];
        for j in i + 1..s {
            v -= r[(i, j)] * x[j];
        }
        x[i] = v / r[(i, i)];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x.as_slice().to_vec())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn logdet_matches_nalgebra() {
        let a = spd(9);
        let c = Cholesky::factor(9, |i, j| a[(i, j)], 0.0).unwrap();
        let expected = a.clone().cholesky().unwrap().determinant().ln();
        assert!((c.logdet() - expected).abs() < 1e-12);
    }

    #[test]
    fn bordered_schur_equals_full_factor_pivot() {
        let a = spd(7);
        let inner = Cholesky::factor(6, |i, j| a[(i, j)], 0.0).unwrap();
        let b: Vec<f64> = (0..6).map(|i| a[(6, i)]).collect();
        let s = inner.schur_complement(&b, a[(6, 6)]);
        let full = Cholesky::factor(7, |i, j| a[(i, j)], 0.0).unwrap();
        assert!((inner.logdet() + s.ln() - full.logdet()).abs() < 1e-12);
    }

    #[test]
    fn solves_round_trip() {
        let a = spd(5);
        let c = Cholesky::factor(5, |i, j| a[(i, j)], 0.0).unwrap();
        let rhs = [1.0, -2.0, 0.5, 3.0, 0.0];
        let mut x = rhs.to_vec();
        c.forward_solve(&mut x);
        c.backward_solve(&mut x);
        let back = &a * nalgebra::DVector::from_vec(x);
        for i in 0..5 {
            assert!((back[i] - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn jitter_rescues_singular_and_gives_up_on_indefinite() {
        // rank one: [[1,1],[1,1]]
        let c = Cholesky::factor_with_jitter(2, |_, _| 1.0, || "ones".into()).unwrap();
        assert!(c.jitter() > 0.0);
        let err = Cholesky::factor_with_jitter(
            2,
            |i, j| if i == j { 1.0 } else { 2.0 },
            || "indefinite".into(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("indefinite"));
    }

    #[test]
    fn tsqr_matches_direct_gram() {
        let m = DMatrix::from_fn(50, 4, |i, j| ((i * 13 + j * 5) % 17) as f64 - 8.0 + j as f64);
        let mut acc = TsqrAccumulator::new(4);
        for start in (0..50).step_by(7) {
            let rows = 7.min(50 - start);
            acc.push(m.rows(start, rows).into_owned());
        }
        let r = acc.finish();
        let g1 = r.transpose() * &r;
        let g2 = m.transpose() * &m;
        assert!((g1 - g2).abs().max() < 1e-9);
    }

    #[test]
    fn lstsq_exact_fit_and_rank_deficiency() {
        let a = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let b: Vec<f64> = (0..6).map(|i| 2.0 + 3.0 * i as f64).collect();
        let x = lstsq_qr(&a, &b).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        let dup = DMatrix::from_fn(6, 2, |i, _| i as f64);
        assert!(lstsq_qr(&dup, &b).is_none());
    }
}
