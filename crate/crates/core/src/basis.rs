//! Fourier and POD bases, projection onto them and reconstruction from them.
//!
//! Every mode is stored by its coefficients in the orthonormal trigonometric
//! system `sqrt(2/L) cos(2 pi k x / L)`, `sqrt(2/L) sin(2 pi k x / L)`,
//! `k = 1..pairs`, laid out as `(cos_1..cos_P, sin_1..sin_P)`. Values and
//! derivatives are then available analytically on any grid.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kse::{KseParams, SpatioTemporalField};

/// Number of Fourier pairs used to represent POD modes.
pub const POD_FOURIER_PAIRS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Fourier,
    Pod,
}

impl BasisKind {
    pub fn name(&self) -> &'static str {
        match self {
            BasisKind::Fourier => "fourier",
            BasisKind::Pod => "pod",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub kind: BasisKind,
    pub l: f64,
    pub pairs: usize,
    /// One row per mode, `2 * pairs` trigonometric coefficients per row.
    pub coeffs: DMatrix<f64>,
    /// `(l, n)` labels: `l = 0` cosine, `l = 1` sine (Fourier kind only).
    pub labels: Vec<(u8, usize)>,
    /// Linear-operator eigenvalue of each mode (Fourier kind only).
    pub eigenvalues: Vec<f64>,
    /// Snapshot-covariance eigenvalues in descending order (POD kind only);
    /// the sum of all of them is the mean kinetic energy.
    pub pod_spectrum: Vec<f64>,
}

impl Basis {
    pub fn size(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.kind.name(), self.size())
    }

    /// Trigonometric basis functions on `grid`: `(2 * pairs) x nx`.
    fn trig_table(&self, grid: &[f64], derivative: bool) -> DMatrix<f64> {
        let p = self.pairs;
        let s = (2.0 / self.l).sqrt();
        DMatrix::from_fn(2 * p, grid.len(), |r, i| {
            let k = (r % p + 1) as f64;
            let w = 2.0 * PI * k / self.l;
            let th = w * grid[i];
            match (r < p, derivative) {
                (true, false) => s * th.cos(),
                (false, false) => s * th.sin(),
                (true, true) => -s * w * th.sin(),
                (false, true) => s * w * th.cos(),
            }
        })
    }

    /// Mode values on `grid`: `size x nx`.
    pub fn evaluate(&self, grid: &[f64]) -> DMatrix<f64> {
        &self.coeffs * self.trig_table(grid, false)
    }

    /// Mode x-derivatives on `grid`: `size x nx`.
    pub fn evaluate_derivative(&self, grid: &[f64]) -> DMatrix<f64> {
        &self.coeffs * self.trig_table(grid, true)
    }

    /// Gram matrix of the continuous L2 inner products.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.coeffs * self.coeffs.transpose()
    }

    /// Fraction of the mean kinetic energy carried by the leading `k` POD modes.
    pub fn captured_energy_fraction(&self, k: usize) -> Option<f64> {
        if self.kind != BasisKind::Pod || self.pod_spectrum.is_empty() {
            return None;
        }
        let total: f64 = self.pod_spectrum.iter().sum();
        Some(self.pod_spectrum.iter().take(k).sum::<f64>() / total)
    }

    /// Relabel as a POD basis (same functions, analytic Galerkin path).
    pub fn as_pod(&self) -> Basis {
        Basis {
            kind: BasisKind::Pod,
            ..self.clone()
        }
    }
}

/// Fourier eigenbasis of size `2N`, ordered `(cos 1..N, sin 1..N)`.
pub fn fourier_basis(n: usize, params: &KseParams) -> Result<Basis> {
    if n == 0 {
        return Err(Error::invalid("Fourier basis needs N >= 1"));
    }
    let mut coeffs = DMatrix::zeros(2 * n, 2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut eigenvalues = Vec::with_capacity(2 * n);
    for l in 0..2u8 {
        for k in 1..=n {
            let row = l as usize * n + k - 1;
            coeffs[(row, row)] = 1.0;
            labels.push((l, k));
            eigenvalues.push(params.eigenvalue(k));
        }
    }
    Ok(Basis {
        kind: BasisKind::Fourier,
        l: params.l,
        pairs: n,
        coeffs,
        labels,
        eigenvalues,
        pod_spectrum: Vec::new(),
    })
}

/// Streaming accumulator of the spatial snapshot covariance.
#[derive(Debug, Clone)]
pub struct PodAccumulator {
    l: f64,
    sum: DMatrix<f64>,
    count: usize,
    pending: Vec<f64>,
}

const POD_BLOCK: usize = 512;

impl PodAccumulator {
    pub fn new(nx: usize, l: f64) -> Self {
        Self {
            l,
            sum: DMatrix::zeros(nx, nx),
            count: 0,
            pending: Vec::with_capacity(nx * POD_BLOCK),
        }
    }

    pub fn push(&mut self, snapshot: &[f64]) {
        let nx = self.sum.nrows();
        assert_eq!(snapshot.len(), nx);
        self.pending.extend_from_slice(snapshot);
        self.count += 1;
        if self.pending.len() == nx * POD_BLOCK {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let nx = self.sum.nrows();
        let cols = self.pending.len() / nx;
        if cols == 0 {
            return;
        }
        let block = DMatrix::from_column_slice(nx, cols, &self.pending);
        self.sum.gemm(1.0, &block, &block.transpose(), 1.0);
        self.pending.clear();
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Leading `n` POD modes of everything pushed so far.
    pub fn finish(mut self, n: usize) -> Result<Basis> {
        self.flush();
        let nx = self.sum.nrows();
        if n == 0 {
            return Err(Error::invalid("POD basis needs N >= 1"));
        }
        if self.count < n {
            return Err(Error::TooFewSamples { needed: n, got: self.count });
        }
        if nx < 2 * POD_FOURIER_PAIRS {
            return Err(Error::invalid(format!(
                "POD needs at least {} grid points, got {nx}",
                2 * POD_FOURIER_PAIRS
            )));
        }
        let dx = self.l / nx as f64;
        let cov = self.sum * (dx / self.count as f64);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..nx).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let lead = spectrum[0];
        let rank = spectrum.iter().filter(|&&v| v > 1e-12 * lead).count();
        if !(lead > 0.0) || rank < n {
            return Err(Error::RankDeficient { requested: n, rank: if lead > 0.0 { rank } else { 0 } });
        }

        let grid = crate::kse::uniform_grid(nx, self.l);
        let p = POD_FOURIER_PAIRS;
        let s = (2.0 / self.l).sqrt();
        let mut coeffs = DMatrix::zeros(n, 2 * p);
        for (row, &idx) in order.iter().take(n).enumerate() {
            let v = eig.eigenvectors.column(idx);
            let scale = 1.0 / dx.sqrt();
            for k in 1..=p {
                let w = 2.0 * PI * k as f64 / self.l;
                let (mut c, mut sn) = (0.0, 0.0);
                for i in 0..nx {
                    let phi = v[i] * scale;
                    c += phi * (w * grid[i]).cos();
                    sn += phi * (w * grid[i]).sin();
                }
                c *= dx * s;
                sn *= dx * s;
                if 2 * k == nx {
                    // Nyquist: split evenly between +k and -k
                    c *= 0.5;
                    sn = 0.0;
                }
                coeffs[(row, k - 1)] = c;
                coeffs[(row, p + k - 1)] = sn;
            }
        }
        orthonormalize_rows(&mut coeffs);
        for row in 0..n {
            fix_sign(&mut coeffs, row, p);
        }
        Ok(Basis {
            kind: BasisKind::Pod,
            l: self.l,
            pairs: p,
            coeffs,
            labels: Vec::new(),
            eigenvalues: Vec::new(),
            pod_spectrum: spectrum,
        })
    }
}

/// Modified Gram-Schmidt on the rows (continuous L2 inner product is the
/// Euclidean product of the coefficients).
fn orthonormalize_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            let d = m.row(i).dot(&m.row(j));
            for c in 0..m.ncols() {
                let v = m[(j, c)];
                m[(i, c)] -= d * v;
            }
        }
        let norm = m.row(i).norm();
        m.row_mut(i).scale_mut(1.0 / norm);
    }
}

/// Flip a mode so its largest Fourier pair has a positive cosine (real) part.
fn fix_sign(m: &mut DMatrix<f64>, row: usize, p: usize) {
    let mut best = 0;
    let mut best_mag = -1.0;
    for k in 0..p {
        let mag = m[(row, k)].powi(2) + m[(row, p + k)].powi(2);
        if mag > best_mag * (1.0 + 1e-12) {
            best_mag = mag;
            best = k;
        }
    }
    let c = m[(row, best)];
    let flip = if c.abs() > 1e-12 * best_mag.sqrt() { c < 0.0 } else { m[(row, p + best)] < 0.0 };
    if flip {
        m.row_mut(row).neg_mut();
    }
}

/// POD basis by the method of snapshots on every `snapshot_stride`-th column.
pub fn pod_basis(field: &SpatioTemporalField, n: usize, snapshot_stride: usize) -> Result<Basis> {
    if snapshot_stride == 0 {
        return Err(Error::invalid("snapshot_stride must be positive"));
    }
    let mut acc = PodAccumulator::new(field.nx(), field.l);
    for j in (0..field.len()).step_by(snapshot_stride) {
        acc.push(field.snapshot(j));
    }
    acc.finish(n)
}

/// Time series of modal amplitudes; column `j` is `a(times[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSeries {
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
    pub basis_id: String,
}

impl CoefficientSeries {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>, basis_id: impl Into<String>) -> Result<Self> {
        if values.ncols() != times.len() {
            return Err(Error::invalid(format!(
                "series has {} columns but {} times",
                values.ncols(),
                times.len()
            )));
        }
        if times.len() >= 2 {
            let dt = times[1] - times[0];
            if !(dt > 0.0) {
                return Err(Error::invalid("series times must increase"));
            }
            for (j, w) in times.windows(2).enumerate() {
                // tolerance relative to the absolute time as well, so long
                // windows far from t = 0 are not rejected for roundoff
                let tol = 1e-12 * dt.max(w[1].abs() * 1e-3).max(dt);
                if ((w[1] - w[0]) - dt).abs() > tol.max(1e-12 * w[1].abs()) {
                    return Err(Error::invalid(format!("non-uniform time spacing at sample {j}")));
                }
            }
        }
        Ok(Self {
            times,
            values,
            basis_id: basis_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            (self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64
        }
    }

    /// State at sample `j`.
    pub fn state(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Samples `j0..j1` as a new series.
    pub fn slice(&self, j0: usize, j1: usize) -> CoefficientSeries {
        CoefficientSeries {
            times: self.times[j0..j1].to_vec(),
            values: self.values.columns(j0, j1 - j0).into_owned(),
            basis_id: self.basis_id.clone(),
        }
    }
}

/// `a_k(t_j) = <u(., t_j), mode_k>` by rectangle-rule quadrature.
pub fn project(field: &SpatioTemporalField, basis: &Basis) -> Result<CoefficientSeries> {
    if (field.l - basis.l).abs() > 1e-12 * basis.l {
        return Err(Error::invalid("field and basis have different domain lengths"));
    }
    let modes = basis.evaluate(&field.grid()) * field.dx();
    let values = modes * &field.values;
    CoefficientSeries::new(field.times.clone(), values, basis.id())
}

/// Streaming projector for snapshots produced on the fly.
pub struct Projector {
    weights: DMatrix<f64>,
}

impl Projector {
    pub fn new(basis: &Basis, nx: usize) -> Self {
        let grid = crate::kse::uniform_grid(nx, basis.l);
        Self {
            weights: basis.evaluate(&grid) * (basis.l / nx as f64),
        }
    }

    pub fn project_into(&self, snapshot: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights.row(k).iter().zip(snapshot).map(|(w, u)| w * u).sum();
        }
    }
}

/// `u_G(x, t) = sum_k a_k(t) mode_k(x)` on `grid`.
pub fn reconstruct(series: &CoefficientSeries, basis: &Basis, grid: &[f64]) -> Result<SpatioTemporalField> {
    if series.dim() != basis.size() {
        return Err(Error::invalid(format!(
            "series has {} modes, basis has {}",
            series.dim(),
            basis.size()
        )));
    }
    let modes = basis.evaluate(grid);
    let values = modes.transpose() * &series.values;
    SpatioTemporalField::new(basis.l, series.times.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kse::uniform_grid;

    fn params() -> KseParams {
        KseParams::default()
    }

    #[test]
    fn fourier_eigenvalues_and_instability() {
        let b = fourier_basis(10, &params()).unwrap();
        let expect = [0.0092, 0.0272, 0.0252, -0.0448];
        for (n, e) in expect.iter().enumerate() {
            assert!((b.eigenvalues[n] - e).abs() < 1e-14);
            assert!((b.eigenvalues[10 + n] - e).abs() < 1e-14);
        }
        let unstable: Vec<usize> = (1..=10).filter(|&n| params().eigenvalue(n) > 0.0).collect();
        assert_eq!(unstable, vec![1, 2, 3]);
        assert_eq!(b.eigenvalues.iter().filter(|&&v| v > 0.0).count(), 6);
        assert_eq!(b.labels[0], (0, 1));
        assert_eq!(b.labels[10], (1, 1));
    }

    #[test]
    fn fourier_modes_are_orthonormal_on_the_grid() {
        let p = params();
        let b = fourier_basis(20, &p).unwrap();
        let m = b.evaluate(&p.grid());
        let g = &m * m.transpose() * p.dx();
        assert!((g - DMatrix::identity(40, 40)).abs().max() < 1e-12);
        let e10 = m.row(0);
        assert!((e10.norm_squared() * p.dx() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn project_reconstruct_round_trip() {
        let p = params();
        let b = fourier_basis(5, &p).unwrap();
        let a = DMatrix::from_fn(10, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.0) * 0.1);
        let s = CoefficientSeries::new(vec![0.0, 0.1, 0.2], a.clone(), b.id()).unwrap();
        let f = reconstruct(&s, &b, &p.grid()).unwrap();
        let back = project(&f, &b).unwrap();
        assert!((back.values - a).abs().max() < 1e-10);
    }

    #[test]
    fn scaled_mode_projects_to_constant() {
        let p = params();
        let b = fourier_basis(4, &p).unwrap();
        let modes = b.evaluate(&p.grid());
        let f = SpatioTemporalField::new(p.l, vec![0.0, 1.0], DMatrix::from_fn(p.nx, 2, |i, _| 3.0 * modes[(5, i)])).unwrap();
        let s = project(&f, &b).unwrap();
        for j in 0..2 {
            for k in 0..8 {
                let want = if k == 5 { 3.0 } else { 0.0 };
                assert!((s.values[(k, j)] - want).abs() < 1e-10);
            }
        }
        let zero = SpatioTemporalField::new(p.l, vec![0.0], DMatrix::zeros(p.nx, 1)).unwrap();
        assert!(project(&zero, &b).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pod_of_rank_one_data() {
        let p = params();
        let b = fourier_basis(1, &p).unwrap();
        let e = b.evaluate(&p.grid());
        let amps = [1.0, -2.0, 0.5, 3.0];
        let f = SpatioTemporalField::new(
            p.l,
            vec![0.0, 1.0, 2.0, 3.0],
            DMatrix::from_fn(p.nx, 4, |i, j| amps[j] * e[(0, i)]),
        )
        .unwrap();
        let pod = pod_basis(&f, 1, 1).unwrap();
        // mode equals +cos_1 under the sign convention
        assert!((pod.coeffs[(0, 0)] - 1.0).abs() < 1e-10);
        let mean_energy = amps.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!((pod.pod_spectrum[0] - mean_energy).abs() < 1e-10 * mean_energy);
        assert!(matches!(pod_basis(&f, 2, 1), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn pod_modes_orthonormal_and_sorted() {
        let p = params();
        let grid = uniform_grid(p.nx, p.l);
        // a traveling multi-harmonic wave gives a rich snapshot set
        let times: Vec<f64> = (0..200).map(|j| j as f64 * 0.37).collect();
        let values = DMatrix::from_fn(p.nx, times.len(), |i, j| {
            let x = 2.0 * PI * grid[i] / p.l;
            let t = times[j];
            (0..12).map(|k| (1.0 / (1.0 + k as f64)) * ((k as f64 + 1.0) * x - (0.3 + 0.1 * k as f64) * t).cos()).sum::<f64>()
        });
        let f = SpatioTemporalField::new(p.l, times, values).unwrap();
        let pod = pod_basis(&f, 20, 1).unwrap();
        assert!((pod.gram() - DMatrix::identity(20, 20)).abs().max() < 1e-10);
        assert!(pod.pod_spectrum.windows(2).all(|w| w[0] >= w[1]));
        let frac = pod.captured_energy_fraction(24).unwrap();
        assert!(frac > 0.999999);
    }

    #[test]
    fn non_uniform_series_rejected() {
        assert!(CoefficientSeries::new(vec![0.0, 1.0, 3.0], DMatrix::zeros(1, 3), "x").is_err());
        let s = CoefficientSeries::new(vec![0.0, 0.5, 1.0], DMatrix::zeros(2, 3), "x").unwrap();
        assert_eq!(s.dt(), 0.5);
    }
}
