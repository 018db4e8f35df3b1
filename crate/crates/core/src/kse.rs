//! Pseudo-spectral ETDRK4 solver for the periodic 1-D Kuramoto-Sivashinsky
//! equation `u_t = -nu u_xxxx - D u_xx - gamma u u_x` on `[0, L)`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Number of contour points used to evaluate the ETDRK4 coefficients.
const CONTOUR_POINTS: usize = 32;
/// `max |u|` above which a run is declared blown up.
const BLOW_UP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KseParams {
    pub nu: f64,
    pub d: f64,
    pub l: f64,
    pub gamma: f64,
    pub dt: f64,
    pub nx: usize,
}

impl Default for KseParams {
    fn default() -> Self {
        Self {
            nu: 8.0,
            d: 1.0,
            l: 20.0 * PI,
            gamma: 1.0,
            dt: 0.01,
            nx: 128,
        }
    }
}

impl KseParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nu", self.nu),
            ("D", self.d),
            ("L", self.l),
            ("gamma", self.gamma),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.nx < 8 || self.nx % 2 != 0 {
            return Err(Error::invalid(format!("Nx must be even and >= 8, got {}", self.nx)));
        }
        Ok(())
    }

    /// Eigenvalue of the linear operator for the Fourier pair of frequency `n`.
    pub fn eigenvalue(&self, n: usize) -> f64 {
        let k = 2.0 * PI * n as f64 / self.l;
        -self.nu * k.powi(4) + self.d * k * k
    }

    pub fn dx(&self) -> f64 {
        self.l / self.nx as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.nx, self.l)
    }
}

pub fn uniform_grid(nx: usize, l: f64) -> Vec<f64> {
    let dx = l / nx as f64;
    (0..nx).map(|i| i as f64 * dx).collect()
}

/// Space-time samples `u(x_i, t_j)`; column `j` is the snapshot at `times[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalField {
    pub l: f64,
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl SpatioTemporalField {
    pub fn new(l: f64, times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != times.len() {
            return Err(Error::invalid(format!(
                "field has {} columns but {} times",
                values.ncols(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("field times must be strictly increasing"));
        }
        if !(l > 0.0) {
            return Err(Error::invalid("domain length must be positive"));
        }
        Ok(Self { l, times, values })
    }

    pub fn nx(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.l / self.nx() as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.nx(), self.l)
    }

    pub fn snapshot(&self, j: usize) -> &[f64] {
        let nx = self.nx();
        &self.values.as_slice()[j * nx..(j + 1) * nx]
    }
}

/// ETDRK4 coefficient tables, one entry per wavenumber.
#[derive(Debug, Clone)]
pub struct EtdTables {
    pub e: Vec<Complex64>,
    pub e2: Vec<Complex64>,
    pub q: Vec<Complex64>,
    pub f1: Vec<Complex64>,
    pub f2: Vec<Complex64>,
    pub f3: Vec<Complex64>,
}

/// Kassam-Trefethen coefficient tables, averaged over a circle of radius one
/// around each `dt * lambda` so that small arguments do not cancel.
pub fn etdrk4_tables(linear_symbol: &[Complex64], dt: f64) -> Result<EtdTables> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    if let Some(bad) = linear_symbol.iter().find(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid(format!("non-finite linear symbol entry {bad}")));
    }
    let roots: Vec<Complex64> = (0..CONTOUR_POINTS)
        .map(|j| Complex64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64))
        .collect();
    let n = linear_symbol.len();
    let mut t = EtdTables {
        e: Vec::with_capacity(n),
        e2: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        f1: Vec::with_capacity(n),
        f2: Vec::with_capacity(n),
        f3: Vec::with_capacity(n),
    };
    let m = CONTOUR_POINTS as f64;
    for &lam in linear_symbol {
        let hl = lam * dt;
        t.e.push(hl.exp());
        t.e2.push((hl * 0.5).exp());
        let (mut q, mut f1, mut f2, mut f3) = (Complex64::default(), Complex64::default(), Complex64::default(), Complex64::default());
        for &r in &roots {
            let z = hl + r;
            let ez = z.exp();
            let z3 = z * z * z;
            q += ((z * 0.5).exp() - 1.0) / z;
            f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
            f2 += (2.0 + z + ez * (z - 2.0)) / z3;
            f3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
        }
        let real_symbol = lam.im == 0.0;
        let finish = |s: Complex64| {
            let v = s * (dt / m);
            if real_symbol {
                Complex64::new(v.re, 0.0)
            } else {
                v
            }
        };
        t.q.push(finish(q));
        t.f1.push(finish(f1));
        t.f2.push(finish(f2));
        t.f3.push(finish(f3));
    }
    Ok(t)
}

/// Integer frequency of FFT slot `m` (Nyquist mapped to `+nx/2`).
fn frequency(m: usize, nx: usize) -> i64 {
    if m <= nx / 2 {
        m as i64
    } else {
        m as i64 - nx as i64
    }
}

/// Stateful ETDRK4 integrator holding the Fourier coefficients of `u`.
pub struct KseSolver {
    params: KseParams,
    tables: EtdTables,
    /// `-(gamma/2) i k` with dealiased slots zeroed.
    nl_symbol: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    v: Vec<Complex64>,
    steps: u64,
}

impl KseSolver {
    pub fn new(params: KseParams, u0: &[f64]) -> Result<Self> {
        params.validate()?;
        let nx = params.nx;
        if u0.len() != nx {
            return Err(Error::invalid(format!(
                "initial condition has {} points, expected {nx}",
                u0.len()
            )));
        }
        if u0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial condition has non-finite values"));
        }
        let mean = u0.iter().sum::<f64>() / nx as f64;
        let rms = (u0.iter().map(|v| v * v).sum::<f64>() / nx as f64).sqrt();
        if mean.abs() > 1e-12 * rms.max(f64::MIN_POSITIVE) {
            log::warn!("initial condition has mean {mean:e}; subtracting it");
        }
        let symbol: Vec<Complex64> = (0..nx)
            .map(|m| Complex64::new(params.eigenvalue(frequency(m, nx).unsigned_abs() as usize), 0.0))
            .collect();
        let tables = etdrk4_tables(&symbol, params.dt)?;
        let cutoff = (nx / 3) as i64;
        let nl_symbol = (0..nx)
            .map(|m| {
                let f = frequency(m, nx);
                if f.abs() > cutoff || m == nx / 2 {
                    Complex64::default()
                } else {
                    let k = 2.0 * PI * f as f64 / params.l;
                    Complex64::new(0.0, -0.5 * params.gamma * k)
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(nx);
        let inv = planner.plan_fft_inverse(nx);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        let mut v: Vec<Complex64> = u0.iter().map(|&x| Complex64::new(x - mean, 0.0)).collect();
        let mut scratch = vec![Complex64::default(); scratch_len];
        fwd.process_with_scratch(&mut v, &mut scratch);
        v[0] = Complex64::default();
        Ok(Self {
            params,
            tables,
            nl_symbol,
            fwd,
            inv,
            scratch,
            v,
            steps: 0,
        })
    }

    pub fn params(&self) -> &KseParams {
        &self.params
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.params.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Fourier coefficients of the current state (unnormalized DFT).
    pub fn spectrum(&self) -> &[Complex64] {
        &self.v
    }

    /// Current state on the grid.
    pub fn state(&mut self) -> Vec<f64> {
        let mut buf = self.v.clone();
        self.inv.process_with_scratch(&mut buf, &mut self.scratch);
        let scale = 1.0 / self.params.nx as f64;
        buf.iter().map(|z| z.re * scale).collect()
    }

    /// Dealiased `-(gamma/2) d/dx (u^2)` in Fourier space; also returns `max |u|`.
    fn nonlinear(&mut self, v: &[Complex64], out: &mut [Complex64]) -> f64 {
        out.copy_from_slice(v);
        self.inv.process_with_scratch(out, &mut self.scratch);
        let scale = 1.0 / self.params.nx as f64;
        let mut umax: f64 = 0.0;
        for z in out.iter_mut() {
            let u = z.re * scale;
            umax = if u.is_finite() { umax.max(u.abs()) } else { f64::INFINITY };
            *z = Complex64::new(u * u, 0.0);
        }
        self.fwd.process_with_scratch(out, &mut self.scratch);
        for (z, g) in out.iter_mut().zip(&self.nl_symbol) {
            *z *= g;
        }
        umax
    }

    /// Advance one ETDRK4 step.
    pub fn step(&mut self) -> Result<()> {
        let nx = self.params.nx;
        let v = std::mem::take(&mut self.v);
        let mut nv = vec![Complex64::default(); nx];
        let umax = self.nonlinear(&v, &mut nv);
        if !(umax <= BLOW_UP) {
            self.v = v;
            return Err(Error::BlowUp {
                last_stable_time: (self.steps.saturating_sub(1)) as f64 * self.params.dt,
            });
        }
        let t = &self.tables;
        let a: Vec<Complex64> = (0..nx).map(|k| t.e2[k] * v[k] + t.q[k] * nv[k]).collect();
        let mut na = vec![Complex64::default(); nx];
        self.nonlinear(&a, &mut na);
        let t = &self.tables;
        let b: Vec<Complex64> = (0..nx).map(|k| t.e2[k] * v[k] + t.q[k] * na[k]).collect();
        let mut nb = vec![Complex64::default(); nx];
        self.nonlinear(&b, &mut nb);
        let t = &self.tables;
        let c: Vec<Complex64> = (0..nx)
            .map(|k| t.e2[k] * a[k] + t.q[k] * (nb[k] * 2.0 - nv[k]))
            .collect();
        let mut nc = vec![Complex64::default(); nx];
        self.nonlinear(&c, &mut nc);
        let t = &self.tables;
        let mut next: Vec<Complex64> = (0..nx)
            .map(|k| {
                t.e[k] * v[k] + nv[k] * t.f1[k] + (na[k] + nb[k]) * 2.0 * t.f2[k] + nc[k] * t.f3[k]
            })
            .collect();
        // the mean is conserved; pin it against roundoff
        next[0] = Complex64::default();
        // keep the field real: the anti-Hermitian part never sees the
        // nonlinearity, so roundoff in it grows at the linear rates
        for m in 1..nx / 2 {
            let s = (next[m] + next[nx - m].conj()) * 0.5;
            next[m] = s;
            next[nx - m] = s.conj();
        }
        next[nx / 2].im = 0.0;
        self.v = next;
        self.steps += 1;
        Ok(())
    }
}

/// Run the solver and hand every saved snapshot to `observer(t, u)`.
///
/// Snapshots are taken every `save_stride` steps once `t >= t_start_save`.
pub fn simulate_kse_with<F>(
    params: KseParams,
    u0: &[f64],
    t_end: f64,
    save_stride: usize,
    t_start_save: f64,
    mut observer: F,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]),
{
    if !(t_end > 0.0) {
        return Err(Error::invalid(format!("t_end must be positive, got {t_end}")));
    }
    if save_stride == 0 {
        return Err(Error::invalid("save_stride must be positive"));
    }
    let mut solver = KseSolver::new(params, u0)?;
    let n_steps = (t_end / params.dt).round() as u64;
    let start_step = (t_start_save / params.dt - 1e-9).ceil().max(0.0) as u64;
    for j in 0..=n_steps {
        if j >= start_step && (j - start_step) % save_stride as u64 == 0 {
            let u = solver.state();
            observer(solver.time(), &u);
        }
        if j < n_steps {
            solver.step()?;
        }
    }
    Ok(solver.state())
}

pub fn simulate_kse(
    params: KseParams,
    u0: &[f64],
    t_end: f64,
    save_stride: usize,
    t_start_save: f64,
) -> Result<SpatioTemporalField> {
    let mut times = Vec::new();
    let mut data = Vec::new();
    simulate_kse_with(params, u0, t_end, save_stride, t_start_save, |t, u| {
        times.push(t);
        data.extend_from_slice(u);
    })?;
    let values = DMatrix::from_vec(params.nx, times.len(), data);
    SpatioTemporalField::new(params.l, times, values)
}

/// `E(t_j) = dx * sum_i u(x_i, t_j)^2`.
pub fn kinetic_energy(field: &SpatioTemporalField) -> Vec<f64> {
    let dx = field.dx();
    (0..field.len())
        .map(|j| dx * field.snapshot(j).iter().map(|u| u * u).sum::<f64>())
        .collect()
}

/// The standard initial profile `cos(2 pi x / L)` on the grid.
pub fn cosine_initial_condition(params: &KseParams) -> Vec<f64> {
    params
        .grid()
        .iter()
        .map(|x| (2.0 * PI * x / params.l).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_the_reference_regime() {
        let p = KseParams::default();
        assert_eq!((p.nu, p.d, p.gamma, p.dt, p.nx), (8.0, 1.0, 1.0, 0.01, 128));
        assert!((p.l - 20.0 * PI).abs() < 1e-15);
        p.validate().unwrap();
    }

    #[test]
    fn invalid_params_rejected() {
        let p = KseParams { nx: 6, ..Default::default() };
        assert!(p.validate().is_err());
        let p = KseParams { nx: 127, ..Default::default() };
        assert!(p.validate().is_err());
        let p = KseParams { nu: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_symbol_gives_identity_propagator() {
        let t = etdrk4_tables(&[Complex64::default(); 4], 0.3).unwrap();
        for k in 0..4 {
            assert_eq!(t.e[k], Complex64::new(1.0, 0.0));
            assert_eq!(t.e2[k], Complex64::new(1.0, 0.0));
            // phi-function limits: Q -> dt/2, f1 = f2 * 2 = f3 -> dt/6
            assert!((t.q[k].re - 0.15).abs() < 1e-13);
            assert!((t.f1[k].re - 0.05).abs() < 1e-13);
            assert!((t.f2[k].re - 0.05).abs() < 1e-13);
            assert!((t.f3[k].re - 0.05).abs() < 1e-13);
        }
    }

    #[test]
    fn scalar_symbol_exponentials() {
        let t = etdrk4_tables(&[Complex64::new(-1.0, 0.0)], 1.0).unwrap();
        assert!((t.e[0].re - (-1.0f64).exp()).abs() < 1e-15);
        let beta1 = KseParams::default().eigenvalue(1);
        assert!((beta1 - 0.0092).abs() < 1e-15);
        let t = etdrk4_tables(&[Complex64::new(beta1, 0.0)], 0.01).unwrap();
        assert!((t.e[0].re - 0.000092f64.exp()).abs() < 1e-15);
        assert_eq!(t.f1[0].im, 0.0);
    }

    #[test]
    fn contour_matches_closed_form_away_from_zero() {
        // Q = (e^{z/2} - 1)/lambda evaluated directly for a large argument
        let lam = -50.0;
        let dt = 0.1;
        let t = etdrk4_tables(&[Complex64::new(lam, 0.0)], dt).unwrap();
        let z: f64 = lam * dt;
        let q = ((z / 2.0).exp() - 1.0) / lam;
        let f1 = (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / (z * z * z) * dt;
        assert!((t.q[0].re - q).abs() < 1e-14);
        assert!((t.f1[0].re - f1).abs() < 1e-14);
    }

    #[test]
    fn non_finite_symbol_is_rejected() {
        assert!(etdrk4_tables(&[Complex64::new(f64::NAN, 0.0)], 0.1).is_err());
        assert!(etdrk4_tables(&[Complex64::new(1.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn zero_initial_condition_stays_zero() {
        let p = KseParams::default();
        let f = simulate_kse(p, &vec![0.0; p.nx], 1.0, 10, 0.0).unwrap();
        assert_eq!(f.len(), 11);
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saving_schedule() {
        let p = KseParams::default();
        let u0 = cosine_initial_condition(&p);
        let f = simulate_kse(p, &u0, 1.0, 25, 0.5).unwrap();
        let expect = [0.5, 0.75, 1.0];
        assert_eq!(f.len(), 3);
        for (t, e) in f.times.iter().zip(expect) {
            assert!((t - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_is_removed_and_preserved() {
        let p = KseParams::default();
        let u0: Vec<f64> = cosine_initial_condition(&p).iter().map(|v| v + 0.3).collect();
        let f = simulate_kse(p, &u0, 2.0, 50, 0.0).unwrap();
        let dx = f.dx();
        for j in 0..f.len() {
            let s = f.snapshot(j);
            let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
            let mean_integral = dx * s.iter().sum::<f64>();
            assert!(mean_integral.abs() <= 1e-10 * rms * p.l);
        }
    }

    #[test]
    fn deterministic() {
        let p = KseParams::default();
        let u0 = cosine_initial_condition(&p);
        let a = simulate_kse(p, &u0, 5.0, 100, 0.0).unwrap();
        let b = simulate_kse(p, &u0, 5.0, 100, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kinetic_energy_of_normalized_mode() {
        let p = KseParams::default();
        let grid = p.grid();
        let s = (2.0 / p.l).sqrt();
        let col: Vec<f64> = grid.iter().map(|x| s * (2.0 * PI * x / p.l).cos()).collect();
        let f = SpatioTemporalField::new(p.l, vec![0.0, 1.0], DMatrix::from_fn(p.nx, 2, |i, j| if j == 0 { col[i] } else { 0.0 })).unwrap();
        let e = kinetic_energy(&f);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert_eq!(e[1], 0.0);
    }

    #[test]
    fn blow_up_is_reported() {
        // anti-diffusion dominating with huge amplitude overflows quickly
        let p = KseParams { nu: 1e-6, d: 50.0, ..Default::default() };
        let u0: Vec<f64> = cosine_initial_condition(&p).iter().map(|v| v * 1e7).collect();
        let err = simulate_kse(p, &u0, 100.0, 1000, 0.0).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    fn final_state(dt: f64, t_end: f64) -> Vec<f64> {
        let p = KseParams { dt, ..Default::default() };
        let u0: Vec<f64> = p.grid().iter().map(|x| (2.0 * PI * x / p.l).cos() + 0.5 * (6.0 * PI * x / p.l).sin()).collect();
        simulate_kse_with(p, &u0, t_end, usize::MAX, f64::INFINITY, |_, _| {}).unwrap()
    }

    #[test]
    fn fourth_order_in_time() {
        let reference = final_state(0.003125, 20.0);
        let err = |dt: f64| {
            let u = final_state(dt, 20.0);
            u.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.05), err(0.025));
        let order = (e1 / e2).log2();
        assert!(order > 3.5 && order < 4.6, "observed order {order} ({e1:e}, {e2:e})");
    }

    #[test]
    fn long_runs_stay_bounded() {
        // roundoff in the non-real component used to grow at the linear rates
        // and destroy the solution after a few thousand time units
        let u = final_state(0.05, 5000.0);
        let m = u.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(m < 5.0, "max |u| = {m}");
    }

    #[test]
    fn field_rejects_bad_shapes() {
        assert!(SpatioTemporalField::new(1.0, vec![0.0], DMatrix::zeros(8, 2)).is_err());
        assert!(SpatioTemporalField::new(1.0, vec![1.0, 0.5], DMatrix::zeros(8, 2)).is_err());
    }
}
