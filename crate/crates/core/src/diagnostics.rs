//! Statistics and dynamical diagnostics: modal energy spectra, histogram
//! densities, autocorrelations, Lyapunov exponents, bifurcation extrema and
//! data-assimilation error metrics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::basis::CoefficientSeries;
use crate::error::{Error, Result};
use crate::galerkin::{fourier_galerkin, generic_initial_state, simulate_model_with, QuadraticModel, SimulationOptions};
use crate::kse::{cosine_initial_condition, simulate_kse_with, KseParams};
use crate::registry::{expect_params, Registry};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub window: (f64, f64),
    /// Time mean of `a_k^2` per mode.
    pub energies: Vec<f64>,
}

impl SpectrumReport {
    /// Relative mismatch `|E_cos - E_sin| / max(E_cos, E_sin)` per Fourier pair,
    /// for series in the `(cos 1..N, sin 1..N)` ordering.
    pub fn pair_mismatch(&self) -> Vec<f64> {
        let half = self.energies.len() / 2;
        (0..half)
            .map(|k| {
                let (c, s) = (self.energies[k], self.energies[half + k]);
                (c - s).abs() / c.max(s).max(f64::MIN_POSITIVE)
            })
            .collect()
    }
}

/// Running time mean of squared amplitudes.
#[derive(Debug, Clone)]
pub struct EnergyAccumulator {
    sum: Vec<f64>,
    count: usize,
    first: f64,
    last: f64,
}

impl EnergyAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: 0,
            first: f64::NAN,
            last: f64::NAN,
        }
    }

    pub fn push(&mut self, t: f64, a: &[f64]) {
        if self.count == 0 {
            self.first = t;
        }
        self.last = t;
        for (s, v) in self.sum.iter_mut().zip(a) {
            *s += v * v;
        }
        self.count += 1;
    }

    pub fn finish(&self) -> Result<SpectrumReport> {
        if self.count == 0 {
            return Err(Error::EmptyWindow);
        }
        Ok(SpectrumReport {
            window: (self.first, self.last),
            energies: self.sum.iter().map(|s| s / self.count as f64).collect(),
        })
    }
}

/// Time-averaged modal energies over samples with `t0 <= t <= t1`.
pub fn energy_spectrum(series: &CoefficientSeries, t0: f64, t1: f64) -> Result<SpectrumReport> {
    let mut acc = EnergyAccumulator::new(series.dim());
    for (j, &t) in series.times.iter().enumerate() {
        if t >= t0 && t <= t1 {
            acc.push(t, series.state(j));
        }
    }
    acc.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` equally spaced edges.
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn integral(&self) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .sum()
    }
}

/// Equal-width histogram density over `[min, max]`.
pub fn pdf_estimate(samples: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::ConstantInput);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let total = samples.len() as f64;
    let density = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, w)| c as f64 / (total * (w[1] - w[0])))
        .collect();
    Ok(Histogram { edges, density })
}

/// Normalized sample autocorrelation for lags `0..=max_lag`, via FFT.
pub fn acf(samples: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = samples.len();
    if max_lag >= n {
        return Err(Error::invalid(format!("max_lag {max_lag} must be below the series length {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = samples.iter().map(|x| Complex64::new(x - mean, 0.0)).collect();
    buf.resize(size, Complex64::default());
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for z in buf.iter_mut() {
        *z = Complex64::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    Ok((0..=max_lag).map(|l| buf[l].re / c0).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    /// Descending, natural-log units per time.
    pub exponents: Vec<f64>,
    pub window: f64,
    pub renorm_interval: f64,
}

#[derive(Debug, Clone)]
pub struct LyapunovOptions {
    pub k: usize,
    /// Averaging window length (time units).
    pub t_window: f64,
    pub dt: f64,
    pub renorm_stride: usize,
    /// Spin-up time before averaging starts.
    pub transient: f64,
}

/// Benettin QR method on `k` tangent vectors of the deterministic drift.
pub fn lyapunov_spectrum(model: &QuadraticModel, a0: &[f64], opts: &LyapunovOptions) -> Result<LyapunovReport> {
    let n = model.n();
    let k = opts.k;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    if a0.len() != n {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    if !(opts.dt > 0.0) || !(opts.t_window > 0.0) || opts.renorm_stride == 0 {
        return Err(Error::invalid("dt, t_window and renorm_stride must be positive"));
    }
    let f = model.compile();
    let mut a = a0.to_vec();
    let spin = (opts.transient / opts.dt).round() as u64;
    let mut scratch = crate::galerkin::Rk4Scratch::new(n);
    for step in 0..spin {
        f.rk4_step(&mut a, opts.dt, &mut scratch);
        if !a.iter().all(|v| v.is_finite() && v.abs() < 1e8) {
            return Err(Error::BlowUp { last_stable_time: step as f64 * opts.dt });
        }
    }
    // tangent vectors stored column-wise in one flat buffer (column c at c*n)
    let mut v = vec![0.0; n * k];
    for c in 0..k {
        v[c * n + c] = 1.0;
    }
    let steps = (opts.t_window / opts.dt).round() as u64;
    let h = opts.dt;
    let mut sums = vec![0.0; k];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut w1, mut w2, mut w3, mut w4) = (vec![0.0; n * k], vec![0.0; n * k], vec![0.0; n * k], vec![0.0; n * k]);
    let mut ta = vec![0.0; n];
    let mut tv = vec![0.0; n * k];
    let jac = |a: &[f64], v: &[f64], out: &mut [f64]| {
        for c in 0..k {
            f.jvp(a, &v[c * n..(c + 1) * n], &mut out[c * n..(c + 1) * n]);
        }
    };
    let mut elapsed_steps = 0u64;
    for step in 1..=steps {
        f.drift(&a, &mut k1);
        jac(&a, &v, &mut w1);
        for i in 0..n {
            ta[i] = a[i] + 0.5 * h * k1[i];
        }
        for i in 0..n * k {
            tv[i] = v[i] + 0.5 * h * w1[i];
        }
        f.drift(&ta, &mut k2);
        jac(&ta, &tv, &mut w2);
        for i in 0..n {
            ta[i] = a[i] + 0.5 * h * k2[i];
        }
        for i in 0..n * k {
            tv[i] = v[i] + 0.5 * h * w2[i];
        }
        f.drift(&ta, &mut k3);
        jac(&ta, &tv, &mut w3);
        for i in 0..n {
            ta[i] = a[i] + h * k3[i];
        }
        for i in 0..n * k {
            tv[i] = v[i] + h * w3[i];
        }
        f.drift(&ta, &mut k4);
        jac(&ta, &tv, &mut w4);
        for i in 0..n {
            a[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        for i in 0..n * k {
            v[i] += h / 6.0 * (w1[i] + 2.0 * w2[i] + 2.0 * w3[i] + w4[i]);
        }
        if !a.iter().all(|x| x.is_finite() && x.abs() < 1e8) {
            return Err(Error::BlowUp {
                last_stable_time: opts.transient + (step - 1) as f64 * h,
            });
        }
        if step % opts.renorm_stride as u64 == 0 || step == steps {
            // modified Gram-Schmidt; the norms are the R diagonal
            for c in 0..k {
                for p in 0..c {
                    let d: f64 = (0..n).map(|i| v[c * n + i] * v[p * n + i]).sum();
                    for i in 0..n {
                        v[c * n + i] -= d * v[p * n + i];
                    }
                }
                let norm = (0..n).map(|i| v[c * n + i].powi(2)).sum::<f64>().sqrt();
                sums[c] += norm.ln();
                for i in 0..n {
                    v[c * n + i] /= norm;
                }
            }
            elapsed_steps = step;
        }
    }
    let t = elapsed_steps as f64 * h;
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / t).collect();
    exponents.sort_by(|x, y| y.total_cmp(x));
    Ok(LyapunovReport {
        exponents,
        window: t,
        renorm_interval: opts.renorm_stride as f64 * h,
    })
}

/// Strict local minima and maxima by a three-point stencil.
pub fn local_extrema(series: &[f64]) -> Vec<f64> {
    series
        .windows(3)
        .filter(|w| (w[1] > w[0] && w[1] > w[2]) || (w[1] < w[0] && w[1] < w[2]))
        .map(|w| w[1])
        .collect()
}

/// Number of distinct values up to a relative tolerance.
pub fn count_distinct(values: &[f64], rel_tol: f64) -> usize {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut count = 0;
    let mut last = f64::NAN;
    for x in v {
        if !(x - last).abs().le(&(rel_tol * x.abs().max(last.abs()))) {
            count += 1;
            last = x;
        }
    }
    count
}

/// A system whose kinetic energy can be sampled at a given viscosity.
pub trait ExtremaSystem: Send + Sync {
    fn name(&self) -> &'static str;
    /// `E(t)` sampled every `stride` steps over `[burn_in, burn_in + window]`.
    fn energy_series(&self, params: &KseParams, burn_in: f64, window: f64, stride: usize) -> Result<Vec<f64>>;
}

/// The full pseudo-spectral KSE started from the cosine profile.
pub struct FullKse;

impl ExtremaSystem for FullKse {
    fn name(&self) -> &'static str {
        "kse"
    }
    fn energy_series(&self, params: &KseParams, burn_in: f64, window: f64, stride: usize) -> Result<Vec<f64>> {
        let dx = params.dx();
        let mut e = Vec::new();
        simulate_kse_with(*params, &cosine_initial_condition(params), burn_in + window, stride, burn_in, |_, u| {
            e.push(dx * u.iter().map(|v| v * v).sum::<f64>())
        })?;
        Ok(e)
    }
}

/// The `2N`-dimensional Fourier-Galerkin model from a generic start state.
pub struct FourierGalerkinSystem {
    pub pairs: usize,
}

impl ExtremaSystem for FourierGalerkinSystem {
    fn name(&self) -> &'static str {
        "fourier-galerkin"
    }
    fn energy_series(&self, params: &KseParams, burn_in: f64, window: f64, stride: usize) -> Result<Vec<f64>> {
        let model = fourier_galerkin(self.pairs, params)?;
        let a0 = generic_initial_state(2 * self.pairs);
        let opts = SimulationOptions {
            t_end: burn_in + window,
            dt: params.dt,
            seed: 0,
            save_stride: stride,
            t_start_save: burn_in,
        };
        let mut e = Vec::new();
        simulate_model_with(&model, &a0, &opts, |_, a| e.push(a.iter().map(|v| v * v).sum()))?;
        Ok(e)
    }
}

pub fn extrema_registry() -> Registry<dyn ExtremaSystem> {
    let mut reg: Registry<dyn ExtremaSystem> = Registry::new("bifurcation system");
    reg.register("kse", |p| {
        expect_params("kse", p, 0)?;
        Ok(Box::new(FullKse))
    });
    reg.register("fourier-galerkin", |p| {
        let pairs = match p {
            [] => 10,
            [x] if *x >= 1.0 && x.fract() == 0.0 => *x as usize,
            _ => return Err(Error::invalid("`fourier-galerkin` takes an optional positive integer pair count")),
        };
        Ok(Box::new(FourierGalerkinSystem { pairs }))
    });
    reg
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtremaSet {
    pub nu: f64,
    pub extrema: Vec<f64>,
}

/// Local extrema of `E(t)` after burn-in, one entry per swept parameter set.
pub fn bifurcation_extrema(
    system: &dyn ExtremaSystem,
    sweep: &[KseParams],
    burn_in: f64,
    window: f64,
    stride: usize,
) -> Result<Vec<ExtremaSet>> {
    if sweep.is_empty() {
        return Err(Error::invalid("empty parameter sweep"));
    }
    sweep
        .par_iter()
        .map(|p| {
            let e = system.energy_series(p, burn_in, window, stride)?;
            Ok(ExtremaSet {
                nu: p.nu,
                extrema: local_extrema(&e),
            })
        })
        .collect()
}

/// Per-mode `||truth - estimate||_2 / ||truth||_2` over aligned samples (rows are modes).
pub fn assimilation_errors(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<Vec<f64>> {
    if truth.shape() != estimate.shape() {
        return Err(Error::invalid(format!(
            "truth is {:?} but estimate is {:?}",
            truth.shape(),
            estimate.shape()
        )));
    }
    (0..truth.nrows())
        .map(|k| {
            let norm = truth.row(k).norm();
            if norm == 0.0 {
                return Err(Error::ZeroNormTruth { mode: k + 1 });
            }
            Ok((truth.row(k) - estimate.row(k)).norm() / norm)
        })
        .collect()
}
