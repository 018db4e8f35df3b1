//! Quadratic stochastic models `da = (L a + Q(a) + b) dt + sigma dW`: the
//! analytic Fourier-Galerkin system, data-driven POD-Galerkin systems,
//! magnitude-thresholded variants, and an RK4 / Euler-Maruyama integrator.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{Basis, BasisKind, CoefficientSeries};
use crate::error::{Error, Result};
use crate::kse::{uniform_grid, KseParams};
use crate::library::{FeatureLibrary, Term};
use crate::selection::{rank_descending, ModelStructure};

/// Quadrature points for POD-Galerkin inner products.
pub const POD_QUADRATURE_POINTS: usize = 512;
/// State norm above which a model trajectory counts as blown up.
const BLOW_UP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FourierGalerkin,
    PodGalerkin,
    Thresholded,
    Learned,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::FourierGalerkin => "fourier-galerkin",
            Provenance::PodGalerkin => "pod-galerkin",
            Provenance::Thresholded => "thresholded",
            Provenance::Learned => "learned",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Provenance::FourierGalerkin => 0,
            Provenance::PodGalerkin => 1,
            Provenance::Thresholded => 2,
            Provenance::Learned => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Provenance::FourierGalerkin),
            1 => Some(Provenance::PodGalerkin),
            2 => Some(Provenance::Thresholded),
            3 => Some(Provenance::Learned),
            _ => None,
        }
    }
}

/// Coefficient of the monomial `a_j a_k` (`j <= k`) in equation `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadTerm {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub linear: DMatrix<f64>,
    /// Sorted by `(i, j, k)`, no duplicates, `j <= k`.
    pub quadratic: Vec<QuadTerm>,
    pub constant: Vec<f64>,
    /// `n x d` noise amplitude.
    pub noise: DMatrix<f64>,
    pub provenance: Provenance,
}

impl QuadraticModel {
    pub fn zero(n: usize, provenance: Provenance) -> Self {
        Self {
            linear: DMatrix::zeros(n, n),
            quadratic: Vec::new(),
            constant: vec![0.0; n],
            noise: DMatrix::zeros(n, 0),
            provenance,
        }
    }

    pub fn n(&self) -> usize {
        self.linear.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.linear.ncols() != n || self.constant.len() != n || self.noise.nrows() != n {
            return Err(Error::invalid("model parts have inconsistent dimensions"));
        }
        for w in self.quadratic.windows(2) {
            if (w[0].i, w[0].j, w[0].k) >= (w[1].i, w[1].j, w[1].k) {
                return Err(Error::invalid("quadratic terms must be sorted and unique"));
            }
        }
        if self.quadratic.iter().any(|t| t.i >= n || t.k >= n || t.j > t.k) {
            return Err(Error::invalid("quadratic term index out of range"));
        }
        Ok(())
    }

    /// `nnz(linear) + nnz(quadratic) + nnz(constant)`.
    pub fn term_count(&self) -> usize {
        self.linear.iter().filter(|v| **v != 0.0).count()
            + self.quadratic.iter().filter(|t| t.coef != 0.0).count()
            + self.constant.iter().filter(|v| **v != 0.0).count()
    }

    /// Largest absolute drift coefficient.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.linear
            .iter()
            .chain(self.quadratic.iter().map(|t| &t.coef))
            .chain(&self.constant)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Drift coefficients as an `n x M` matrix over `lib` (constant excluded).
    pub fn to_theta(&self, lib: &FeatureLibrary) -> DMatrix<f64> {
        let n = self.n();
        let mut theta = DMatrix::zeros(n, lib.len());
        for i in 0..n {
            for j in 0..n {
                theta[(i, j)] = self.linear[(i, j)];
            }
        }
        for t in &self.quadratic {
            theta[(t.i, lib.index_of(Term::Quadratic(t.j, t.k)))] = t.coef;
        }
        theta
    }

    /// Model from an `n x M` coefficient matrix over `lib`; zero entries are dropped.
    pub fn from_theta(
        lib: &FeatureLibrary,
        theta: &DMatrix<f64>,
        constant: Vec<f64>,
        noise: DMatrix<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = lib.n();
        if theta.nrows() != n || theta.ncols() != lib.len() {
            return Err(Error::invalid("coefficient matrix does not match the library"));
        }
        let mut model = QuadraticModel::zero(n, provenance);
        for i in 0..n {
            for (m, term) in lib.terms().iter().enumerate() {
                let c = theta[(i, m)];
                if c == 0.0 {
                    continue;
                }
                match *term {
                    Term::Linear(j) => model.linear[(i, j)] = c,
                    Term::Quadratic(j, k) => model.quadratic.push(QuadTerm { i, j, k, coef: c }),
                }
            }
        }
        model.constant = constant;
        model.noise = noise;
        model.validate()?;
        Ok(model)
    }

    /// Boolean mask of nonzero drift terms over `lib`.
    pub fn structure(&self, lib: &FeatureLibrary) -> ModelStructure {
        let theta = self.to_theta(lib);
        let mask = (0..self.n() * lib.len())
            .map(|k| theta[(k / lib.len(), k % lib.len())] != 0.0)
            .collect();
        ModelStructure::new(self.n(), lib.len(), mask, format!("nonzero terms of {} model", self.provenance.name()))
    }

    pub fn compile(&self) -> CompiledModel {
        CompiledModel::new(self)
    }

    pub fn drift(&self, a: &[f64], out: &mut [f64]) {
        self.compile().drift(a, out)
    }

    /// Quadratic part `Q(a)` only.
    pub fn quadratic_part(&self, a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.quadratic {
            out[t.i] += t.coef * a[t.j] * a[t.k];
        }
    }

    /// `sum_i a_i Q_i(a)`, which vanishes for energy-conserving nonlinearities.
    pub fn quadratic_energy_residual(&self, a: &[f64]) -> f64 {
        let mut q = vec![0.0; self.n()];
        self.quadratic_part(a, &mut q);
        a.iter().zip(&q).map(|(x, y)| x * y).sum()
    }

    pub fn has_noise(&self) -> bool {
        self.noise.iter().any(|v| *v != 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    j: u32,
    /// `u32::MAX` for a linear term.
    k: u32,
    coef: f64,
}

/// Row-wise sparse drift representation used in inner loops.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    rows: Vec<Vec<Entry>>,
    constant: Vec<f64>,
}

impl CompiledModel {
    pub fn new(model: &QuadraticModel) -> Self {
        let n = model.n();
        let mut rows: Vec<Vec<Entry>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                let c = model.linear[(i, j)];
                if c != 0.0 {
                    rows[i].push(Entry { j: j as u32, k: u32::MAX, coef: c });
                }
            }
        }
        for t in &model.quadratic {
            if t.coef != 0.0 {
                rows[t.i].push(Entry {
                    j: t.j as u32,
                    k: t.k as u32,
                    coef: t.coef,
                });
            }
        }
        Self {
            rows,
            constant: model.constant.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn drift(&self, a: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut s = self.constant[i];
            for e in row {
                let x = a[e.j as usize];
                s += if e.k == u32::MAX { e.coef * x } else { e.coef * x * a[e.k as usize] };
            }
            out[i] = s;
        }
    }

    /// Jacobian-vector product `J(a) v`.
    #[inline]
    pub fn jvp(&self, a: &[f64], v: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut s = 0.0;
            for e in row {
                let j = e.j as usize;
                s += if e.k == u32::MAX {
                    e.coef * v[j]
                } else {
                    let k = e.k as usize;
                    e.coef * (a[j] * v[k] + a[k] * v[j])
                };
            }
            out[i] = s;
        }
    }

    /// One classical RK4 step of the drift.
    pub fn rk4_step(&self, a: &mut [f64], dt: f64, s: &mut Rk4Scratch) {
        let n = a.len();
        self.drift(a, &mut s.k1);
        for i in 0..n {
            s.tmp[i] = a[i] + 0.5 * dt * s.k1[i];
        }
        self.drift(&s.tmp, &mut s.k2);
        for i in 0..n {
            s.tmp[i] = a[i] + 0.5 * dt * s.k2[i];
        }
        self.drift(&s.tmp, &mut s.k3);
        for i in 0..n {
            s.tmp[i] = a[i] + dt * s.k3[i];
        }
        self.drift(&s.tmp, &mut s.k4);
        for i in 0..n {
            a[i] += dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
        }
    }
}

pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// `<B(e^a_p, e^b_q), e^c_r>` for the normalized Fourier functions
/// (`0` cosine, `1` sine) with `B(u, v) = -gamma u v_x`.
fn fourier_triad(params: &KseParams, a: u8, p: usize, b: u8, q: usize, c: u8, r: usize) -> f64 {
    // d/dx cos = -k sin, d/dx sin = k cos
    let (sign, bd) = if b == 0 { (-1.0, 1u8) } else { (1.0, 0u8) };
    let s = triple_integral_pattern(a, p as i64, bd, q as i64, c, r as i64);
    if s == 0 {
        return 0.0;
    }
    let scale = 2.0f64.sqrt() * PI * params.gamma / params.l.powf(1.5);
    -scale * sign * q as f64 * s as f64
}

/// `(4 / L) * integral` of a product of three trigonometric functions of
/// positive integer frequencies over one period.
fn triple_integral_pattern(a: u8, p: i64, b: u8, q: i64, c: u8, r: i64) -> i64 {
    let d = |x: bool| x as i64;
    match a + b + c {
        0 => d(r == p + q) + d(p == q + r) + d(q == p + r),
        2 => {
            // the cosine factor x, sines y and z
            let (x, y, z) = if a == 0 {
                (p, q, r)
            } else if b == 0 {
                (q, p, r)
            } else {
                (r, p, q)
            };
            d(y == x + z) + d(z == x + y) - d(x == y + z)
        }
        _ => 0,
    }
}

/// The `2N`-dimensional Fourier-Galerkin system in the `(cos 1..N, sin 1..N)` ordering.
pub fn fourier_galerkin(n_pairs: usize, params: &KseParams) -> Result<QuadraticModel> {
    if n_pairs == 0 {
        return Err(Error::invalid("Fourier-Galerkin needs N >= 1"));
    }
    params.validate()?;
    let dim = 2 * n_pairs;
    let mode = |idx: usize| -> (u8, usize) { ((idx / n_pairs) as u8, idx % n_pairs + 1) };
    let mut model = QuadraticModel::zero(dim, Provenance::FourierGalerkin);
    for idx in 0..dim {
        model.linear[(idx, idx)] = params.eigenvalue(mode(idx).1);
    }
    for i in 0..dim {
        let (c, r) = mode(i);
        for j in 0..dim {
            let (a, p) = mode(j);
            for k in j..dim {
                let (b, q) = mode(k);
                let mut coef = fourier_triad(params, a, p, b, q, c, r);
                if k != j {
                    coef += fourier_triad(params, b, q, a, p, c, r);
                }
                if coef != 0.0 {
                    model.quadratic.push(QuadTerm { i, j, k, coef });
                }
            }
        }
    }
    Ok(model)
}

/// Galerkin projection of the KSE onto a POD basis.
pub fn pod_galerkin(basis: &Basis, params: &KseParams) -> Result<QuadraticModel> {
    if basis.kind != BasisKind::Pod {
        return Err(Error::invalid("pod_galerkin needs a POD basis"));
    }
    params.validate()?;
    let n = basis.size();
    let p = basis.pairs;
    // the linear operator is diagonal in the trigonometric system
    let symbol: Vec<f64> = (0..2 * p).map(|c| params.eigenvalue(c % p + 1)).collect();
    let c = &basis.coeffs;
    let linear = DMatrix::from_fn(n, n, |i, j| (0..2 * p).map(|m| c[(i, m)] * symbol[m] * c[(j, m)]).sum());

    let grid = uniform_grid(POD_QUADRATURE_POINTS, basis.l);
    let phi = basis.evaluate(&grid);
    let dphi = basis.evaluate_derivative(&grid);
    let w = -params.gamma * basis.l / POD_QUADRATURE_POINTS as f64;
    // products[(j * n + k), x] = phi_j(x) * dphi_k(x)
    let products = DMatrix::from_fn(n * n, POD_QUADRATURE_POINTS, |row, x| phi[(row / n, x)] * dphi[(row % n, x)]);
    // bmat[(j * n + k), i] = <B(phi_j, phi_k), phi_i>
    let bmat = products * phi.transpose() * w;

    let mut model = QuadraticModel::zero(n, Provenance::PodGalerkin);
    model.linear = linear;
    for i in 0..n {
        for j in 0..n {
            for k in j..n {
                let mut coef = bmat[(j * n + k, i)];
                if k != j {
                    coef += bmat[(k * n + j, i)];
                }
                model.quadratic.push(QuadTerm { i, j, k, coef });
            }
        }
    }
    Ok(model)
}

/// Terms kept by magnitude thresholding at `sparsity_fraction` of the full
/// `n x M` library: the `ceil((1 - f) n M)` largest `|coef|` (ties by
/// library order), capped at the number of nonzero terms.
pub fn threshold_structure(model: &QuadraticModel, lib: &FeatureLibrary, sparsity_fraction: f64) -> Result<ModelStructure> {
    if !(0.0..1.0).contains(&sparsity_fraction) {
        return Err(Error::invalid(format!("sparsity fraction must lie in [0, 1), got {sparsity_fraction}")));
    }
    let theta = model.to_theta(lib);
    let (n, m) = (model.n(), lib.len());
    let flat: Vec<f64> = (0..n * m).map(|k| theta[(k / m, k % m)].abs()).collect();
    let nnz = flat.iter().filter(|v| **v != 0.0).count();
    if nnz == 0 {
        return Err(Error::invalid("model has no drift terms"));
    }
    let keep = crate::selection::kept_count(sparsity_fraction, n * m).min(nnz);
    let mut mask = vec![false; n * m];
    for idx in rank_descending(&flat).into_iter().take(keep) {
        mask[idx] = true;
    }
    let s = ModelStructure::new(n, m, mask, format!("magnitude threshold, sparsity {sparsity_fraction}"));
    for i in 0..n {
        if s.row_count(i) == 0 {
            log::warn!("equation {} lost all drift terms and is pure noise", i + 1);
        }
    }
    Ok(s)
}

/// Magnitude-thresholded model with surviving coefficients refit by MLE on `training`.
pub fn threshold_model(
    model: &QuadraticModel,
    lib: &FeatureLibrary,
    sparsity_fraction: f64,
    training: &CoefficientSeries,
    opts: &crate::mle::FitOptions,
) -> Result<QuadraticModel> {
    let s = threshold_structure(model, lib, sparsity_fraction)?;
    let mut fitted = crate::mle::fit_mle(&s, lib, training, opts)?;
    fitted.provenance = Provenance::Thresholded;
    Ok(fitted)
}

/// Deterministic start state with every component nonzero.
///
/// Data started on a single cosine stays in the even invariant subspace
/// forever (sine amplitudes are exactly zero), which makes half of the
/// library identically zero.
pub fn generic_initial_state(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.5 * ((1.7 * k as f64).sin() + 0.3)).collect()
}

/// Options for trajectory generation.
#[derive(Debug, Clone, Copy)]
pub struct SimulationOptions {
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    pub save_stride: usize,
    /// Samples earlier than this time are not saved.
    pub t_start_save: f64,
}

/// Integrate with RK4 drift steps plus additive Euler-Maruyama noise and
/// pass every saved state to `observer(t, a)`. Returns the final state.
pub fn simulate_model_with<F>(model: &QuadraticModel, a0: &[f64], opts: &SimulationOptions, mut observer: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]),
{
    model.validate()?;
    let n = model.n();
    if a0.len() != n {
        return Err(Error::invalid(format!("initial state has {} entries, model has {n}", a0.len())));
    }
    if !(opts.dt > 0.0) || !(opts.t_end >= 0.0) {
        return Err(Error::invalid("dt must be positive and t_end non-negative"));
    }
    if opts.save_stride == 0 {
        return Err(Error::invalid("save_stride must be positive"));
    }
    let compiled = model.compile();
    let noisy = model.has_noise();
    let d = model.noise.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut xi = vec![0.0; d];
    let sqdt = opts.dt.sqrt();
    let mut scratch = Rk4Scratch::new(n);
    let mut a = a0.to_vec();
    let n_steps = (opts.t_end / opts.dt).round() as u64;
    let start_step = (opts.t_start_save / opts.dt - 1e-9).ceil().max(0.0) as u64;
    for step in 0..=n_steps {
        if step >= start_step && (step - start_step) % opts.save_stride as u64 == 0 {
            observer(step as f64 * opts.dt, &a);
        }
        if step == n_steps {
            break;
        }
        compiled.rk4_step(&mut a, opts.dt, &mut scratch);
        if noisy {
            for x in xi.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            for i in 0..n {
                let s: f64 = (0..d).map(|c| model.noise[(i, c)] * xi[c]).sum();
                a[i] += s * sqdt;
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= BLOW_UP) {
            return Err(Error::BlowUp {
                last_stable_time: step as f64 * opts.dt,
            });
        }
    }
    Ok(a)
}

pub fn simulate_model(model: &QuadraticModel, a0: &[f64], opts: &SimulationOptions, basis_id: &str) -> Result<CoefficientSeries> {
    let n = model.n();
    let mut times = Vec::new();
    let mut data = Vec::new();
    simulate_model_with(model, a0, opts, |t, a| {
        times.push(t);
        data.extend_from_slice(a);
    })?;
    let values = DMatrix::from_vec(n, times.len(), data);
    CoefficientSeries::new(times, values, basis_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::fourier_basis;
    use crate::library::build_library;

    fn params() -> KseParams {
        KseParams::default()
    }

    /// `-gamma * integral(f g_x h)` on a fine grid.
    fn quadrature(f: impl Fn(f64) -> f64, gx: impl Fn(f64) -> f64, h: impl Fn(f64) -> f64, l: f64) -> f64 {
        let nq = 1024;
        let dx = l / nq as f64;
        -(0..nq).map(|i| i as f64 * dx).map(|x| f(x) * gx(x) * h(x)).sum::<f64>() * dx
    }

    #[test]
    fn cos1_sin1_cos2_coefficient() {
        let p = params();
        let l = p.l;
        let s = (2.0 / l).sqrt();
        let w = |n: f64| 2.0 * PI * n / l;
        let q = quadrature(
            |x| s * (w(1.0) * x).cos(),
            |x| s * w(1.0) * (w(1.0) * x).cos(),
            |x| s * (w(2.0) * x).cos(),
            l,
        );
        let closed = fourier_triad(&p, 0, 1, 1, 1, 0, 2);
        assert!((q - closed).abs() < 1e-14);
        assert!((closed + 8.921e-3).abs() < 1e-6);
        // cos-cos products never feed a cosine equation
        for (pp, qq, rr) in [(1, 1, 2), (1, 2, 3), (2, 3, 1), (3, 3, 6)] {
            assert_eq!(fourier_triad(&p, 0, pp, 0, qq, 0, rr), 0.0);
        }
    }

    #[test]
    fn all_triads_match_quadrature() {
        let p = params();
        let l = p.l;
        let s = (2.0 / l).sqrt();
        let w = |n: usize| 2.0 * PI * n as f64 / l;
        let f = |a: u8, n: usize| move |x: f64| if a == 0 { s * (w(n) * x).cos() } else { s * (w(n) * x).sin() };
        let fx = |a: u8, n: usize| move |x: f64| if a == 0 { -s * w(n) * (w(n) * x).sin() } else { s * w(n) * (w(n) * x).cos() };
        for a in 0..2u8 {
            for b in 0..2u8 {
                for c in 0..2u8 {
                    for pp in 1..5 {
                        for qq in 1..5 {
                            for rr in 1..9 {
                                let want = quadrature(f(a, pp), fx(b, qq), f(c, rr), l);
                                let got = fourier_triad(&p, a, pp, b, qq, c, rr);
                                assert!((want - got).abs() < 1e-13, "{a}{pp} {b}{qq} {c}{rr}: {want} vs {got}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn twenty_dim_model_has_295_terms() {
        let m = fourier_galerkin(10, &params()).unwrap();
        assert_eq!(m.term_count(), 295);
        let off_diag = (0..20).flat_map(|i| (0..20).map(move |j| (i, j))).filter(|&(i, j)| i != j);
        assert!(off_diag.into_iter().all(|(i, j)| m.linear[(i, j)] == 0.0));
        assert_eq!(m.linear.iter().filter(|v| **v != 0.0).count(), 20);
    }

    #[test]
    fn pod_path_on_fourier_modes_reproduces_closed_form() {
        let p = params();
        let fb = fourier_basis(10, &p).unwrap().as_pod();
        let pod = pod_galerkin(&fb, &p).unwrap();
        let exact = fourier_galerkin(10, &p).unwrap();
        let lib = build_library(20).unwrap();
        let d = (pod.to_theta(&lib) - exact.to_theta(&lib)).abs().max();
        assert!(d < 1e-8, "max difference {d}");
    }

    #[test]
    fn energy_conserving_nonlinearity() {
        use rand::Rng;
        let p = params();
        let m = fourier_galerkin(10, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cmax = m.quadratic.iter().map(|t| t.coef.abs()).fold(0.0, f64::max);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(m.quadratic_energy_residual(&a).abs() <= 1e-9 * norm.powi(3) * cmax);
        }
    }

    #[test]
    fn thresholding_counts() {
        let p = params();
        let lib = build_library(20).unwrap();
        let m = fourier_galerkin(10, &p).unwrap();
        let s0 = threshold_structure(&m, &lib, 0.0).unwrap();
        assert_eq!(s0, m.structure(&lib).with_record(s0.record.clone()));
        let s90 = threshold_structure(&m, &lib, 0.9).unwrap();
        assert_eq!(s90.count(), 295);
        let s95 = threshold_structure(&m, &lib, 0.95).unwrap();
        assert_eq!(s95.count(), 230);
        assert!(s95.is_subset_of(&s0));

        let lib1 = build_library(1).unwrap();
        let mut two = QuadraticModel::zero(1, Provenance::Learned);
        two.linear[(0, 0)] = -1.0;
        two.quadratic.push(QuadTerm { i: 0, j: 0, k: 0, coef: 0.5 });
        let s = threshold_structure(&two, &lib1, 0.999).unwrap();
        assert_eq!(s.count(), 1);
        assert!(s.get(0, 0));
    }

    #[test]
    fn scalar_decay_is_fourth_order() {
        let mut m = QuadraticModel::zero(1, Provenance::Learned);
        m.linear[(0, 0)] = -1.0;
        let err = |dt: f64| {
            let opts = SimulationOptions { t_end: 1.0, dt, seed: 0, save_stride: 1, t_start_save: 0.0 };
            let a = simulate_model_with(&m, &[1.0], &opts, |_, _| {}).unwrap();
            (a[0] - (-1.0f64).exp()).abs()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn zero_model_is_constant_and_noise_is_seeded() {
        let m = QuadraticModel::zero(3, Provenance::Learned);
        let opts = SimulationOptions { t_end: 1.0, dt: 0.1, seed: 7, save_stride: 2, t_start_save: 0.0 };
        let s = simulate_model(&m, &[1.0, 2.0, 3.0], &opts, "x").unwrap();
        assert_eq!(s.len(), 6);
        assert!((0..s.len()).all(|j| s.state(j) == [1.0, 2.0, 3.0]));

        let mut noisy = m.clone();
        noisy.noise = DMatrix::identity(3, 3) * 0.1;
        let a = simulate_model(&noisy, &[0.0; 3], &opts, "x").unwrap();
        let b = simulate_model(&noisy, &[0.0; 3], &opts, "x").unwrap();
        assert_eq!(a, b);
        let c = simulate_model(&noisy, &[0.0; 3], &SimulationOptions { seed: 8, ..opts }, "x").unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn blow_up_is_reported() {
        let mut m = QuadraticModel::zero(1, Provenance::Learned);
        m.quadratic.push(QuadTerm { i: 0, j: 0, k: 0, coef: 1.0 });
        let opts = SimulationOptions { t_end: 10.0, dt: 0.01, seed: 0, save_stride: 1, t_start_save: 0.0 };
        let err = simulate_model(&m, &[1.0], &opts, "x").unwrap_err();
        assert!(matches!(err, Error::BlowUp { last_stable_time } if last_stable_time < 1.1));
    }
}
