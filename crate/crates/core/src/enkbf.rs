//! Ensemble Kalman-Bucy filter recovering unobserved modes `z` of a
//! quadratic model from a continuously observed block `y`.
//!
//! The gain is built from ensemble cross-covariances. Two formulas are
//! registered: `kalman_bucy` pairs z-deviations with deviations of the
//! observed-block drift `g1` and weights by the observation noise
//! `sigma11 sigma11^T`, which reduces to the exact Kalman-Bucy gain for
//! linear-Gaussian systems. `literal` pairs z-deviations with deviations of
//! `g2` and weights by `sigma22 sigma22^T`; it only type-checks when the
//! observed and unobserved blocks have equal size.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::galerkin::{CompiledModel, QuadraticModel};
use crate::mle::noise_amplitude;
use crate::registry::{expect_params, Registry};

const DIVERGENCE: f64 = 1e8;

/// Observed amplitudes and their time derivative on a uniform grid.
#[derive(Debug, Clone)]
pub struct ObservationStream {
    pub times: Vec<f64>,
    /// `r x N_t`.
    pub y: DMatrix<f64>,
    /// `r x N_t`, central differences inside, one-sided at the ends.
    pub y_dot: DMatrix<f64>,
}

impl ObservationStream {
    pub fn new(times: Vec<f64>, y: DMatrix<f64>) -> Result<Self> {
        let len = times.len();
        if y.ncols() != len || len < 2 || y.nrows() == 0 {
            return Err(Error::invalid("observations need r >= 1 rows and at least two aligned samples"));
        }
        let dt = (times[len - 1] - times[0]) / (len - 1) as f64;
        if !(dt > 0.0) {
            return Err(Error::invalid("observation times must increase"));
        }
        for w in times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt {
                return Err(Error::invalid("observation times must be uniformly spaced"));
            }
        }
        let y_dot = DMatrix::from_fn(y.nrows(), len, |i, j| {
            if j == 0 {
                (y[(i, 1)] - y[(i, 0)]) / dt
            } else if j == len - 1 {
                (y[(i, j)] - y[(i, j - 1)]) / dt
            } else {
                (y[(i, j + 1)] - y[(i, j - 1)]) / (2.0 * dt)
            }
        });
        Ok(Self { times, y, y_dot })
    }

    pub fn r(&self) -> usize {
        self.y.nrows()
    }

    pub fn dt(&self) -> f64 {
        let len = self.times.len();
        (self.times[len - 1] - self.times[0]) / (len - 1) as f64
    }
}

/// A model partitioned into observed (first `r`) and unobserved components.
#[derive(Debug, Clone)]
pub struct SplitModel {
    drift: CompiledModel,
    pub r: usize,
    pub n: usize,
    /// `r x d1` with `sigma11 sigma11^T` the observed block of `sigma sigma^T`.
    pub sigma11: DMatrix<f64>,
    /// `(n - r) x d2`, the unobserved block.
    pub sigma22: DMatrix<f64>,
}

impl SplitModel {
    /// `(g1, g2)` at `(y, z)`.
    pub fn eval(&self, y: &[f64], z: &[f64], state: &mut [f64], out: &mut [f64]) {
        state[..self.r].copy_from_slice(y);
        state[self.r..].copy_from_slice(z);
        self.drift.drift(state, out);
    }
}

/// Partition `model` at `r`; the noise cross-blocks are dropped.
pub fn split_model(model: &QuadraticModel, r: usize) -> Result<SplitModel> {
    let n = model.n();
    if r == 0 || r >= n {
        return Err(Error::invalid(format!("need 1 <= r < n, got r = {r}, n = {n}")));
    }
    let cov = &model.noise * model.noise.transpose();
    let c11 = cov.view((0, 0), (r, r)).into_owned();
    let c22 = cov.view((r, r), (n - r, n - r)).into_owned();
    Ok(SplitModel {
        drift: model.compile(),
        r,
        n,
        sigma11: noise_amplitude(&c11),
        sigma22: noise_amplitude(&c22),
    })
}

/// Floor added to the gain metric: `eps = max(absolute, relative * max diag)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub absolute: f64,
    pub relative: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            absolute: 1e-12,
            relative: 1e-6,
        }
    }
}

impl Regularization {
    /// `sigma sigma^T + eps I`.
    pub fn metric(&self, sigma: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
        let mut c = if sigma.ncols() == 0 {
            DMatrix::zeros(dim, dim)
        } else {
            sigma * sigma.transpose()
        };
        let maxd = (0..dim).map(|i| c[(i, i)]).fold(0.0, f64::max);
        let eps = self.absolute.max(self.relative * maxd);
        for i in 0..dim {
            c[(i, i)] += eps;
        }
        c
    }
}

/// Ensemble snapshot handed to a gain formula.
pub struct GainInput<'a> {
    /// `p` members of dimension `n - r`.
    pub z: &'a [Vec<f64>],
    /// Observed-block drift of each member.
    pub g1: &'a [Vec<f64>],
    /// Unobserved-block drift of each member.
    pub g2: &'a [Vec<f64>],
    pub sigma11: &'a DMatrix<f64>,
    pub sigma22: &'a DMatrix<f64>,
    pub reg: Regularization,
}

pub trait GainFormula: Send + Sync {
    fn name(&self) -> &'static str;
    /// `(n - r) x r` gain.
    fn gain(&self, input: &GainInput) -> Result<DMatrix<f64>>;
}

/// `(1/(p-1)) sum (z - zbar)(w - wbar)^T`.
fn cross_covariance(z: &[Vec<f64>], w: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = z.len();
    if p < 2 {
        return Err(Error::InvalidEnsemble(format!("need at least 2 members, got {p}")));
    }
    let (nz, nw) = (z[0].len(), w[0].len());
    let zbar: Vec<f64> = (0..nz).map(|k| z.iter().map(|m| m[k]).sum::<f64>() / p as f64).collect();
    let wbar: Vec<f64> = (0..nw).map(|k| w.iter().map(|m| m[k]).sum::<f64>() / p as f64).collect();
    let mut c = DMatrix::zeros(nz, nw);
    for (zm, wm) in z.iter().zip(w) {
        for a in 0..nz {
            let dz = zm[a] - zbar[a];
            for b in 0..nw {
                c[(a, b)] += dz * (wm[b] - wbar[b]);
            }
        }
    }
    Ok(c / (p - 1) as f64)
}

/// `x C^{-1}` for symmetric positive definite `C`.
fn right_solve(x: DMatrix<f64>, c: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ch = c.cholesky()?;
    let sol = ch.solve(&x.transpose()).transpose();
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

pub struct KalmanBucyGain;

impl GainFormula for KalmanBucyGain {
    fn name(&self) -> &'static str {
        "kalman_bucy"
    }
    fn gain(&self, input: &GainInput) -> Result<DMatrix<f64>> {
        let x = cross_covariance(input.z, input.g1)?;
        let c = input.reg.metric(input.sigma11, x.ncols());
        right_solve(x, c).ok_or(Error::Regularization { time: f64::NAN })
    }
}

pub struct LiteralGain;

impl GainFormula for LiteralGain {
    fn name(&self) -> &'static str {
        "literal"
    }
    fn gain(&self, input: &GainInput) -> Result<DMatrix<f64>> {
        let x = cross_covariance(input.z, input.g2)?;
        if let Some(g1) = input.g1.first() {
            if g1.len() != x.nrows() {
                return Err(Error::invalid(format!(
                    "the literal gain needs as many observed as unobserved components ({} vs {})",
                    g1.len(),
                    x.nrows()
                )));
            }
        }
        let c = input.reg.metric(input.sigma22, x.ncols());
        right_solve(x, c).ok_or(Error::Regularization { time: f64::NAN })
    }
}

pub fn gain_registry() -> Registry<dyn GainFormula> {
    let mut reg: Registry<dyn GainFormula> = Registry::new("gain formula");
    reg.register("kalman_bucy", |p| {
        expect_params("kalman_bucy", p, 0)?;
        Ok(Box::new(KalmanBucyGain))
    });
    reg.register("literal", |p| {
        expect_params("literal", p, 0)?;
        Ok(Box::new(LiteralGain))
    });
    reg
}

#[derive(Debug, Clone)]
pub enum InitialEnsemble {
    Zero,
    /// Every member starts from this vector.
    Given(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EnkbfOptions {
    pub members: usize,
    pub seed: u64,
    pub initial: InitialEnsemble,
    pub gain: String,
    pub reg: Regularization,
}

impl Default for EnkbfOptions {
    fn default() -> Self {
        Self {
            members: 100,
            seed: 0,
            initial: InitialEnsemble::Zero,
            gain: "kalman_bucy".into(),
            reg: Regularization::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnkbfResult {
    pub times: Vec<f64>,
    /// `(n - r) x N_t` posterior mean.
    pub mean: DMatrix<f64>,
    /// `(n - r) x N_t` per-component ensemble standard deviation.
    pub spread: DMatrix<f64>,
}

struct Member {
    z: Vec<f64>,
    g: Vec<f64>,
    state: Vec<f64>,
    rng: ChaCha8Rng,
    xi1: Vec<f64>,
    xi2: Vec<f64>,
}

/// Run the filter along `obs`; one Euler-Maruyama step per observation interval.
pub fn enkbf_run(model: &QuadraticModel, obs: &ObservationStream, opts: &EnkbfOptions) -> Result<EnkbfResult> {
    let split = split_model(model, obs.r())?;
    run_split(&split, obs, opts)
}

pub fn run_split(split: &SplitModel, obs: &ObservationStream, opts: &EnkbfOptions) -> Result<EnkbfResult> {
    let (n, r, p) = (split.n, split.r, opts.members);
    if obs.r() != r {
        return Err(Error::invalid("observation and model block sizes differ"));
    }
    if p < 2 {
        return Err(Error::InvalidEnsemble(format!("need at least 2 members, got {p}")));
    }
    let nz = n - r;
    let z0 = match &opts.initial {
        InitialEnsemble::Zero => vec![0.0; nz],
        InitialEnsemble::Given(v) if v.len() == nz => v.clone(),
        InitialEnsemble::Given(v) => {
            return Err(Error::invalid(format!("initial ensemble state has {} entries, need {nz}", v.len())))
        }
    };
    let formula = gain_registry().create(&opts.gain, &[])?;
    let (d1, d2) = (split.sigma11.ncols(), split.sigma22.ncols());
    let mut members: Vec<Member> = (0..p)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            Member {
                z: z0.clone(),
                g: vec![0.0; n],
                state: vec![0.0; n],
                rng,
                xi1: vec![0.0; d1],
                xi2: vec![0.0; d2],
            }
        })
        .collect();
    let len = obs.times.len();
    let dt = obs.dt();
    let sq = dt.sqrt();
    let mut mean = DMatrix::zeros(nz, len);
    let mut spread = DMatrix::zeros(nz, len);
    let mut y = vec![0.0; r];
    let mut ydot = vec![0.0; r];
    for j in 0..len {
        for k in 0..nz {
            let m = members.iter().map(|mb| mb.z[k]).sum::<f64>() / p as f64;
            let v = members.iter().map(|mb| (mb.z[k] - m).powi(2)).sum::<f64>() / (p - 1) as f64;
            mean[(k, j)] = m;
            spread[(k, j)] = v.sqrt();
        }
        if j == len - 1 {
            break;
        }
        let t = obs.times[j];
        for i in 0..r {
            y[i] = obs.y[(i, j)];
            ydot[i] = obs.y_dot[(i, j)];
        }
        members.par_iter_mut().with_min_len(16).for_each(|mb| {
            let Member { z, g, state, .. } = mb;
            split.eval(&y, z, state, g);
        });
        let zs: Vec<Vec<f64>> = members.iter().map(|mb| mb.z.clone()).collect();
        let g1: Vec<Vec<f64>> = members.iter().map(|mb| mb.g[..r].to_vec()).collect();
        let g2: Vec<Vec<f64>> = members.iter().map(|mb| mb.g[r..].to_vec()).collect();
        let gain = formula
            .gain(&GainInput {
                z: &zs,
                g1: &g1,
                g2: &g2,
                sigma11: &split.sigma11,
                sigma22: &split.sigma22,
                reg: opts.reg,
            })
            .map_err(|e| match e {
                Error::Regularization { .. } => Error::Regularization { time: t },
                other => other,
            })?;
        if gain.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regularization { time: t });
        }
        let diverged = members
            .par_iter_mut()
            .with_min_len(16)
            .map(|mb| {
                for x in mb.xi1.iter_mut() {
                    *x = StandardNormal.sample(&mut mb.rng);
                }
                for x in mb.xi2.iter_mut() {
                    *x = StandardNormal.sample(&mut mb.rng);
                }
                // innovation rate plus observation noise: g1 - ydot + sigma11 xi1 / sqrt(dt)
                let innov: Vec<f64> = (0..r)
                    .map(|i| {
                        let noise: f64 = (0..d1).map(|c| split.sigma11[(i, c)] * mb.xi1[c]).sum();
                        (mb.g[i] - ydot[i]) * dt + noise * sq
                    })
                    .collect();
                for k in 0..nz {
                    let noise: f64 = (0..d2).map(|c| split.sigma22[(k, c)] * mb.xi2[c]).sum();
                    let corr: f64 = (0..r).map(|i| gain[(k, i)] * innov[i]).sum();
                    mb.z[k] += mb.g[r + k] * dt + noise * sq - corr;
                }
                let norm = mb.z.iter().map(|v| v * v).sum::<f64>().sqrt();
                !(norm <= DIVERGENCE)
            })
            .reduce(|| false, |a, b| a || b);
        if diverged {
            return Err(Error::Divergence { time: obs.times[j + 1] });
        }
    }
    Ok(EnkbfResult {
        times: obs.times.clone(),
        mean,
        spread,
    })
}
