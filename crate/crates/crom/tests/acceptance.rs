//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test -p crom --test acceptance -- --nocapture` to see them.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use crom::experiments::{
    da_partial, fourier_recovery, free_run_stats, pod_training, DaComparison, DaOutcome, FourierRecovery, PodTraining, Scale,
    DA_OBSERVED,
};
use crom_core::basis::PodAccumulator;
use crom_core::causal::{causation_entropy, causation_entropy_matrix, RegressionFactor};
use crom_core::diagnostics::{lyapunov_spectrum, EnergyAccumulator, LyapunovOptions};
use crom_core::enkbf::{enkbf_run, EnkbfOptions, ObservationStream};
use crom_core::galerkin::{fourier_galerkin, generic_initial_state, Provenance, QuadraticModel};
use crom_core::kse::{cosine_initial_condition, simulate_kse_with, KseParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, pass: bool, what: &str, detail: String) {
    println!("criterion {id:>2}: {} {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({what}) failed: {detail}");
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fourier_fixture() -> &'static FourierRecovery {
    static F: OnceLock<FourierRecovery> = OnceLock::new();
    F.get_or_init(|| fourier_recovery(Scale::Desk).expect("desk Fourier recovery"))
}

fn pod_fixture() -> &'static PodTraining {
    static P: OnceLock<PodTraining> = OnceLock::new();
    P.get_or_init(|| pod_training(Scale::Desk).expect("desk POD training"))
}

/// Attractor state of the 20-dim Fourier-Galerkin model after a long spin-up.
fn fourier_attractor_state(model: &QuadraticModel) -> Vec<f64> {
    static A: OnceLock<Vec<f64>> = OnceLock::new();
    A.get_or_init(|| {
        let opts = crom_core::galerkin::SimulationOptions {
            t_end: 1e4,
            dt: 0.01,
            seed: 0,
            save_stride: usize::MAX,
            t_start_save: f64::INFINITY,
        };
        crom_core::galerkin::simulate_model_with(model, &generic_initial_state(20), &opts, |_, _| {}).unwrap()
    })
    .clone()
}

/// `(wavenumber, parity)` of Fourier slot `s` in the `(cos 1..N, sin 1..N)` order.
fn slot(s: usize, pairs: usize) -> (i64, usize) {
    ((s % pairs) as i64 + 1, s / pairs)
}

#[test]
fn c01_fourier_galerkin_term_count() {
    let m = fourier_galerkin(10, &KseParams::default()).unwrap();
    let diagonal = (0..20).all(|i| (0..20).all(|j| i == j || m.linear[(i, j)] == 0.0));
    // only odd parity sums can couple; the wavenumbers must form a triad
    let forbidden = m
        .quadratic
        .iter()
        .filter(|t| t.coef != 0.0)
        .filter(|t| {
            let ((n, l), (p, l1), (q, l2)) = (slot(t.i, 10), slot(t.j, 10), slot(t.k, 10));
            (l + l1 + l2) % 2 == 0 || (n != p + q && n != (p - q).abs())
        })
        .count();
    let pass = m.term_count() == 295 && diagonal && forbidden == 0;
    report(1, pass, "Fourier-Galerkin sparsity", format!("{} terms, diagonal linear part {diagonal}, {forbidden} forbidden couplings", m.term_count()));
}

#[test]
fn c02_unstable_directions() {
    let p = KseParams::default();
    let unstable: Vec<usize> = (1..=64).filter(|&n| p.eigenvalue(n) > 0.0).collect();
    report(2, unstable == [1, 2, 3], "unstable Fourier pairs", format!("{unstable:?}"));
}

#[test]
fn c03_quadratic_energy_conservation() {
    let pod = &pod_fixture().galerkin;
    let four = fourier_galerkin(10, &KseParams::default()).unwrap();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [&four, pod] {
        let cmax = m.quadratic.iter().map(|t| t.coef.abs()).fold(0.0, f64::max);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..m.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(m.quadratic_energy_residual(&a).abs() / (norm.powi(3) * cmax));
        }
    }
    report(3, worst <= 1e-9, "quadratic energy conservation", format!("worst |a.Q(a)| / (|a|^3 max|coef|) = {worst:.2e}"));
}

#[test]
fn c04_gaussian_causation_entropy() {
    // X, Z with rho^2 = 0.75 and an independent conditioning variable Y
    let rho = 0.75f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let len = 100_000;
    let mut feats = DMatrix::zeros(2, len);
    let mut target = DMatrix::zeros(1, len);
    for j in 0..len {
        let (x, y, e): (f64, f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        feats[(0, j)] = x;
        feats[(1, j)] = y;
        target[(0, j)] = rho * x + (1.0 - rho * rho).sqrt() * e;
    }
    let sampled = causation_entropy_matrix(&feats, &target).unwrap().values[(0, 0)];
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, rho, 0.0, 1.0, 0.0, rho, 0.0, 1.0]);
    let exact = causation_entropy(&RegressionFactor::from_covariance(&cov, 2).unwrap()).unwrap().values[(0, 0)];
    let pass = (sampled - 1.0).abs() < 0.02 && (exact - 1.0).abs() < 1e-10;
    report(4, pass, "Gaussian causation entropy", format!("sampled {sampled:.4} bits, population {exact:.12} bits"));
}

#[test]
fn c05_structure_recovery() {
    let r = fourier_fixture();
    let contained = r.recovered() as f64 / r.selected.count().max(1) as f64;
    let pass = r.linear_diagonal_selected() && contained >= 0.95 && r.recovered() >= 270;
    let (lo, hi) = r.ce_separation();
    report(
        5,
        pass,
        "structure recovery",
        format!(
            "{} samples, gap threshold {:.3} bits, {} selected, {} of 295 true terms, {} false positives, {:.1}% contained (true terms >= {lo:.3} bits, others <= {hi:.3} bits)",
            r.samples,
            r.threshold,
            r.selected.count(),
            r.recovered(),
            r.false_positives(),
            100.0 * contained
        ),
    );
}

#[test]
fn c06_coefficient_accuracy() {
    let r = fourier_fixture();
    let (lin, sigma) = (r.linear_max_rel_error(), r.max_sigma());
    report(6, lin < 1e-3 && sigma < 1e-5, "coefficient accuracy", format!("linear max rel error {lin:.2e}, max sigma {sigma:.2e}"));
}

/// Final state over `[0, 1]` from the cosine profile with step `dt`.
fn kse_at_one(dt: f64) -> Vec<f64> {
    let p = KseParams { dt, ..KseParams::default() };
    simulate_kse_with(p, &cosine_initial_condition(&p), 1.0, usize::MAX, f64::INFINITY, |_, _| {}).unwrap()
}

#[test]
fn c07_etdrk4_order() {
    let reference = kse_at_one(1.0 / 2560.0);
    let err = |dt: f64| {
        let u = kse_at_one(dt);
        u.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let dts = [0.1, 0.05, 0.025];
    let errs: Vec<f64> = dts.iter().map(|&d| err(d)).collect();
    // least-squares slope of log error against log dt
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let order = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    report(7, (order - 4.0).abs() <= 0.3, "ETDRK4 order", format!("errors {} at dt {dts:?}, observed order {order:.3}", sci(&errs)));
}

/// Energy fractions of the leading 3 and 10 POD modes over `[t0, t1]`.
fn pod_capture(t0: f64, t1: f64) -> (f64, f64) {
    let p = KseParams::default();
    let spun = simulate_kse_with(p, &cosine_initial_condition(&p), t0, usize::MAX, f64::INFINITY, |_, _| {}).unwrap();
    let mut acc = PodAccumulator::new(p.nx, p.l);
    simulate_kse_with(p, &spun, t1 - t0, 10, 0.0, |_, u| acc.push(u)).unwrap();
    let b = acc.finish(10).unwrap();
    (b.captured_energy_fraction(3).unwrap(), b.captured_energy_fraction(10).unwrap())
}

#[test]
fn c08_pod_energy_capture() {
    // judged on the paper's training window; the desk window is reported alongside
    let (three, ten) = pod_capture(1e4, 5e4);
    let desk = pod_fixture().basis.captured_energy_fraction(3).unwrap();
    let pass = (100.0 * three - 63.5).abs() <= 3.0 && ten >= 0.985;
    report(
        8,
        pass,
        "POD energy capture",
        format!(
            "window [1e4, 5e4]: 3 modes {:.2}%, 10 modes {:.2}%; desk window [1e4, 1.4e4]: 3 modes {:.2}%",
            100.0 * three,
            100.0 * ten,
            100.0 * desk
        ),
    );
}

#[test]
fn c09_lyapunov_exponents() {
    let m = fourier_galerkin(10, &KseParams::default()).unwrap();
    let a0 = fourier_attractor_state(&m);
    let opts = LyapunovOptions {
        k: 3,
        t_window: 1e5,
        dt: 0.01,
        renorm_stride: 10,
        transient: 0.0,
    };
    let rep = lyapunov_spectrum(&m, &a0, &opts).unwrap();
    let lead = rep.exponents[0];
    report(9, (0.006..=0.012).contains(&lead), "leading Lyapunov exponent", format!("{:.5?} over {} time units", rep.exponents, rep.window));
}

#[test]
fn c10_equipartition() {
    // judged on the paper's statistics window; the desk window is its first fifth
    let m = fourier_galerkin(10, &KseParams::default()).unwrap();
    let a0 = fourier_attractor_state(&m);
    let opts = crom_core::galerkin::SimulationOptions {
        t_end: 2.5e5,
        dt: 0.01,
        seed: 0,
        save_stride: 10,
        t_start_save: 0.0,
    };
    let mut acc = EnergyAccumulator::new(20);
    let mut desk = None;
    crom_core::galerkin::simulate_model_with(&m, &a0, &opts, |t, a| {
        acc.push(t, a);
        if desk.is_none() && t >= 5e4 - 1e-9 {
            desk = Some(acc.finish().unwrap().pair_mismatch());
        }
    })
    .unwrap();
    let full = acc.finish().unwrap().pair_mismatch();
    let worst = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let desk = desk.unwrap();
    report(
        10,
        worst(&full) <= 0.05,
        "energy equipartition",
        format!(
            "worst pair mismatch {:.4} over 2.5e5 time units {}, {:.4} over 5e4 {}",
            worst(&full),
            sci(&full),
            worst(&desk),
            sci(&desk)
        ),
    );
}

/// Linear-Gaussian pair: `y` observed, `z` hidden.
struct LinearPair {
    a: [[f64; 2]; 2],
    sigma: [f64; 2],
}

impl LinearPair {
    fn model(&self) -> QuadraticModel {
        let mut m = QuadraticModel::zero(2, Provenance::Learned);
        for i in 0..2 {
            for j in 0..2 {
                m.linear[(i, j)] = self.a[i][j];
            }
        }
        m.noise = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.sigma.to_vec()));
        m
    }

    /// Exact Kalman-Bucy mean for `z`, discretized on the filter's own grid and increments.
    fn exact_mean(&self, obs: &ObservationStream) -> Vec<f64> {
        let [[d, c], [b, a]] = self.a;
        let (s1, s2) = (self.sigma[0].powi(2), self.sigma[1].powi(2));
        let dt = obs.dt();
        let (mut mu, mut r) = (0.0, 0.0);
        let mut out = vec![mu];
        for j in 0..obs.times.len() - 1 {
            let y = obs.y[(0, j)];
            let innov = (d * y + c * mu) * dt - obs.y_dot[(0, j)] * dt;
            let gain = r * c / s1;
            mu += (b * y + a * mu) * dt - gain * innov;
            r += (2.0 * a * r + s2 - r * r * c * c / s1) * dt;
            out.push(mu);
        }
        out
    }
}

#[test]
fn c11_kalman_bucy_convergence() {
    let sys = LinearPair {
        a: [[-0.5, 1.0], [0.5, -1.0]],
        sigma: [0.5, 1.0],
    };
    let dt = 0.01;
    let len = 2001;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = [0.0f64; 2];
    let mut y = DMatrix::zeros(1, len);
    for j in 0..len {
        y[(0, j)] = x[0];
        let (w0, w1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let f = [sys.a[0][0] * x[0] + sys.a[0][1] * x[1], sys.a[1][0] * x[0] + sys.a[1][1] * x[1]];
        x[0] += f[0] * dt + sys.sigma[0] * dt.sqrt() * w0;
        x[1] += f[1] * dt + sys.sigma[1] * dt.sqrt() * w1;
    }
    let times: Vec<f64> = (0..len).map(|j| j as f64 * dt).collect();
    let obs = ObservationStream::new(times, y).unwrap();
    let exact = sys.exact_mean(&obs);
    let model = sys.model();
    let members = [16usize, 64, 256];
    let seeds = 8;
    let rmse: Vec<f64> = members
        .iter()
        .map(|&p| {
            let total: f64 = (0..seeds)
                .map(|s| {
                    let opts = EnkbfOptions {
                        members: p,
                        seed: 100 + s,
                        ..Default::default()
                    };
                    let res = enkbf_run(&model, &obs, &opts).unwrap();
                    let sq: f64 = exact.iter().enumerate().map(|(j, m)| (res.mean[(0, j)] - m).powi(2)).sum();
                    sq / len as f64
                })
                .sum();
            (total / seeds as f64).sqrt()
        })
        .collect();
    let xs: Vec<f64> = members.iter().map(|&p| (p as f64).ln()).collect();
    let ys: Vec<f64> = rmse.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    report(11, (slope + 0.5).abs() <= 0.15, "EnKBF to Kalman-Bucy convergence", format!("RMSE {} at p {members:?}, log-log slope {slope:.3}", sci(&rmse)));
}

fn describe(o: &DaOutcome) -> String {
    o.describe(DA_OBSERVED)
}

#[test]
fn c12_assimilation_skill() {
    let t = pod_fixture();
    let d: DaComparison = da_partial(t, Scale::Desk, 7).unwrap();
    let ce = d.causation.mean_error_to_mode_10(DA_OBSERVED);
    let th = d.baseline.mean_error_to_mode_10(DA_OBSERVED);
    let full_ok = matches!(d.causation, DaOutcome::Completed { .. }) && ce <= 0.7 * th;
    let common_ok = d.common.is_none_or(|c| c.causation <= 0.7 * c.baseline);
    let sizes_ok = d.causation_terms == 460 && d.baseline_terms == 460;
    let common = d
        .common
        .map(|c| format!("; before divergence (t <= {:.1}): causation {:.4}, thresholded {:.4}", c.t_end, c.causation, c.baseline))
        .unwrap_or_default();
    report(
        12,
        full_ok && common_ok && sizes_ok,
        "assimilation skill",
        format!(
            "p = {}, window {}, terms {}/{}: causation {}, thresholded {}{common}",
            d.members,
            d.window,
            d.causation_terms,
            d.baseline_terms,
            describe(&d.causation),
            describe(&d.baseline)
        ),
    );
}

fn repro_hashes(experiment: &str, dir: &Path) -> String {
    let status = Command::new(env!("CARGO_BIN_EXE_crom"))
        .args(["repro", experiment, "--smoke", "--seed", "42", "--out"])
        .arg(dir)
        .output()
        .expect("run crom");
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read_to_string(dir.join("hashes.txt")).unwrap()
}

#[test]
fn c13_reproducibility() {
    let mut lines = Vec::new();
    let mut pass = true;
    for e in ["fourier-recovery", "pod-hierarchy", "da-partial"] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ha, hb) = (repro_hashes(e, a.path()), repro_hashes(e, b.path()));
        let same = ha == hb && !ha.is_empty();
        pass &= same;
        lines.push(format!("{e}: {} files {}", ha.lines().count(), if same { "identical" } else { "differ" }));
    }
    report(13, pass, "reproducible repro hashes", lines.join(", "));
}

// Qualitative checks standing in for the bifurcation tree and the long ROM runs.

#[test]
fn extrema_contrast_between_chaotic_and_steady_viscosity() {
    use crom_core::diagnostics::{bifurcation_extrema, count_distinct, extrema_registry};
    let sys = extrema_registry().create("fourier-galerkin", &[]).unwrap();
    let base = KseParams::default();
    let sweep = [base, KseParams { nu: 4.0 * base.nu, ..base }];
    let sets = bifurcation_extrema(sys.as_ref(), &sweep, 5000.0, 2000.0, 10).unwrap();
    let counts: Vec<usize> = sets.iter().map(|s| count_distinct(&s.extrema, 1e-6)).collect();
    println!("extrema: distinct local extrema {counts:?} at nu {:?}", sweep.map(|p| p.nu));
    assert!(counts[0] > 20, "chaotic regime should visit many extrema: {counts:?}");
    assert!(counts[1] <= 4, "steady regime should have almost none: {counts:?}");
}

#[test]
fn sparse_rom_survives_a_million_steps() {
    let t = pod_fixture();
    let (_, rom) = t.causation_rom(0.2).unwrap();
    let stats = free_run_stats(&rom, t.last_training_state(), 0.0, 1e4, t.params.dt, 3).unwrap();
    println!("20% ROM over 1e6 steps: {:?}", stats.blew_up.map_or("bounded".to_string(), |b| format!("blew up at {b}")));
    assert!(stats.blew_up.is_none());
    assert!(stats.spectrum.iter().all(|e| e.is_finite()));
}
