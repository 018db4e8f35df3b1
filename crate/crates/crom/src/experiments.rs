//! Canned end-to-end runs (`crom repro <name>`), at paper, desk or smoke scale.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crom_core::basis::{Basis, CoefficientSeries, PodAccumulator, Projector};
use crom_core::causal::{causation_entropy, CausationMatrix, RegressionFactor};
use crom_core::diagnostics::{acf, assimilation_errors, pdf_estimate, EnergyAccumulator};
use crom_core::enkbf::{enkbf_run, EnkbfOptions, ObservationStream};
use crom_core::galerkin::{
    fourier_galerkin, generic_initial_state, pod_galerkin, simulate_model, simulate_model_with, threshold_structure,
    Provenance, QuadraticModel, SimulationOptions,
};
use crom_core::kse::{cosine_initial_condition, simulate_kse_with, KseParams};
use crom_core::library::{build_library, FeatureLibrary};
use crom_core::mle::{fit_with_factor, regression_factor, FitOptions};
use crom_core::registry::Registry;
use crom_core::selection::{select_structure, LargestGap, ModelStructure, SelectionStrategy};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, NamedMatrix};
use crate::plot::{Chart, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// The paper's windows and ensemble sizes.
    Full,
    /// One tenth of the training data, short statistics windows.
    Desk,
    /// Seconds; for plumbing and reproducibility checks only.
    Smoke,
}

impl Scale {
    pub fn name(&self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
            Scale::Smoke => "smoke",
        }
    }
}

/// Output directory that remembers every artifact it wrote.
pub struct Artifacts {
    dir: PathBuf,
    csv: bool,
    written: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: &Path, csv: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        io::write_text(&p, text)
    }

    pub fn series(&mut self, stem: &str, s: &CoefficientSeries) -> Result<()> {
        let p = self.path(&format!("{stem}.crom"));
        io::write_series(&p, s)?;
        if self.csv {
            self.text(&format!("{stem}.csv"), &io::series_csv(s))?;
        }
        Ok(())
    }

    pub fn model(&mut self, stem: &str, m: &QuadraticModel) -> Result<()> {
        let p = self.path(&format!("{stem}.crom"));
        io::write_model(&p, m)?;
        if self.csv {
            self.text(&format!("{stem}.csv"), &io::model_csv(m))?;
        }
        Ok(())
    }

    pub fn basis(&mut self, stem: &str, b: &Basis) -> Result<()> {
        let p = self.path(&format!("{stem}.crom"));
        io::write_basis(&p, b)?;
        if self.csv {
            self.text(&format!("{stem}.csv"), &io::basis_csv(b))?;
        }
        Ok(())
    }

    /// Matrices always get a CSV mirror; they are the primary readable output.
    pub fn matrix(&mut self, stem: &str, m: &NamedMatrix, header: Option<&str>) -> Result<()> {
        let p = self.path(&format!("{stem}.crom"));
        io::write_matrix(&p, m)?;
        self.text(&format!("{stem}.csv"), &io::matrix_csv(&m.values, header))
    }

    pub fn structure(&mut self, stem: &str, s: &ModelStructure, lib: &FeatureLibrary) -> Result<()> {
        self.matrix(stem, &io::structure_to_matrix(s), Some(&io::library_header(lib)))
    }

    pub fn chart(&mut self, name: &str, chart: &Chart) -> Result<()> {
        self.text(name, &chart.to_svg())
    }

    /// SHA-256 of every written artifact, sorted by file name.
    pub fn hashes(&self) -> Result<Vec<(String, String)>> {
        let mut names = self.written.clone();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let p = self.dir.join(&n);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                Ok((n, hex::encode(Sha256::digest(&bytes))))
            })
            .collect()
    }
}

/// Ordered `key = value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn run(&self, scale: Scale, seed: u64, out: &mut Artifacts) -> Result<Summary>;
}

pub fn experiment_registry() -> Registry<dyn Experiment> {
    let mut reg: Registry<dyn Experiment> = Registry::new("experiment");
    reg.register("fourier-recovery", |_| Ok(Box::new(FourierRecoveryExperiment)));
    reg.register("pod-hierarchy", |_| Ok(Box::new(PodHierarchyExperiment)));
    reg.register("da-partial", |_| Ok(Box::new(DaPartialExperiment)));
    reg
}

/// Run a registered experiment, then write `summary.txt` and `hashes.txt`.
pub fn run_experiment(name: &str, scale: Scale, seed: u64, out: &mut Artifacts) -> Result<Summary> {
    let exp = experiment_registry().create(name, &[])?;
    let start = Instant::now();
    let mut summary = exp.run(scale, seed, out)?;
    log::info!("{name} ({}) finished in {:.1?}", scale.name(), start.elapsed());
    summary.entries.insert(0, ("experiment".into(), name.into()));
    summary.entries.insert(1, ("scale".into(), scale.name().into()));
    summary.entries.insert(2, ("seed".into(), seed.to_string()));
    out.text("summary.txt", &summary.to_text())?;
    let hashes: String = out.hashes()?.into_iter().map(|(n, h)| format!("{h}  {n}\n")).collect();
    io::write_text(&out.dir().join("hashes.txt"), &hashes)?;
    Ok(summary)
}

fn elapsed(label: &str, start: Instant) {
    log::info!("{label}: {:.1?}", start.elapsed());
}

// ---------------------------------------------------------------- statistics

/// Long-run statistics of a model trajectory.
#[derive(Debug, Clone)]
pub struct RunStats {
    /// Time-mean `a_k^2`; empty if the run blew up.
    pub spectrum: Vec<f64>,
    /// `E(t) = |a|^2` every `sample_dt`.
    pub energy: Vec<f64>,
    pub sample_dt: f64,
    pub blew_up: Option<f64>,
}

/// Integrate `model` from `a0`, discard `spin_up`, then record statistics over `window`.
pub fn free_run_stats(model: &QuadraticModel, a0: &[f64], spin_up: f64, window: f64, dt: f64, seed: u64) -> Result<RunStats> {
    let save_stride = 10;
    let opts = SimulationOptions {
        t_end: spin_up + window,
        dt,
        seed,
        save_stride,
        t_start_save: spin_up,
    };
    let mut acc = EnergyAccumulator::new(model.n());
    let mut energy = Vec::new();
    let result = simulate_model_with(model, a0, &opts, |t, a| {
        acc.push(t, a);
        energy.push(a.iter().map(|v| v * v).sum());
    });
    match result {
        Ok(_) => Ok(RunStats {
            spectrum: acc.finish()?.energies,
            energy,
            sample_dt: dt * save_stride as f64,
            blew_up: None,
        }),
        Err(crom_core::Error::BlowUp { last_stable_time }) => Ok(RunStats {
            spectrum: Vec::new(),
            energy,
            sample_dt: dt * save_stride as f64,
            blew_up: Some(last_stable_time),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Spectrum, PDF and ACF tables and plots for a set of labelled runs.
fn write_stats(out: &mut Artifacts, prefix: &str, runs: &[(&str, &RunStats)]) -> Result<()> {
    let ok: Vec<&(&str, &RunStats)> = runs.iter().filter(|(_, r)| r.blew_up.is_none()).collect();
    if ok.is_empty() {
        return Ok(());
    }
    let n = ok[0].1.spectrum.len();
    let header = std::iter::once("mode".to_string())
        .chain(ok.iter().map(|(name, _)| format!("E_{name}")))
        .collect::<Vec<_>>()
        .join(",");
    let spec = DMatrix::from_fn(n, ok.len() + 1, |k, c| if c == 0 { (k + 1) as f64 } else { ok[c - 1].1.spectrum[k] });
    out.matrix(&format!("{prefix}_spectrum"), &NamedMatrix { values: spec, note: "time-mean a_k^2".into() }, Some(&header))?;
    let mut chart = Chart::new("Energy spectrum", "mode k", "E_k").log_y();
    for (name, r) in &ok {
        chart = chart.with(Trace::line(*name, r.spectrum.iter().enumerate().map(|(k, e)| ((k + 1) as f64, *e)).collect()));
    }
    out.chart(&format!("{prefix}_spectrum.svg"), &chart)?;

    let mut pdf_chart = Chart::new("PDF of kinetic energy", "E", "density");
    let mut acf_chart = Chart::new("ACF of kinetic energy", "lag (time units)", "ACF");
    let mut pdf_rows = Vec::new();
    let mut acf_rows = Vec::new();
    for (c, (name, r)) in ok.iter().enumerate() {
        if let Ok(h) = pdf_estimate(&r.energy, 100) {
            let pts: Vec<(f64, f64)> = h.centers().into_iter().zip(h.density.iter().copied()).collect();
            pdf_rows.extend(pts.iter().map(|(x, d)| [c as f64, *x, *d]));
            pdf_chart = pdf_chart.with(Trace::line(*name, pts));
        }
        let max_lag = (r.energy.len() / 4).min((100.0 / r.sample_dt) as usize);
        if max_lag > 0 {
            if let Ok(a) = acf(&r.energy, max_lag) {
                let pts: Vec<(f64, f64)> = a.iter().enumerate().map(|(l, v)| (l as f64 * r.sample_dt, *v)).collect();
                acf_rows.extend(pts.iter().map(|(x, v)| [c as f64, *x, *v]));
                acf_chart = acf_chart.with(Trace::line(*name, pts));
            }
        }
    }
    let note = ok.iter().enumerate().map(|(c, (n, _))| format!("{c}={n}")).collect::<Vec<_>>().join(" ");
    let to_matrix = |rows: &[[f64; 3]]| DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    out.matrix(&format!("{prefix}_pdf"), &NamedMatrix { values: to_matrix(&pdf_rows), note: note.clone() }, Some("run,E,density"))?;
    out.matrix(&format!("{prefix}_acf"), &NamedMatrix { values: to_matrix(&acf_rows), note }, Some("run,lag,acf"))?;
    out.chart(&format!("{prefix}_pdf.svg"), &pdf_chart)?;
    out.chart(&format!("{prefix}_acf.svg"), &acf_chart)?;
    Ok(())
}

fn describe_run(r: &RunStats) -> String {
    match r.blew_up {
        Some(t) => format!("blew up at t = {t:.2}"),
        None => format!("mean E = {:.6}", r.spectrum.iter().sum::<f64>()),
    }
}

// ---------------------------------------------------------- Fourier recovery

/// Windows for the Fourier-Galerkin identification run.
struct FourierWindows {
    train: (f64, f64),
    stats: f64,
}

fn fourier_windows(scale: Scale) -> FourierWindows {
    match scale {
        Scale::Full => FourierWindows { train: (1e4, 5e4), stats: 2.5e5 },
        Scale::Desk => FourierWindows { train: (1e4, 1.4e4), stats: 5e4 },
        Scale::Smoke => FourierWindows { train: (1e3, 1.2e3), stats: 200.0 },
    }
}

/// Smallest causation entropy the gap search considers (bits).
pub const GAP_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct FourierRecovery {
    pub truth: QuadraticModel,
    pub learned: QuadraticModel,
    pub cem: CausationMatrix,
    pub selected: ModelStructure,
    pub true_structure: ModelStructure,
    pub threshold: f64,
    pub library: FeatureLibrary,
    /// Last training state, for continuing runs.
    pub last_state: Vec<f64>,
    pub samples: usize,
}

impl FourierRecovery {
    pub fn recovered(&self) -> usize {
        self.selected.overlap(&self.true_structure)
    }

    pub fn false_positives(&self) -> usize {
        self.selected.count() - self.recovered()
    }

    pub fn missed(&self) -> usize {
        self.true_structure.count() - self.recovered()
    }

    /// All diagonal linear terms selected.
    pub fn linear_diagonal_selected(&self) -> bool {
        (0..self.truth.n()).all(|i| self.selected.get(i, i))
    }

    /// `max_i |L_ii - beta_i| / |beta_i|` of the learned linear diagonal.
    pub fn linear_max_rel_error(&self) -> f64 {
        (0..self.truth.n())
            .map(|i| {
                let b = self.truth.linear[(i, i)];
                (self.learned.linear[(i, i)] - b).abs() / b.abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_sigma(&self) -> f64 {
        self.learned.noise.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Lowest causation entropy among true terms and highest among the rest.
    pub fn ce_separation(&self) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..self.cem.n() {
            for m in 0..self.cem.m() {
                let v = self.cem.values[(i, m)];
                if self.true_structure.get(i, m) {
                    lo = lo.min(v);
                } else {
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }
}

/// Train on the 20-dimensional Fourier-Galerkin trajectory and identify its structure.
pub fn fourier_recovery(scale: Scale) -> Result<FourierRecovery> {
    let params = KseParams::default();
    let w = fourier_windows(scale);
    let truth = fourier_galerkin(10, &params)?;
    let n = truth.n();
    let start = Instant::now();
    let training = simulate_model(
        &truth,
        &generic_initial_state(n),
        &SimulationOptions {
            t_end: w.train.1,
            dt: params.dt,
            seed: 0,
            save_stride: 1,
            t_start_save: w.train.0,
        },
        "fourier-20",
    )?;
    elapsed("Fourier-Galerkin training trajectory", start);
    let library = build_library(n)?;
    let opts = FitOptions::default();
    let start = Instant::now();
    let factor = regression_factor(&library, &training, &opts)?;
    let cem = causation_entropy(&factor)?;
    elapsed("causation entropy", start);
    let gap = LargestGap { floor: GAP_FLOOR };
    let threshold = gap.threshold(&cem);
    let selected = gap.select(&cem);
    let learned = fit_with_factor(&selected, &library, &factor, &training, &opts)?;
    Ok(FourierRecovery {
        true_structure: truth.structure(&library),
        last_state: training.state(training.len() - 1).to_vec(),
        samples: training.len(),
        truth,
        learned,
        cem,
        selected,
        threshold,
        library,
    })
}

struct FourierRecoveryExperiment;

impl Experiment for FourierRecoveryExperiment {
    fn name(&self) -> &'static str {
        "fourier-recovery"
    }

    fn describe(&self) -> &'static str {
        "identify the 20-dim Fourier-Galerkin model from its own trajectory"
    }

    fn run(&self, scale: Scale, seed: u64, out: &mut Artifacts) -> Result<Summary> {
        let r = fourier_recovery(scale)?;
        let lib = &r.library;
        out.model("true_model", &r.truth)?;
        out.model("learned_model", &r.learned)?;
        out.matrix(
            "causation_entropy",
            &NamedMatrix {
                values: r.cem.values.clone(),
                note: "causation entropy (bits), rows = equations".into(),
            },
            Some(&io::library_header(lib)),
        )?;
        out.structure("selected_structure", &r.selected, lib)?;
        out.structure("true_structure", &r.true_structure, lib)?;

        let w = fourier_windows(scale);
        let dt = KseParams::default().dt;
        let spin = 1000.0f64.min(w.stats / 10.0);
        let start = Instant::now();
        let truth_stats = free_run_stats(&r.truth, &r.last_state, spin, w.stats, dt, seed)?;
        let learned_stats = free_run_stats(&r.learned, &r.last_state, spin, w.stats, dt, seed)?;
        elapsed("free runs", start);
        write_stats(out, "stats", &[("galerkin", &truth_stats), ("learned", &learned_stats)])?;

        let mut s = Summary::default();
        let (lo, hi) = r.ce_separation();
        s.push("training_samples", r.samples);
        s.push("library_size", lib.len());
        s.push("true_terms", r.true_structure.count());
        s.push("gap_threshold_bits", format!("{:.6}", r.threshold));
        s.push("selected_terms", r.selected.count());
        s.push("recovered_true_terms", r.recovered());
        s.push("false_positives", r.false_positives());
        s.push("missed_true_terms", r.missed());
        s.push("all_linear_diagonal_selected", r.linear_diagonal_selected());
        s.push("linear_max_rel_error", format!("{:.3e}", r.linear_max_rel_error()));
        s.push("max_sigma", format!("{:.3e}", r.max_sigma()));
        s.push("lowest_true_ce_bits", format!("{lo:.4}"));
        s.push("highest_false_ce_bits", format!("{hi:.4}"));
        s.push("galerkin_free_run", describe_run(&truth_stats));
        s.push("learned_free_run", describe_run(&learned_stats));
        Ok(s)
    }
}

// ------------------------------------------------------------- POD training

struct PodWindows {
    train: (f64, f64),
    stats: f64,
    da: f64,
    members: usize,
}

fn pod_windows(scale: Scale) -> PodWindows {
    match scale {
        Scale::Full => PodWindows { train: (1e4, 5e4), stats: 2.5e5, da: 2000.0, members: 500 },
        Scale::Desk => PodWindows { train: (1e4, 1.4e4), stats: 1e4, da: 500.0, members: 100 },
        // chaos sets in after t ~ 3000 for the cosine start
        Scale::Smoke => PodWindows { train: (4000.0, 4400.0), stats: 100.0, da: 20.0, members: 20 },
    }
}

/// POD basis, training projections and the objects every POD experiment shares.
pub struct PodTraining {
    pub params: KseParams,
    pub basis: Basis,
    pub training: CoefficientSeries,
    /// KSE state at the end of the training window.
    pub end_state: Vec<f64>,
    pub galerkin: QuadraticModel,
    pub library: FeatureLibrary,
    pub factor: RegressionFactor,
    pub cem: CausationMatrix,
}

pub const POD_MODES: usize = 20;
pub const POD_SNAPSHOT_STRIDE: usize = 10;

pub fn pod_training(scale: Scale) -> Result<PodTraining> {
    let params = KseParams::default();
    let w = pod_windows(scale);
    let start = Instant::now();
    let u0 = cosine_initial_condition(&params);
    let spun = simulate_kse_with(params, &u0, w.train.0, usize::MAX, f64::INFINITY, |_, _| {})?;
    let span = w.train.1 - w.train.0;
    let mut acc = PodAccumulator::new(params.nx, params.l);
    simulate_kse_with(params, &spun, span, POD_SNAPSHOT_STRIDE, 0.0, |_, u| acc.push(u))?;
    let basis = acc.finish(POD_MODES)?;
    elapsed("KSE spin-up and POD", start);

    // second pass over the identical window, projecting every step
    let start = Instant::now();
    let proj = Projector::new(&basis, params.nx);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut buf = vec![0.0; POD_MODES];
    let end_state = simulate_kse_with(params, &spun, span, 1, 0.0, |t, u| {
        proj.project_into(u, &mut buf);
        times.push(w.train.0 + t);
        values.extend_from_slice(&buf);
    })?;
    let len = times.len();
    let training = CoefficientSeries::new(times, DMatrix::from_vec(POD_MODES, len, values), basis.id())?;
    elapsed("training projection", start);

    let start = Instant::now();
    let galerkin = pod_galerkin(&basis, &params)?;
    let library = build_library(POD_MODES)?;
    let factor = regression_factor(&library, &training, &FitOptions::default())?;
    let cem = causation_entropy(&factor)?;
    elapsed("POD-Galerkin and causation entropy", start);
    Ok(PodTraining {
        params,
        basis,
        training,
        end_state,
        galerkin,
        library,
        factor,
        cem,
    })
}

impl PodTraining {
    /// Causation-based ROM with `fraction` of each equation's terms removed.
    pub fn causation_rom(&self, fraction: f64) -> Result<(ModelStructure, QuadraticModel)> {
        let s = select_structure(&self.cem, "per_equation_sparsity", &[fraction])?;
        let m = fit_with_factor(&s, &self.library, &self.factor, &self.training, &FitOptions::default())?;
        Ok((s, m))
    }

    /// Galerkin model with `fraction` of all coefficients removed by magnitude,
    /// survivors refit by MLE.
    pub fn thresholded_galerkin(&self, fraction: f64) -> Result<(ModelStructure, QuadraticModel)> {
        let s = threshold_structure(&self.galerkin, &self.library, fraction)?;
        let mut m = fit_with_factor(&s, &self.library, &self.factor, &self.training, &FitOptions::default())?;
        m.provenance = Provenance::Thresholded;
        Ok((s, m))
    }

    /// Fraction of the `n x M` Galerkin coefficients with magnitude in `[lo, hi]`.
    pub fn galerkin_coefficient_fraction(&self, lo: f64, hi: f64) -> f64 {
        let theta = self.galerkin.to_theta(&self.library);
        let inside = theta.iter().filter(|v| (lo..=hi).contains(&v.abs())).count();
        inside as f64 / theta.len() as f64
    }

    pub fn last_training_state(&self) -> &[f64] {
        self.training.state(self.training.len() - 1)
    }
}

pub const HIERARCHY: [f64; 3] = [0.2, 0.5, 0.9];

struct PodHierarchyExperiment;

impl Experiment for PodHierarchyExperiment {
    fn name(&self) -> &'static str {
        "pod-hierarchy"
    }

    fn describe(&self) -> &'static str {
        "POD-Galerkin versus causation-based ROMs of increasing sparsity"
    }

    fn run(&self, scale: Scale, seed: u64, out: &mut Artifacts) -> Result<Summary> {
        let t = pod_training(scale)?;
        let w = pod_windows(scale);
        let mut s = Summary::default();
        s.push("training_samples", t.training.len());
        s.push("energy_fraction_3_modes", format!("{:.4}", t.basis.captured_energy_fraction(3).unwrap_or(f64::NAN)));
        s.push("energy_fraction_10_modes", format!("{:.4}", t.basis.captured_energy_fraction(10).unwrap_or(f64::NAN)));
        s.push("galerkin_terms", t.galerkin.term_count());
        s.push("galerkin_coefficients_in_1e-5_1e-1", format!("{:.4}", t.galerkin_coefficient_fraction(1e-5, 1e-1)));
        out.basis("pod_basis", &t.basis)?;
        out.model("pod_galerkin", &t.galerkin)?;
        out.matrix(
            "causation_entropy",
            &NamedMatrix {
                values: t.cem.values.clone(),
                note: "causation entropy (bits), rows = equations".into(),
            },
            Some(&io::library_header(&t.library)),
        )?;

        let dt = t.params.dt;
        let a0 = t.last_training_state().to_vec();
        let start = Instant::now();
        let galerkin_stats = free_run_stats(&t.galerkin, &a0, 0.0, w.stats, dt, seed)?;
        s.push("pod_galerkin_free_run", describe_run(&galerkin_stats));
        let mut runs: Vec<(String, RunStats)> = vec![("pod-galerkin".into(), galerkin_stats)];
        for f in HIERARCHY {
            let pct = (f * 100.0).round() as usize;
            let (st, m) = t.causation_rom(f)?;
            out.structure(&format!("structure_{pct}"), &st, &t.library)?;
            out.model(&format!("rom_{pct}"), &m)?;
            let r = free_run_stats(&m, &a0, 0.0, w.stats, dt, seed)?;
            s.push(&format!("rom_{pct}_terms"), m.term_count());
            s.push(&format!("rom_{pct}_free_run"), describe_run(&r));
            runs.push((format!("rom-{pct}"), r));
        }
        elapsed("free runs", start);
        let refs: Vec<(&str, &RunStats)> = runs.iter().map(|(n, r)| (n.as_str(), r)).collect();
        write_stats(out, "stats", &refs)?;
        Ok(s)
    }
}

// ------------------------------------------------------------ assimilation

#[derive(Debug, Clone)]
pub enum DaOutcome {
    /// Relative L2 error of each unobserved mode (`r + 1 ..= n`).
    Completed { errors: Vec<f64>, mean: DMatrix<f64> },
    Diverged { time: f64 },
}

impl DaOutcome {
    /// Mean error over the unobserved modes up to mode 10.
    pub fn mean_error_to_mode_10(&self, r: usize) -> f64 {
        match self {
            DaOutcome::Completed { errors, .. } => mean_to_mode_10(errors, r),
            DaOutcome::Diverged { .. } => f64::INFINITY,
        }
    }

    pub fn describe(&self, r: usize) -> String {
        match self {
            DaOutcome::Completed { .. } => format!("{:.4}", self.mean_error_to_mode_10(r)),
            DaOutcome::Diverged { time } => format!("diverged at t = {time:.2}"),
        }
    }
}

fn mean_to_mode_10(errors: &[f64], r: usize) -> f64 {
    let k = 10usize.saturating_sub(r).min(errors.len());
    errors[..k].iter().sum::<f64>() / k as f64
}

/// Errors of both filters over the window before either one diverged.
#[derive(Debug, Clone, Copy)]
pub struct CommonWindow {
    pub t_end: f64,
    pub causation: f64,
    pub baseline: f64,
}

pub struct DaComparison {
    pub observed: usize,
    pub members: usize,
    pub window: f64,
    pub causation_terms: usize,
    pub baseline_terms: usize,
    pub causation: DaOutcome,
    pub baseline: DaOutcome,
    pub common: Option<CommonWindow>,
    pub times: Vec<f64>,
    pub truth: DMatrix<f64>,
}

pub const DA_SPARSITY: f64 = 0.9;
pub const DA_OBSERVED: usize = 3;

fn assimilate(model: &QuadraticModel, obs: &ObservationStream, truth: &DMatrix<f64>, opts: &EnkbfOptions) -> Result<DaOutcome> {
    let r = obs.r();
    match enkbf_run(model, obs, opts) {
        Ok(res) => {
            let hidden = truth.rows(r, truth.nrows() - r).into_owned();
            let errors = assimilation_errors(&hidden, &res.mean)?;
            Ok(DaOutcome::Completed { errors, mean: res.mean })
        }
        Err(crom_core::Error::Divergence { time }) => Ok(DaOutcome::Diverged { time }),
        Err(e) => Err(e.into()),
    }
}

/// Observe the leading POD amplitudes of a fresh KSE run and assimilate them
/// into the 90%-sparsity causation ROM and the thresholded Galerkin baseline.
pub fn da_partial(t: &PodTraining, scale: Scale, seed: u64) -> Result<DaComparison> {
    let w = pod_windows(scale);
    let (_, causation_model) = t.causation_rom(DA_SPARSITY)?;
    let (_, baseline_model) = t.thresholded_galerkin(DA_SPARSITY)?;

    let start = Instant::now();
    let proj = Projector::new(&t.basis, t.params.nx);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut buf = vec![0.0; POD_MODES];
    simulate_kse_with(t.params, &t.end_state, w.da, 1, 0.0, |time, u| {
        proj.project_into(u, &mut buf);
        times.push(time);
        values.extend_from_slice(&buf);
    })?;
    let truth = DMatrix::from_vec(POD_MODES, times.len(), values);
    elapsed("truth run", start);

    let r = DA_OBSERVED;
    let opts = EnkbfOptions {
        members: w.members,
        seed,
        ..Default::default()
    };
    let run = |len: usize| -> Result<(DaOutcome, DaOutcome)> {
        let obs = ObservationStream::new(times[..len].to_vec(), truth.view((0, 0), (r, len)).into_owned())?;
        let tr = truth.columns(0, len).into_owned();
        Ok((assimilate(&causation_model, &obs, &tr, &opts)?, assimilate(&baseline_model, &obs, &tr, &opts)?))
    };
    let start = Instant::now();
    let (causation, baseline) = run(times.len())?;
    elapsed("assimilation", start);

    let first_divergence = [&causation, &baseline]
        .iter()
        .filter_map(|o| match o {
            DaOutcome::Diverged { time } => Some(*time),
            _ => None,
        })
        .fold(f64::INFINITY, f64::min);
    let common = if first_divergence.is_finite() {
        let len = ((0.9 * first_divergence / t.params.dt) as usize).min(times.len());
        if len > 10 {
            match run(len)? {
                (c @ DaOutcome::Completed { .. }, b @ DaOutcome::Completed { .. }) => Some(CommonWindow {
                    t_end: times[len - 1],
                    causation: c.mean_error_to_mode_10(r),
                    baseline: b.mean_error_to_mode_10(r),
                }),
                _ => None,
            }
        } else {
            None
        }
    } else {
        None
    };
    Ok(DaComparison {
        observed: r,
        members: w.members,
        window: w.da,
        causation_terms: causation_model.term_count(),
        baseline_terms: baseline_model.term_count(),
        causation,
        baseline,
        common,
        times,
        truth,
    })
}

struct DaPartialExperiment;

impl Experiment for DaPartialExperiment {
    fn name(&self) -> &'static str {
        "da-partial"
    }

    fn describe(&self) -> &'static str {
        "recover unobserved POD modes with the EnKBF on sparse ROMs"
    }

    fn run(&self, scale: Scale, seed: u64, out: &mut Artifacts) -> Result<Summary> {
        let t = pod_training(scale)?;
        let d = da_partial(&t, scale, seed)?;
        let r = d.observed;
        let mut s = Summary::default();
        s.push("observed_modes", r);
        s.push("members", d.members);
        s.push("window", d.window);
        s.push("causation_rom_terms", d.causation_terms);
        s.push("thresholded_galerkin_terms", d.baseline_terms);
        s.push("causation_mean_error_modes_4_10", d.causation.describe(r));
        s.push("thresholded_mean_error_modes_4_10", d.baseline.describe(r));
        if let Some(c) = d.common {
            s.push("common_window_end", format!("{:.2}", c.t_end));
            s.push("common_window_causation_error", format!("{:.4}", c.causation));
            s.push("common_window_thresholded_error", format!("{:.4}", c.baseline));
        }
        let truth = CoefficientSeries::new(d.times.clone(), d.truth.clone(), t.basis.id())?;
        out.series("truth", &truth)?;
        for (name, o) in [("causation", &d.causation), ("thresholded", &d.baseline)] {
            if let DaOutcome::Completed { errors, mean } = o {
                let header = std::iter::once("t".to_string())
                    .chain((r + 1..=POD_MODES).map(|k| format!("a{k}")))
                    .collect::<Vec<_>>()
                    .join(",");
                let table = DMatrix::from_fn(mean.ncols(), mean.nrows() + 1, |j, c| if c == 0 { d.times[j] } else { mean[(c - 1, j)] });
                out.matrix(&format!("{name}_posterior_mean"), &NamedMatrix { values: table, note: format!("{name} posterior mean") }, Some(&header))?;
                let err = DMatrix::from_fn(errors.len(), 2, |k, c| if c == 0 { (r + 1 + k) as f64 } else { errors[k] });
                out.matrix(&format!("{name}_errors"), &NamedMatrix { values: err, note: "relative L2 error per mode".into() }, Some("mode,error"))?;
                let mut chart = Chart::new(format!("{name}: mode {}", r + 1), "t", format!("a{}", r + 1));
                chart = chart
                    .with(Trace::line("truth", d.times.iter().zip(d.truth.row(r).iter()).map(|(t, v)| (*t, *v)).collect()))
                    .with(Trace::line("posterior mean", d.times.iter().zip(mean.row(0).iter()).map(|(t, v)| (*t, *v)).collect()));
                out.chart(&format!("{name}_mode{}.svg", r + 1), &chart)?;
            }
        }
        Ok(s)
    }
}
