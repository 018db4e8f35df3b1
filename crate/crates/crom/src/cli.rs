//! The `crom` command line. Every subcommand writes its outputs into one
//! directory together with the fully resolved configuration it ran with.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use crom_core::basis::{fourier_basis, pod_basis, project, Basis, BasisKind};
use crom_core::causal::causation_entropy;
use crom_core::diagnostics::{acf, local_extrema, lyapunov_spectrum, pdf_estimate, EnergyAccumulator, LyapunovOptions};
use crom_core::enkbf::{enkbf_run, EnkbfOptions, ObservationStream};
use crom_core::galerkin::{
    fourier_galerkin, generic_initial_state, pod_galerkin, simulate_model, threshold_model, SimulationOptions,
};
use crom_core::kse::{cosine_initial_condition, kinetic_energy, simulate_kse};
use crom_core::library::build_library;
use crom_core::mle::{fit_mle, regression_factor};
use crom_core::selection::{select_structure, LargestGap};
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{experiment_registry, run_experiment, Artifacts, Scale};
use crate::io::{self, NamedMatrix};
use crate::plot::{Chart, Trace};

#[derive(Debug, Parser)]
#[command(name = "crom", version, about = "Sparse stochastic reduced-order models of the Kuramoto-Sivashinsky equation")]
pub struct Cli {
    /// Run configuration (TOML); missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also write CSV mirrors of binary artifacts.
    #[arg(long, global = true)]
    pub csv: bool,
    /// Output directory (overrides `output.dir`).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the KSE from the cosine profile and save the training window.
    Simulate(SimulateArgs),
    /// Build a Fourier or POD basis from a field file.
    Basis(BasisArgs),
    /// Project a field onto a basis.
    Project(ProjectArgs),
    /// Galerkin model of a basis, optionally thresholded and refit.
    Galerkin(GalerkinArgs),
    /// Causation entropy matrix and the selected structure.
    Centropy(CentropyArgs),
    /// Maximum-likelihood fit of a structure.
    Fit(FitArgs),
    /// Integrate a model.
    RomSim(RomSimArgs),
    /// EnKBF estimate of the unobserved components.
    Assimilate(AssimilateArgs),
    /// Spectrum, PDF, ACF, extrema and Lyapunov exponents.
    Stats(StatsArgs),
    /// Canned end-to-end experiments.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub t_start: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Solver steps between saved snapshots.
    #[arg(long)]
    pub save_stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// `fourier` or `pod`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub snapshot_stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
}

#[derive(Debug, Args)]
pub struct GalerkinArgs {
    #[arg(long)]
    pub basis: PathBuf,
    /// Remove this fraction of coefficients by magnitude and refit the rest.
    #[arg(long, requires = "series")]
    pub threshold: Option<f64>,
    /// Training series for the refit.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct StrategyArgs {
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub global_sparsity: Option<f64>,
    #[arg(long)]
    pub per_eq_sparsity: Option<f64>,
    /// Threshold in the widest gap above this floor (bits).
    #[arg(long)]
    pub largest_gap: Option<f64>,
}

impl StrategyArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let pick = [
            ("global_threshold", self.theta),
            ("global_sparsity", self.global_sparsity),
            ("per_equation_sparsity", self.per_eq_sparsity),
            ("largest_gap", self.largest_gap),
        ];
        if let Some((name, Some(v))) = pick.into_iter().find(|(_, v)| v.is_some()) {
            cfg.selection.strategy = name.into();
            cfg.selection.params = vec![v];
        }
    }
}

#[derive(Debug, Args)]
pub struct CentropyArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub structure: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    /// Fit a constant forcing per equation.
    #[arg(long)]
    pub constant: bool,
    /// `central` or `forward`.
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Debug, Args)]
pub struct RomSimArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Start from the last state of this series instead of a generic state.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub save_stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AssimilateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Series whose leading `observed` rows are the observations; the
    /// remaining rows, if present, are used as truth for error reporting.
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub observed: Option<usize>,
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// `kalman_bucy` or `literal`.
    #[arg(long)]
    pub gain: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, conflicts_with = "field")]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Model for Lyapunov exponents, started from the last series state.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub lyapunov_k: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub lyapunov_window: f64,
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    /// Largest ACF lag in samples.
    #[arg(long, default_value_t = 1000)]
    pub max_lag: usize,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// `fourier-recovery`, `pod-hierarchy` or `da-partial`.
    pub experiment: String,
    #[arg(long, conflicts_with = "smoke")]
    pub desk: bool,
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parse, run and map failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    cfg.output.csv |= cli.csv;
    match cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Basis(a) => basis(cfg, a),
        Command::Project(a) => project_cmd(cfg, a),
        Command::Galerkin(a) => galerkin(cfg, a),
        Command::Centropy(a) => centropy(cfg, a),
        Command::Fit(a) => fit(cfg, a),
        Command::RomSim(a) => rom_sim(cfg, a),
        Command::Assimilate(a) => assimilate(cfg, a),
        Command::Stats(a) => stats(cfg, a),
        Command::Repro(a) => repro(cfg, a),
    }
}

fn outputs(cfg: &RunConfig, command: &str) -> Result<Artifacts> {
    let out = Artifacts::new(&cfg.output.dir, cfg.output.csv)?;
    cfg.save(out.dir(), &format!("{command}.toml"))?;
    Ok(out)
}

fn check_fraction(flag: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Usage(format!("--{flag} must lie in [0, 1), got {v}")))
    }
}

fn simulate(mut cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    if let Some(v) = a.nu {
        cfg.kse.nu = v;
    }
    if let Some(v) = a.t_start {
        cfg.training.t_start = v;
    }
    if let Some(v) = a.t_end {
        cfg.training.t_end = v;
    }
    if let Some(v) = a.save_stride {
        cfg.training.save_stride = v;
    }
    let p = cfg.kse_params();
    p.validate()?;
    let t = &cfg.training;
    if !(t.t_end > t.t_start && t.t_start >= 0.0) || t.save_stride == 0 {
        return Err(Error::Usage("need 0 <= t_start < t_end and save_stride >= 1".into()));
    }
    let mut out = outputs(&cfg, "simulate")?;
    let field = simulate_kse(p, &cosine_initial_condition(&p), t.t_end, t.save_stride, t.t_start)?;
    let path = out.dir().join("field.crom");
    io::write_field(&path, &field)?;
    if cfg.output.csv {
        out.text("field.csv", &io::field_csv(&field))?;
    }
    println!("wrote {} ({} snapshots)", path.display(), field.len());
    Ok(())
}

fn basis(mut cfg: RunConfig, a: BasisArgs) -> Result<()> {
    if let Some(v) = a.kind {
        cfg.basis.kind = v;
    }
    if let Some(v) = a.size {
        cfg.basis.size = v;
    }
    if let Some(v) = a.snapshot_stride {
        cfg.basis.snapshot_stride = v;
    }
    let field = io::read_field(&a.field)?;
    let p = cfg.kse_params();
    let b = match cfg.basis.kind.as_str() {
        "fourier" => {
            if cfg.basis.size % 2 != 0 {
                return Err(Error::Usage("a Fourier basis needs an even size".into()));
            }
            fourier_basis(cfg.basis.size / 2, &p)?
        }
        "pod" => pod_basis(&field, cfg.basis.size, cfg.basis.snapshot_stride)?,
        other => return Err(Error::Usage(format!("unknown basis kind `{other}` (fourier or pod)"))),
    };
    let mut out = outputs(&cfg, "basis")?;
    out.basis("basis", &b)?;
    if let Some(f) = b.captured_energy_fraction(b.size().min(3)) {
        println!("first {} modes capture {:.2}% of the energy", b.size().min(3), 100.0 * f);
    }
    Ok(())
}

fn project_cmd(cfg: RunConfig, a: ProjectArgs) -> Result<()> {
    let field = io::read_field(&a.field)?;
    let b = io::read_basis(&a.basis)?;
    let s = project(&field, &b)?;
    let mut out = outputs(&cfg, "project")?;
    out.series("series", &s)?;
    Ok(())
}

fn galerkin(cfg: RunConfig, a: GalerkinArgs) -> Result<()> {
    let b: Basis = io::read_basis(&a.basis)?;
    let p = cfg.kse_params();
    let model = match b.kind {
        BasisKind::Fourier => fourier_galerkin(b.pairs, &p)?,
        BasisKind::Pod => pod_galerkin(&b, &p)?,
    };
    let mut out = outputs(&cfg, "galerkin")?;
    out.model("galerkin", &model)?;
    println!("galerkin model: {} terms", model.term_count());
    if let (Some(f), Some(sp)) = (a.threshold, a.series) {
        check_fraction("threshold", f)?;
        let series = io::read_series(&sp)?;
        let lib = build_library(model.n())?;
        let t = threshold_model(&model, &lib, f, &series, &cfg.fit_options())?;
        out.model("thresholded", &t)?;
        println!("thresholded model: {} terms", t.term_count());
    }
    Ok(())
}

fn centropy(mut cfg: RunConfig, a: CentropyArgs) -> Result<()> {
    a.strategy.apply(&mut cfg);
    if let Some(s) = a.scheme {
        cfg.fit.scheme = s;
    }
    let series = io::read_series(&a.series)?;
    let lib = build_library(series.dim())?;
    let factor = regression_factor(&lib, &series, &cfg.fit_options())?;
    let cem = causation_entropy(&factor)?;
    let sel = &cfg.selection;
    let structure = select_structure(&cem, &sel.strategy, &sel.params)?;
    let mut out = outputs(&cfg, "centropy")?;
    out.matrix(
        "cem",
        &NamedMatrix {
            values: cem.values.clone(),
            note: "causation entropy (bits), rows = equations".into(),
        },
        Some(&io::library_header(&lib)),
    )?;
    out.structure("structure", &structure, &lib)?;
    if sel.strategy == "largest_gap" {
        println!("gap threshold {:.6} bits", LargestGap { floor: sel.params[0] }.threshold(&cem));
    }
    println!("{}: {} of {} terms selected", sel.strategy, structure.count(), cem.n() * cem.m());
    Ok(())
}

fn fit(mut cfg: RunConfig, a: FitArgs) -> Result<()> {
    cfg.fit.include_constant |= a.constant;
    if let Some(s) = a.scheme {
        cfg.fit.scheme = s;
    }
    let series = io::read_series(&a.series)?;
    let sm = io::read_matrix(&a.structure)?;
    let structure = io::structure_from_matrix(&a.structure, &sm)?;
    let lib = build_library(series.dim())?;
    if structure.n() != lib.n() || structure.m() != lib.len() {
        return Err(Error::format(&a.structure, format!("structure is {}x{} but the series needs {}x{}", structure.n(), structure.m(), lib.n(), lib.len())));
    }
    let model = fit_mle(&structure, &lib, &series, &cfg.fit_options())?;
    let mut out = outputs(&cfg, "fit")?;
    out.model("model", &model)?;
    println!("fitted {} terms", model.term_count());
    Ok(())
}

fn last_state(path: &Path, n: usize) -> Result<Vec<f64>> {
    let s = io::read_series(path)?;
    if s.dim() != n {
        return Err(Error::format(path, format!("series has dimension {} but the model has {n}", s.dim())));
    }
    Ok(s.state(s.len() - 1).to_vec())
}

fn rom_sim(mut cfg: RunConfig, a: RomSimArgs) -> Result<()> {
    if let Some(v) = a.t_end {
        cfg.rom.t_end = v;
    }
    if let Some(v) = a.dt {
        cfg.rom.dt = v;
    }
    if let Some(v) = a.save_stride {
        cfg.rom.save_stride = v;
    }
    if let Some(v) = a.seed {
        cfg.seeds.simulation = v;
    }
    let model = io::read_model(&a.model)?;
    let a0 = match &a.init {
        Some(p) => last_state(p, model.n())?,
        None => generic_initial_state(model.n()),
    };
    let opts = SimulationOptions {
        t_end: cfg.rom.t_end,
        dt: cfg.rom.dt,
        seed: cfg.seeds.simulation,
        save_stride: cfg.rom.save_stride,
        t_start_save: 0.0,
    };
    let series = simulate_model(&model, &a0, &opts, "rom")?;
    let mut out = outputs(&cfg, "rom-sim")?;
    out.series("rom_series", &series)?;
    Ok(())
}

fn assimilate(mut cfg: RunConfig, a: AssimilateArgs) -> Result<()> {
    if let Some(v) = a.observed {
        cfg.da.observed = v;
    }
    if let Some(v) = a.members {
        cfg.da.members = v;
    }
    if let Some(v) = a.t_end {
        cfg.da.t_end = v;
    }
    if let Some(v) = a.gain {
        cfg.da.gain = v;
    }
    if let Some(v) = a.seed {
        cfg.seeds.assimilation = v;
    }
    let model = io::read_model(&a.model)?;
    let series = io::read_series(&a.obs)?;
    let r = cfg.da.observed;
    if r == 0 || r >= model.n() || series.dim() < r {
        return Err(Error::Usage(format!("need 1 <= observed < {} and at least that many series rows", model.n())));
    }
    let t0 = series.times[0];
    let len = series.times.iter().take_while(|t| **t <= t0 + cfg.da.t_end + 1e-9).count();
    let obs = ObservationStream::new(series.times[..len].to_vec(), series.values.view((0, 0), (r, len)).into_owned())?;
    let opts = EnkbfOptions {
        members: cfg.da.members,
        seed: cfg.seeds.assimilation,
        gain: cfg.da.gain.clone(),
        reg: cfg.regularization(),
        ..Default::default()
    };
    let res = enkbf_run(&model, &obs, &opts)?;
    let mut out = outputs(&cfg, "assimilate")?;
    let header = std::iter::once("t".to_string())
        .chain((r + 1..=model.n()).map(|k| format!("a{k}")))
        .collect::<Vec<_>>()
        .join(",");
    let with_time = |m: &DMatrix<f64>| DMatrix::from_fn(m.ncols(), m.nrows() + 1, |j, c| if c == 0 { res.times[j] } else { m[(c - 1, j)] });
    out.matrix("posterior_mean", &NamedMatrix { values: with_time(&res.mean), note: "posterior mean".into() }, Some(&header))?;
    out.matrix("posterior_spread", &NamedMatrix { values: with_time(&res.spread), note: "ensemble spread".into() }, Some(&header))?;
    if series.dim() == model.n() {
        let truth = series.values.view((r, 0), (model.n() - r, len)).into_owned();
        let errors = crom_core::diagnostics::assimilation_errors(&truth, &res.mean)?;
        let m = DMatrix::from_fn(errors.len(), 2, |k, c| if c == 0 { (r + 1 + k) as f64 } else { errors[k] });
        out.matrix("errors", &NamedMatrix { values: m, note: "relative L2 error per mode".into() }, Some("mode,error"))?;
        for (k, e) in errors.iter().enumerate() {
            println!("mode {:>2}: relative error {e:.4}", r + 1 + k);
        }
    }
    Ok(())
}

fn stats(cfg: RunConfig, a: StatsArgs) -> Result<()> {
    let (energy, series, dt) = match (&a.series, &a.field) {
        (Some(p), None) => {
            let s = io::read_series(p)?;
            let e: Vec<f64> = (0..s.len()).map(|j| s.state(j).iter().map(|v| v * v).sum()).collect();
            let dt = s.dt();
            (e, Some(s), dt)
        }
        (None, Some(p)) => {
            let f = io::read_field(p)?;
            let dt = if f.len() > 1 { (f.times[f.len() - 1] - f.times[0]) / (f.len() - 1) as f64 } else { 1.0 };
            (kinetic_energy(&f), None, dt)
        }
        _ => return Err(Error::Usage("give exactly one of --series or --field".into())),
    };
    let mut out = outputs(&cfg, "stats")?;
    if let Some(s) = &series {
        let mut acc = EnergyAccumulator::new(s.dim());
        for j in 0..s.len() {
            acc.push(s.times[j], s.state(j));
        }
        let spec = acc.finish()?;
        let m = DMatrix::from_fn(s.dim(), 2, |k, c| if c == 0 { (k + 1) as f64 } else { spec.energies[k] });
        out.matrix("spectrum", &NamedMatrix { values: m, note: "time-mean a_k^2".into() }, Some("mode,E"))?;
        let pts = spec.energies.iter().enumerate().map(|(k, e)| ((k + 1) as f64, *e)).collect();
        out.chart("spectrum.svg", &Chart::new("Energy spectrum", "mode k", "E_k").log_y().with(Trace::points("E_k", pts)))?;
    }
    let h = pdf_estimate(&energy, a.bins)?;
    let centers = h.centers();
    let m = DMatrix::from_fn(centers.len(), 2, |i, c| if c == 0 { centers[i] } else { h.density[i] });
    out.matrix("pdf", &NamedMatrix { values: m, note: "energy density".into() }, Some("E,density"))?;
    let pts = centers.iter().copied().zip(h.density.iter().copied()).collect();
    out.chart("pdf.svg", &Chart::new("PDF of kinetic energy", "E", "density").with(Trace::line("pdf", pts)))?;

    let lags = a.max_lag.min(energy.len().saturating_sub(1));
    let c = acf(&energy, lags)?;
    let m = DMatrix::from_fn(c.len(), 2, |l, k| if k == 0 { l as f64 * dt } else { c[l] });
    out.matrix("acf", &NamedMatrix { values: m, note: "energy autocorrelation".into() }, Some("lag,acf"))?;
    let pts = c.iter().enumerate().map(|(l, v)| (l as f64 * dt, *v)).collect();
    out.chart("acf.svg", &Chart::new("ACF of kinetic energy", "lag", "ACF").with(Trace::line("acf", pts)))?;

    let ext = local_extrema(&energy);
    let m = DMatrix::from_fn(ext.len(), 1, |i, _| ext[i]);
    out.matrix("extrema", &NamedMatrix { values: m, note: "local extrema of E(t)".into() }, Some("E"))?;
    println!("{} energy samples, {} local extrema", energy.len(), ext.len());

    if let Some(mp) = &a.model {
        let model = io::read_model(mp)?;
        let a0 = match &a.series {
            Some(p) => last_state(p, model.n())?,
            None => generic_initial_state(model.n()),
        };
        let opts = LyapunovOptions {
            k: a.lyapunov_k.min(model.n()),
            t_window: a.lyapunov_window,
            dt: cfg.rom.dt,
            renorm_stride: 10,
            transient: 0.0,
        };
        let rep = lyapunov_spectrum(&model, &a0, &opts)?;
        let m = DMatrix::from_fn(rep.exponents.len(), 2, |i, c| if c == 0 { (i + 1) as f64 } else { rep.exponents[i] });
        out.matrix("lyapunov", &NamedMatrix { values: m, note: format!("window {}", rep.window) }, Some("index,exponent"))?;
        println!("lyapunov exponents: {:?}", rep.exponents);
    }
    Ok(())
}

fn repro(mut cfg: RunConfig, a: ReproArgs) -> Result<()> {
    let reg = experiment_registry();
    if !reg.contains(&a.experiment) {
        let names: Vec<&str> = reg.names().collect();
        return Err(Error::Usage(format!("unknown experiment `{}` (one of {})", a.experiment, names.join(", "))));
    }
    let scale = if a.smoke {
        Scale::Smoke
    } else if a.desk {
        Scale::Desk
    } else {
        Scale::Full
    };
    if let Some(s) = a.seed {
        cfg.seeds.simulation = s;
    }
    let mut out = Artifacts::new(&cfg.output.dir, cfg.output.csv)?;
    let summary = run_experiment(&a.experiment, scale, cfg.seeds.simulation, &mut out)?;
    cfg.save(out.dir(), "config.toml")?;
    print!("{}", summary.to_text());
    Ok(())
}
