//! Run configuration: `key = value` text with `[section]` headers (TOML).

use std::path::{Path, PathBuf};

use crom_core::enkbf::Regularization;
use crom_core::kse::KseParams;
use crom_core::mle::FitOptions;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KseSection {
    pub nu: f64,
    pub d: f64,
    pub l: f64,
    pub gamma: f64,
    pub dt: f64,
    pub nx: usize,
}

impl Default for KseSection {
    fn default() -> Self {
        let p = KseParams::default();
        Self {
            nu: p.nu,
            d: p.d,
            l: p.l,
            gamma: p.gamma,
            dt: p.dt,
            nx: p.nx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    /// `fourier` or `pod`.
    pub kind: String,
    /// Number of modes (Fourier: twice the number of pairs).
    pub size: usize,
    pub snapshot_stride: usize,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self {
            kind: "pod".into(),
            size: 20,
            snapshot_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub t_start: f64,
    pub t_end: f64,
    /// Solver steps between saved snapshots.
    pub save_stride: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            t_start: 1e4,
            t_end: 1.4e4,
            save_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// `central` or `forward`.
    pub scheme: String,
    pub include_constant: bool,
    /// Sample stride for the drift regression.
    pub stride: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            scheme: "central".into(),
            include_constant: false,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// A registered selection strategy name.
    pub strategy: String,
    pub params: Vec<f64>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            strategy: "per_equation_sparsity".into(),
            params: vec![0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RomSection {
    pub t_end: f64,
    pub dt: f64,
    pub save_stride: usize,
}

impl Default for RomSection {
    fn default() -> Self {
        Self {
            t_end: 1000.0,
            dt: 0.01,
            save_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaSection {
    /// Number of observed leading components.
    pub observed: usize,
    pub members: usize,
    pub t_end: f64,
    pub gain: String,
    pub reg_absolute: f64,
    pub reg_relative: f64,
}

impl Default for DaSection {
    fn default() -> Self {
        let reg = Regularization::default();
        Self {
            observed: 3,
            members: 100,
            t_end: 500.0,
            gain: "kalman_bucy".into(),
            reg_absolute: reg.absolute,
            reg_relative: reg.relative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub simulation: u64,
    pub assimilation: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            simulation: 1,
            assimilation: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write CSV mirrors of binary artifacts.
    pub csv: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kse: KseSection,
    pub basis: BasisSection,
    pub training: TrainingSection,
    pub fit: FitSection,
    pub selection: SelectionSection,
    pub rom: RomSection,
    pub da: DaSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the resolved configuration as `dir/name`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        crate::io::write_text(&path, &self.to_text())?;
        Ok(path)
    }

    pub fn kse_params(&self) -> KseParams {
        let k = &self.kse;
        KseParams {
            nu: k.nu,
            d: k.d,
            l: k.l,
            gamma: k.gamma,
            dt: k.dt,
            nx: k.nx,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            include_constant: self.fit.include_constant,
            known: None,
            derivative_scheme: self.fit.scheme.clone(),
            stride: self.fit.stride,
        }
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            absolute: self.da.reg_absolute,
            relative: self.da.reg_relative,
        }
    }
}
