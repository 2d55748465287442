//! Experiment configuration: TOML schema, defaults, validation and hashing.
//!
//! Frequencies are given in millihartree (`omega_mh`) and converted once on
//! load; every other quantity is in atomic units. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::ThermostatParams;
use crate::error::{Error, Result};
use crate::grid::make_grid;
use crate::hartree::{CavityHartree, CavityMode, ScfOptions};
use crate::par::Execution;
use crate::shin_metiu::{ShinMetiu, ShinMetiuParams};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CAVITY_MD_OUTPUT_DIR";

pub const MH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub molecule: ShinMetiuParams,
    pub grid: GridConfig,
    pub cavity: Vec<CavityConfig>,
    pub ensemble: EnsembleConfig,
    pub thermostat: ThermostatConfig,
    pub scf: ScfOptions,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_points: usize,
    /// bohr
    pub spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityConfig {
    /// Mode frequency in mH.
    pub omega_mh: f64,
    #[serde(default)]
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationMode {
    Aligned,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    #[serde(alias = "N")]
    pub n_molecules: usize,
    pub orientation: OrientationMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermostatConfig {
    /// k_B T in hartree.
    pub kt: f64,
    pub gamma: f64,
    pub dt: f64,
    pub tau_r: f64,
    /// Rotational diffusion on/off; unset means on for random orientations only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotations: Option<bool>,
}

/// Where the cavity coordinate starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotonStart {
    /// Thermal spread around the relaxed displacement q* = (X + x)/ω.
    Equilibrium,
    /// Thermal spread around q = 0.
    Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_steps: usize,
    pub stride: usize,
    pub polarization_diagnostics: bool,
    pub burn_in: usize,
    pub photon_start: PhotonStart,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("output"),
            molecule: ShinMetiuParams::default(),
            grid: GridConfig::default(),
            cavity: vec![CavityConfig {
                omega_mh: 6.27,
                lambda: 0.0,
            }],
            ensemble: EnsembleConfig::default(),
            thermostat: ThermostatConfig::default(),
            scf: ScfOptions::default(),
            run: RunConfig::default(),
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_points: 41,
            spacing: 0.8,
        }
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_molecules: 1,
            orientation: OrientationMode::Aligned,
        }
    }
}

impl Default for ThermostatConfig {
    fn default() -> Self {
        Self {
            kt: 0.5e-3,
            gamma: 0.3e-5,
            dt: 50.0,
            tau_r: 0.5e-5,
            rotations: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_steps: 2000,
            stride: 1,
            polarization_diagnostics: false,
            burn_in: 0,
            photon_start: PhotonStart::Equilibrium,
            execution: Execution::Parallel,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be non-negative, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.molecule.validate()?;
        if self.grid.n_points < 3 {
            return Err(Error::validation("grid.n_points", "must be at least 3"));
        }
        positive("grid.spacing", self.grid.spacing)?;
        if self.cavity.is_empty() {
            return Err(Error::validation("cavity", "at least one mode is required"));
        }
        for (i, c) in self.cavity.iter().enumerate() {
            positive(&format!("cavity[{i}].omega_mh"), c.omega_mh)?;
            non_negative(&format!("cavity[{i}].lambda"), c.lambda)?;
        }
        if self.ensemble.n_molecules == 0 {
            return Err(Error::validation("ensemble.n_molecules", "must be at least 1"));
        }
        non_negative("thermostat.kt", self.thermostat.kt)?;
        non_negative("thermostat.gamma", self.thermostat.gamma)?;
        positive("thermostat.dt", self.thermostat.dt)?;
        non_negative("thermostat.tau_r", self.thermostat.tau_r)?;
        self.scf.validate()?;
        if self.run.stride == 0 {
            return Err(Error::validation("run.stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Cavity modes in hartree.
    pub fn modes(&self) -> Vec<CavityMode> {
        self.cavity
            .iter()
            .map(|c| CavityMode {
                omega: c.omega_mh * MH,
                lambda: c.lambda,
            })
            .collect()
    }

    pub fn thermostat_params(&self) -> ThermostatParams {
        let t = &self.thermostat;
        ThermostatParams {
            kt: t.kt,
            gamma: t.gamma,
            dt: t.dt,
            tau_r: t.tau_r,
            rotations_enabled: t
                .rotations
                .unwrap_or(self.ensemble.orientation == OrientationMode::Random),
        }
    }

    pub fn build_molecule(&self) -> Result<ShinMetiu> {
        ShinMetiu::new(self.molecule, make_grid(self.grid.n_points, self.grid.spacing)?)
    }

    pub fn build_solver(&self) -> Result<CavityHartree> {
        Ok(CavityHartree::new(self.build_molecule()?, self.modes(), self.scf)?.with_execution(self.run.execution))
    }

    /// Canonical TOML text.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization failed: {e}")))
    }

    /// SHA-256 of the canonical TOML of everything except `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml_string()?.as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        Ok(s)
    }
}

/// Parses and validates TOML text; no environment lookup.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_column(text, s.start)).unwrap_or((0, 0));
        Error::ConfigParse {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file and applies the `CAVITY_MD_OUTPUT_DIR` override.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// λ₁/√N for random orientations, λ₁/√(2N) for aligned ones.
pub fn lambda_for_n(lambda_1: f64, n: usize, mode: OrientationMode) -> f64 {
    let n = n.max(1) as f64;
    match mode {
        OrientationMode::Random => lambda_1 / n.sqrt(),
        OrientationMode::Aligned => lambda_1 / (2.0 * n).sqrt(),
    }
}
