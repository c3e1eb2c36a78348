//! Run configuration: one TOML file with a section per command.

use std::path::Path;

use qtensor_core::dynamics::SimConfig;
use qtensor_core::limit::SweepConfig;
use serde::{Deserialize, Serialize};

/// Initial data for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialData {
    /// Add the εQ⁽¹⁾_⊥ correction; needs a biaxial minimizer.
    pub prepared: bool,
    pub frame_amplitude: f64,
    pub velocity_amplitude: f64,
    /// Amplitude of sin(k_x x)cos(k_y y) added to every coordinate.
    pub perturbation: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        Self { prepared: true, frame_amplitude: 0.5, velocity_amplitude: 0.1, perturbation: 0.0 }
    }
}

/// Homogeneous relaxation for `relax`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxSettings {
    /// The start is the minimizer scaled by this factor.
    pub scale: f64,
    pub dt: f64,
    pub steps: usize,
}

impl Default for RelaxSettings {
    fn default() -> Self {
        Self { scale: 0.9, dt: 4e-3, steps: 200 }
    }
}

/// Lattice check for `closure-table`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableSettings {
    /// Number of validation states near the minimizer manifold.
    pub samples: usize,
    /// Size of the random off-manifold offset of each validation state.
    pub offset: f64,
}

impl Default for TableSettings {
    fn default() -> Self {
        Self { samples: 32, offset: 0.01 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub initial: InitialData,
    pub relax: RelaxSettings,
    pub table: TableSettings,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.sim.validate().map_err(|e| format!("sim: {e}"))?;
        self.sweep.validate().map_err(|e| format!("sweep: {e}"))?;
        let i = &self.initial;
        if ![i.frame_amplitude, i.velocity_amplitude, i.perturbation].iter().all(|x| x.is_finite()) {
            return Err("initial: amplitudes must be finite".into());
        }
        let r = &self.relax;
        if !(r.scale > 0.0 && r.scale.is_finite()) {
            return Err(format!("relax.scale must be positive (got {})", r.scale));
        }
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return Err(format!("relax.dt must be positive (got {})", r.dt));
        }
        if r.steps == 0 {
            return Err("relax.steps must be at least 1".into());
        }
        if !(self.table.offset >= 0.0 && self.table.offset.is_finite()) {
            return Err(format!("table.offset must be non-negative (got {})", self.table.offset));
        }
        Ok(())
    }
}

/// Parses and validates a TOML document; unknown keys are rejected with their path.
pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        format!("config error at `{path}`: {}", e.into_inner().message().trim())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text)
}

/// The normalized TOML form of a configuration.
pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes to TOML")
}
