//! Experiment configuration files.
//!
//! A config is a TOML document. Every field has a default, so the smallest
//! useful file is a single line such as `experiment = "ramp"`.

use std::path::{Path, PathBuf};

use eopd_core::analysis::Window;
use eopd_core::calibration::DescentConfig;
use eopd_core::plant::{DriftDistribution, DriftSpec, ModulatorParams};
use eopd_core::sync_loop::{
    LoopConfig, LoopFilter, LoopMode, OffsetProcess, DEFAULT_DAMPING, DEFAULT_DETECTOR_GAIN, DEFAULT_SYMBOL_RATE,
    DEFAULT_VCO_GAIN,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Ramp,
    Calibrate,
    Montecarlo,
    Syncloop,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ramp => "ramp",
            ExperimentKind::Calibrate => "calibrate",
            ExperimentKind::Montecarlo => "montecarlo",
            ExperimentKind::Syncloop => "syncloop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub plant: PlantSection,
    pub ramp: RampSection,
    pub calibration: CalibrationSection,
    pub montecarlo: MonteCarloSection,
    pub syncloop: SyncLoopSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 1,
            out: None,
            plant: PlantSection::default(),
            ramp: RampSection::default(),
            calibration: CalibrationSection::default(),
            montecarlo: MonteCarloSection::default(),
            syncloop: SyncLoopSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub v_pi: f64,
    /// Relative detuning applied to all three bias voltages.
    pub bias_detune: f64,
    pub imbalance: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            v_pi: 3.0,
            bias_detune: 0.0,
            imbalance: 0.0,
        }
    }
}

impl PlantSection {
    pub fn nominal(&self) -> ModulatorParams {
        ModulatorParams::nominal(self.v_pi)
    }

    /// The device as configured: nominal with the requested detuning.
    pub fn device(&self) -> ModulatorParams {
        let mut p = self.nominal();
        let scale = 1.0 + self.bias_detune;
        p.alpha_dc *= scale;
        p.beta_dc *= scale;
        p.gamma *= scale;
        p.imbalance = self.imbalance;
        p
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.v_pi.is_finite() && self.v_pi > 0.0) {
            return Err(CliError::config("plant.v_pi must be > 0"));
        }
        if !self.bias_detune.is_finite() || !(self.imbalance.abs() < 1.0) {
            return Err(CliError::config(
                "plant.bias_detune must be finite and |plant.imbalance| < 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampSection {
    /// Control-signal frequency (Hz).
    pub f_con: f64,
    /// Run length (s).
    pub duration: f64,
    pub sample_rate: f64,
    pub radius: f64,
    /// Highest harmonic considered in the suppression figure.
    pub harmonics: usize,
    pub window: Window,
}

impl Default for RampSection {
    fn default() -> Self {
        Self {
            f_con: 1e6,
            duration: 10e-6,
            sample_rate: 64e6,
            radius: 1.0,
            harmonics: 5,
            window: Window::Hann,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Samples in the monitor trace used by the risk.
    pub n_samples: usize,
    /// Control periods spanned by the trace.
    pub periods: f64,
    pub f_con: f64,
    /// Relative drift applied to the five calibrated parameters.
    pub drift_range: f64,
    pub distribution: DriftDistribution,
    pub descent: DescentConfig,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            n_samples: 4096,
            periods: 2.0,
            f_con: 1e6,
            drift_range: 0.3,
            distribution: DriftDistribution::Uniform,
            descent: DescentConfig::default(),
        }
    }
}

impl CalibrationSection {
    pub fn drift(&self, seed: u64) -> DriftSpec {
        DriftSpec {
            relative_range: self.drift_range,
            distribution: self.distribution,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSection {
    pub n_runs: usize,
    /// Worker threads; 1 runs serially. `--parallel` takes precedence.
    /// Left out of the config hash since it never changes the results.
    #[serde(skip_serializing)]
    pub parallel: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            n_runs: 1000,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncLoopSection {
    pub symbol_rate: f64,
    pub samples_per_symbol: usize,
    pub n_symbols: usize,
    pub offset: OffsetProcess,
    pub detector_gain: f64,
    /// Actuator gain (Hz/V).
    pub vco_gain: f64,
    /// Loop natural frequency (Hz); the PI gains are designed from it.
    pub natural_frequency: f64,
    pub damping: f64,
    pub mode: LoopMode,
    /// Run open and closed loop on the same seed.
    pub paired: bool,
    pub radius: f64,
}

impl Default for SyncLoopSection {
    fn default() -> Self {
        Self {
            symbol_rate: DEFAULT_SYMBOL_RATE,
            samples_per_symbol: 16,
            n_symbols: 10_000,
            offset: OffsetProcess::default(),
            detector_gain: DEFAULT_DETECTOR_GAIN,
            vco_gain: DEFAULT_VCO_GAIN,
            natural_frequency: DEFAULT_SYMBOL_RATE / 2000.0,
            damping: DEFAULT_DAMPING,
            mode: LoopMode::Closed,
            paired: false,
            radius: 1.0,
        }
    }
}

impl SyncLoopSection {
    pub fn loop_config(&self, mode: LoopMode, seed: u64, v_pi: f64) -> LoopConfig {
        LoopConfig {
            symbol_rate: self.symbol_rate,
            samples_per_symbol: self.samples_per_symbol,
            n_symbols: self.n_symbols,
            offset_process: self.offset,
            detector_gain: self.detector_gain,
            loop_filter: LoopFilter::design(self.natural_frequency, self.damping, self.detector_gain, self.vco_gain),
            vco_gain: self.vco_gain,
            mode,
            seed,
            v_pi,
            radius: self.radius,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks that apply to every experiment kind.
    pub fn validate_common(&self) -> Result<(), CliError> {
        self.plant.validate()
    }

    /// SHA-256 of the resolved config as JSON, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("experiment = \"ramp\"").unwrap();
        assert_eq!(cfg.experiment, Some(ExperimentKind::Ramp));
        assert_eq!(cfg.ramp, RampSection::default());
        assert_eq!(cfg.calibration.descent, DescentConfig::default());
        assert_eq!(cfg.seed, 1);
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            experiment = "syncloop"
            seed = 7
            [calibration.descent]
            mu = 0.1
            [syncloop]
            mode = "open"
            offset = { kind = "random_walk", diffusion = 1e3 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.calibration.descent.mu, 0.1);
        assert_eq!(cfg.calibration.descent.epochs, 500);
        assert_eq!(cfg.syncloop.mode, LoopMode::Open);
        assert_eq!(cfg.syncloop.offset, OffsetProcess::RandomWalk { diffusion: 1e3 });
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_toml("experiment = \"ramp\"\n[ramp]\nfcon = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"sweep\"").is_err());
    }

    #[test]
    fn hash_ignores_output_directory_but_not_seed() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out: Some("elsewhere".into()),
            ..a.clone()
        };
        let c = ExperimentConfig { seed: 2, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn detuned_device() {
        let p = PlantSection {
            bias_detune: 0.05,
            ..Default::default()
        };
        let d = p.device();
        assert!((d.alpha_dc - (-3.15)).abs() < 1e-12);
        assert!((d.gamma - 1.575).abs() < 1e-12);
    }
}
