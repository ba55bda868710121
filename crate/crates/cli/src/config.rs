//! JSON pipeline configuration. Every field has a default, so a config file
//! only lists what it changes; command-line flags override it.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use svkit::calfuse::{QmSet, DEFAULT_L2};
use svkit::coral::CoralPlusConfig;
use svkit::plda::PldaTrainConfig;
use svkit::synth::ShiftConfig;
use svkit::CostParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub length_norm: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { length_norm: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    /// Defaults to the first target prior of `cost`.
    pub prior: Option<f64>,
    pub l2: f64,
    pub use_qm: bool,
    pub qm: QmSet,
    /// `:`-separated partition fields to calibrate on separately; `None` = global only.
    pub partition_fields: Option<Vec<usize>>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            prior: None,
            l2: DEFAULT_L2,
            use_qm: false,
            qm: QmSet::default(),
            partition_fields: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preprocess: PreprocessOptions,
    pub plda: PldaTrainConfig,
    pub coral_plus: CoralPlusConfig,
    pub cost: CostParams,
    pub calibration: CalibrationOptions,
    pub synth: ShiftConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            preprocess: PreprocessOptions::default(),
            plda: PldaTrainConfig::default(),
            coral_plus: CoralPlusConfig::default(),
            cost: CostParams::default(),
            calibration: CalibrationOptions::default(),
            synth: ShiftConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg: Self = serde_json::from_str(&text).map_err(svkit::Error::from)?;
                Ok(cfg)
            }
        }
    }

    pub fn calibration_prior(&self) -> f64 {
        self.calibration.prior.unwrap_or(self.cost.target_priors[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_reparses() {
        let mut cfg = PipelineConfig::default();
        cfg.calibration.partition_fields = Some(vec![0, 1]);
        cfg.cost.target_priors = vec![0.05];
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"coral_plus": {"gamma": 0.1, "beta": 0.2}}"#).unwrap();
        assert_eq!(cfg.coral_plus.gamma, 0.1);
        assert_eq!(cfg.cost, CostParams::default());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"gama": 1}"#).is_err());
    }
}
