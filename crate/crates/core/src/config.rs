//! Experiment configuration files.
//!
//! TOML with one table per section: `[episode]`, `[radio]`, `[power]`,
//! `[agent]`, `[training]` and `[experiment]`. Every key is optional and
//! falls back to the built-in default. Radio powers and gains are written in
//! dB / dBm and converted to linear units on load:
//!
//! * `noise_power_dbm`, `tx_power_dbm`: watts = 10^((dBm − 30)/10)
//! * `rho_db`, `rician_k_db`: linear = 10^(dB/10)
//!
//! [`ExperimentFile::resolved_toml`] dumps the fully resolved configuration
//! with linear radio values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Hyperparams, TrainConfig};
use crate::channel::{self, DirectConvention, RadioParams};
use crate::energy::UavPowerParams;
use crate::env::EpisodeConfig;
use crate::harness::{ExperimentConfig, PolicyKind, Sweep, SweepVar};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Radio section as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho_db: f64,
    pub alpha: f64,
    pub rician_k_db: f64,
    pub wavelength: f64,
    /// Defaults to half a wavelength.
    pub element_spacing: Option<f64>,
    pub noise_power_dbm: f64,
    pub tx_power_dbm: f64,
    pub elements: usize,
    pub control_bits: u32,
    pub direct_convention: DirectConvention,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            eta1: 11.95,
            eta2: 0.136,
            beta1: 3.0,
            beta2: 0.2,
            rho_db: 10.0,
            alpha: 4.0,
            rician_k_db: 10.0,
            wavelength: 0.1,
            element_spacing: None,
            noise_power_dbm: -110.0,
            tx_power_dbm: 20.0,
            elements: 100,
            control_bits: 2,
            direct_convention: DirectConvention::Literal,
        }
    }
}

impl RadioConfig {
    pub fn resolve(&self) -> RadioParams {
        RadioParams {
            eta1: self.eta1,
            eta2: self.eta2,
            beta1: self.beta1,
            beta2: self.beta2,
            rho: channel::db_to_linear(self.rho_db),
            alpha: self.alpha,
            rician_k: channel::db_to_linear(self.rician_k_db),
            wavelength: self.wavelength,
            element_spacing: self.element_spacing.unwrap_or(self.wavelength / 2.0),
            noise_power: channel::dbm_to_watts(self.noise_power_dbm),
            tx_power: channel::dbm_to_watts(self.tx_power_dbm),
            elements: self.elements,
            control_bits: self.control_bits,
            direct_convention: self.direct_convention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub policies: Vec<PolicyKind>,
    pub sweep_var: Option<SweepVar>,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            policies: PolicyKind::ALL.to_vec(),
            sweep_var: None,
            values: Vec::new(),
            seeds: vec![1],
            eval_episodes: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub episode: EpisodeConfig,
    pub radio: RadioConfig,
    pub power: UavPowerParams,
    pub agent: Hyperparams,
    pub training: TrainConfig,
    pub experiment: ExperimentSection,
}

/// Everything in linear units, for the resolved-config dump.
#[derive(Debug, Serialize)]
struct Resolved<'a> {
    episode: &'a EpisodeConfig,
    radio: RadioParams,
    power: &'a UavPowerParams,
    agent: &'a Hyperparams,
    training: &'a TrainConfig,
    experiment: &'a ExperimentSection,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(&Resolved {
            episode: &self.episode,
            radio: self.radio.resolve(),
            power: &self.power,
            agent: &self.agent,
            training: &self.training,
            experiment: &self.experiment,
        })
        .expect("config serializes")
    }

    pub fn into_experiment(self) -> Result<ExperimentConfig, ConfigError> {
        let sweep = match self.experiment.sweep_var {
            Some(variable) => Some(Sweep {
                variable,
                values: self.experiment.values.clone(),
            }),
            None if self.experiment.values.is_empty() => None,
            None => return Err(ConfigError::Invalid("sweep values given without sweep_var".into())),
        };
        let cfg = ExperimentConfig {
            episode: self.episode,
            radio: self.radio.resolve(),
            power: self.power,
            agent: self.agent,
            training: self.training,
            policies: self.experiment.policies,
            sweep,
            seeds: self.experiment.seeds,
            eval_episodes: self.experiment.eval_episodes,
        };
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_resolve_to_linear_units() {
        let r = RadioConfig::default().resolve();
        assert_relative_eq!(r.noise_power, 1e-14, max_relative = 1e-12);
        assert_relative_eq!(r.tx_power, 0.1, max_relative = 1e-12);
        assert_relative_eq!(r.rho, 10.0, max_relative = 1e-12);
        assert_relative_eq!(r.rician_k, 10.0, max_relative = 1e-12);
        assert_eq!(r.element_spacing, 0.05);
        assert_eq!(r, RadioParams::default());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let f = ExperimentFile::parse(
            r#"
            [episode]
            num_devices = 10
            payload = { kind = "fixed", bits = 60.0 }

            [radio]
            elements = 50

            [experiment]
            policies = ["drl_bcd", "stationary_bcd"]
            sweep_var = "elements"
            values = [0, 50]
            seeds = [3, 4]
            "#,
        )
        .unwrap();
        assert_eq!(f.episode.num_devices, 10);
        assert_eq!(f.episode.horizon, 100);
        let e = f.into_experiment().unwrap();
        assert_eq!(e.radio.elements, 50);
        assert_eq!(e.sweep.unwrap().values, vec![0.0, 50.0]);
        assert_eq!(e.policies, vec![PolicyKind::DrlBcd, PolicyKind::StationaryBcd]);
    }

    #[test]
    fn default_file_round_trips() {
        let f = ExperimentFile::default();
        assert_eq!(ExperimentFile::parse(&f.to_toml()).unwrap(), f);
        let resolved = f.resolved_toml();
        assert!(resolved.contains("noise_power = 0.00000000000001"), "{resolved}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentFile::parse("[radio]\nbogus = 1\n").is_err());
    }

    #[test]
    fn values_need_a_variable() {
        let f = ExperimentFile::parse("[experiment]\nvalues = [1.0]\n").unwrap();
        assert!(matches!(f.into_experiment(), Err(ConfigError::Invalid(_))));
    }
}
