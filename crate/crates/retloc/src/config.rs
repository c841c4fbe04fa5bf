//! JSON run configuration for the command-line tools.
//!
//! One file describes a whole synthetic experiment: world, mapping drive,
//! sensor noise, episode shape and the retrieval/filter knobs. Every
//! field has a default, so a config file only states what it overrides;
//! unknown keys are rejected rather than silently ignored.

use crate::sim::{EpisodeConfig, PidGains, SensorNoise, SteerDisturbance, VehicleParams, SIM_DT};
use crate::vocab::{KMEANS_MAX_ITER, VOCAB_K};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_landmarks: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_landmarks: 2000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub laps: usize,
    /// Arc-length spacing between mapping frames, meters.
    pub spacing: f64,
    /// Fraction of frames kept for the map; the rest train the GMM.
    pub mapping_fraction: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            laps: 1,
            spacing: 0.1,
            mapping_fraction: 0.85,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    pub laps: usize,
    pub v_ref: f64,
    pub gains: PidGains,
    pub vehicle: VehicleParams,
    pub disturbance: Option<SteerDisturbance>,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            laps: 1,
            v_ref: 1.0,
            gains: PidGains::default(),
            vehicle: VehicleParams::default(),
            disturbance: None,
        }
    }
}

/// Top-level experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub vocabulary_k: usize,
    pub kmeans_max_iter: usize,
    pub knn_k: usize,
    pub world: WorldConfig,
    pub mapping: MappingConfig,
    pub noise: SensorNoise,
    pub episode: EpisodeSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocabulary_k: VOCAB_K,
            kmeans_max_iter: KMEANS_MAX_ITER,
            knn_k: 10,
            world: WorldConfig::default(),
            mapping: MappingConfig::default(),
            noise: SensorNoise::moderate(),
            episode: EpisodeSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    /// Episode parameters with the file's seed unless overridden.
    pub fn episode_config(&self, seed_override: Option<u64>) -> EpisodeConfig {
        EpisodeConfig {
            laps: self.episode.laps,
            v_ref: self.episode.v_ref,
            dt: SIM_DT,
            gains: self.episode.gains,
            vehicle: self.episode.vehicle,
            disturbance: self.episode.disturbance,
            seed: seed_override.unwrap_or(self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_json() {
        let cfg = PipelineConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        cfg.save(&path).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 9, "mapping": {"spacing": 0.25}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mapping.spacing, 0.25);
        assert_eq!(cfg.mapping.laps, 1);
        assert_eq!(cfg.knn_k, 10);
        assert_eq!(cfg.noise, SensorNoise::moderate());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"sede": 9}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(ConfigError::Json(_))
        ));
    }

    #[test]
    fn seed_override_wins() {
        let cfg = PipelineConfig {
            seed: 4,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.episode_config(None).seed, 4);
        assert_eq!(cfg.episode_config(Some(11)).seed, 11);
        assert_eq!(cfg.episode_config(None).laps, 1);
    }
}
