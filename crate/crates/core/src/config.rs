//! Experiment configuration: one TOML document covering the scenario, the
//! network engine, the scheduler, the agent, the map database and the task
//! profiles. Defaults match the reference operating point.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, NormalizationBounds};
use crate::mapcore::MapConfig;
use crate::scenario::{default_profiles, ObservationNoise, ProfileTable, Scenario};
use crate::scheduler::SchedulerConfig;
use crate::simnet::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Head,
    Eo,
    Lp,
    Ro,
    Rm,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Head => "head",
            PolicyKind::Eo => "eo",
            PolicyKind::Lp => "lp",
            PolicyKind::Ro => "ro",
            PolicyKind::Rm => "rm",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(PolicyKind::Head),
            "eo" => Ok(PolicyKind::Eo),
            "lp" => Ok(PolicyKind::Lp),
            "ro" => Ok(PolicyKind::Ro),
            "rm" => Ok(PolicyKind::Rm),
            other => Err(ConfigError::Invalid(format!("unknown policy '{other}'"))),
        }
    }
}

/// Training-loop knobs on top of the agent hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of offloading decisions to run the training loop for.
    pub train_steps: u64,
    /// Minibatch updates happen every this many completed decisions.
    pub train_every: u64,
    /// Checkpoint snapshot period, in decisions.
    pub snapshot_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { train_steps: 100_000, train_every: 1, snapshot_every: 10_000 }
    }
}

/// Feature-extractor pretraining knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub sample_count: usize,
    pub learning_rate: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { hidden: 128, epochs: 40, sample_count: 256, learning_rate: 2e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub policies: Vec<PolicyKind>,
    /// Gap a vehicle waits after a completion before requesting again.
    pub request_gap_ms: i64,
    /// Duration of the random pre-run that generates the regression
    /// baseline's training set.
    pub rm_fit_duration_ms: i64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policies: vec![
                PolicyKind::Head,
                PolicyKind::Eo,
                PolicyKind::Lp,
                PolicyKind::Ro,
                PolicyKind::Rm,
            ],
            request_gap_ms: 0,
            rm_fit_duration_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub sim: SimConfig,
    pub scheduler: SchedulerConfig,
    pub agent: AgentConfig,
    pub bounds: NormalizationBounds,
    pub train: TrainConfig,
    pub vae: VaeConfig,
    pub map: MapConfig,
    pub noise: ObservationNoise,
    pub profiles: ProfileTable,
    pub eval: EvalConfig,
    /// Cell size of scheduling coverage grids, meters.
    pub coverage_cell_m: f64,
    /// Half-extent of the coverage grid, meters.
    pub coverage_half_extent_m: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: Scenario::default(),
            sim: SimConfig::default(),
            scheduler: SchedulerConfig::default(),
            agent: AgentConfig::default(),
            bounds: NormalizationBounds::default(),
            train: TrainConfig::default(),
            vae: VaeConfig::default(),
            map: MapConfig::default(),
            noise: ObservationNoise::default(),
            profiles: default_profiles(),
            eval: EvalConfig::default(),
            coverage_cell_m: 0.5,
            coverage_half_extent_m: 210.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scenario.n_vehicles == 0 {
            return Err(ConfigError::Invalid("scenario.n_vehicles must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.scheduler.beta) {
            return Err(ConfigError::Invalid("scheduler.beta must be in [0, 1]".into()));
        }
        if self.sim.tick_ms <= 0 {
            return Err(ConfigError::Invalid("sim.tick_ms must be positive".into()));
        }
        if self.sim.server_count == 0 {
            return Err(ConfigError::Invalid("sim.server_count must be >= 1".into()));
        }
        if !(self.agent.gamma >= 0.0 && self.agent.gamma < 1.0) {
            return Err(ConfigError::Invalid("agent.gamma must be in [0, 1)".into()));
        }
        self.profiles.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioKind;

    #[test]
    fn defaults_match_reference_operating_point() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.scheduler.beta, 0.8);
        assert_eq!(cfg.agent.gamma, 0.9);
        assert_eq!(cfg.agent.learning_rate, 5e-4);
        assert_eq!(cfg.agent.batch_size, 512);
        assert_eq!(cfg.agent.epsilon_start, 0.5);
        assert_eq!(cfg.agent.epsilon_end, 0.1);
        assert_eq!(cfg.agent.hidden, vec![256, 256]);
        assert_eq!(cfg.agent.n_actions, 5);
        assert_eq!(cfg.train.train_steps, 100_000);
        assert_eq!(cfg.sim.tick_ms, 1);
        assert_eq!(cfg.sim.uplink_bw_hz, 1e6);
        assert_eq!(cfg.sim.downlink_bw_hz, 1e6);
        assert_eq!(cfg.sim.tx_power_dbm_min, 1.0);
        assert_eq!(cfg.sim.tx_power_dbm_max, 22.0);
        assert_eq!(cfg.sim.noise_dbm_per_hz, -174.0);
        assert_eq!(cfg.map.ttl_ms, 3_600_000);
        assert_eq!(cfg.profiles.rows[1].onboard_ms_mean, 77.4);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 9
            [scenario]
            kind = "highway"
            n_vehicles = 5
            n_objects = 10
            duration_ms = 1000
            frame_period_ms = 100
            seed = 9
            [scheduler]
            beta = 0.6
            epoch_period_ms = 1000
            backoff_ms = 500
            recompute_overlap = true
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scenario.kind, ScenarioKind::Highway);
        assert_eq!(cfg.scheduler.beta, 0.6);
        // Untouched sections keep defaults.
        assert_eq!(cfg.agent.batch_size, 512);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.scheduler.beta = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.n_vehicles = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sim.server_count = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn policy_names_parse() {
        for (s, k) in [
            ("head", PolicyKind::Head),
            ("EO", PolicyKind::Eo),
            ("lp", PolicyKind::Lp),
            ("ro", PolicyKind::Ro),
            ("rm", PolicyKind::Rm),
        ] {
            assert_eq!(PolicyKind::parse(s).unwrap(), k);
        }
        assert!(PolicyKind::parse("nope").is_err());
    }
}
