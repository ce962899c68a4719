//! TOML run configuration shared by every command.

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::diffusion::{self, DenoiserConfig, NoiseSchedule, TrainConfig, TransitionVariance};
use crate::dynamics::{self, ActionLimits};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::metrics::MetricsConfig;
use crate::simulate::{EgoParams, SimConfig, StopMode};
use crate::world::ContextConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub dt: f64,
    /// Planning horizon `T` in steps.
    pub horizon: usize,
    pub limits: ActionLimits,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            dt: dynamics::DEFAULT_DT,
            horizon: dynamics::DEFAULT_HORIZON,
            limits: ActionLimits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Number of diffusion steps `K`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub state_loss_weight: f64,
    pub variance: TransitionVariance,
    pub context: ContextConfig,
    pub train: TrainConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            steps: diffusion::DEFAULT_STEPS,
            beta_min: diffusion::DEFAULT_BETA_MIN,
            beta_max: diffusion::DEFAULT_BETA_MAX,
            embed_dim: d.embed_dim,
            hidden: d.hidden,
            state_loss_weight: d.state_loss_weight,
            variance: d.variance,
            context: d.context,
            train: TrainConfig::default(),
        }
    }
}

/// Half-open seed range `start..start + count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> Vec<u64> {
        (self.start..self.start + self.count).collect()
    }

    /// Parse `a..b` (exclusive end) or a single seed `a`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid seed range '{text}', expected a..b"));
        match text.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b <= a {
                    return Err(bad());
                }
                Ok(Self { start: a, count: b - a })
            }
            None => Ok(Self {
                start: text.trim().parse().map_err(|_| bad())?,
                count: 1,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Maximum episode length in steps.
    pub steps: usize,
    pub replan_every: usize,
    pub stop_mode: StopMode,
    pub ego: EgoParams,
    /// Size of the generated evaluation battery.
    pub scenarios: usize,
    pub battery_seed: u64,
    pub seeds: SeedRange,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            steps: s.steps,
            replan_every: s.replan_every,
            stop_mode: s.stop_mode,
            ego: s.ego,
            scenarios: 20,
            battery_seed: 0,
            seeds: SeedRange { start: 0, count: 10 },
        }
    }
}

/// Complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dynamics: DynamicsSection,
    /// Corpus generator; its `dt` and `limits` must agree with `dynamics`.
    pub data: DatasetConfig,
    pub diffusion: DiffusionSection,
    pub guidance: GuidanceConfig,
    pub simulation: SimulationSection,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dynamics;
        if !(d.dt > 0.0) || d.horizon == 0 {
            return Err(Error::Config("dynamics dt and horizon must be positive".into()));
        }
        d.limits.validate()?;
        if self.data.dt != d.dt || self.data.limits != d.limits {
            return Err(Error::Config("data dt and limits must match the dynamics section".into()));
        }
        self.data.validate()?;
        self.denoiser()?.validate()?;
        self.schedule()?;
        self.diffusion.train.validate()?;
        self.guidance.validate()?;
        self.sim_config().validate()?;
        if self.simulation.scenarios == 0 || self.simulation.seeds.count == 0 {
            return Err(Error::Config("need at least one scenario and one seed".into()));
        }
        if self.simulation.replan_every > d.horizon {
            return Err(Error::Config("replan interval exceeds the planning horizon".into()));
        }
        self.metrics.validate()
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let s = &self.diffusion;
        Ok(DenoiserConfig {
            horizon: self.dynamics.horizon,
            dt: self.dynamics.dt,
            context: s.context,
            embed_dim: s.embed_dim,
            hidden: s.hidden.clone(),
            state_loss_weight: s.state_loss_weight,
            variance: s.variance,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        diffusion::make_schedule(self.diffusion.steps, self.diffusion.beta_min, self.diffusion.beta_max)
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            steps: s.steps,
            replan_every: s.replan_every,
            stop_mode: s.stop_mode,
            ego: s.ego.clone(),
            limits: self.dynamics.limits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml("[guidance]\nomega_d = 2.5\n[diffusion.train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.guidance.omega_d, 2.5);
        assert_eq!(cfg.diffusion.train.steps, 7);
        assert_eq!(cfg.diffusion.train.batch_size, 64);
        assert_eq!(cfg.metrics, MetricsConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[guidance]\nomega_x = 1.0\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[diffusion]\nbeta_max = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[simulation.ego]\ncruise_speed = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[dynamics]\ndt = 0.05\n").is_err());
        assert!(RunConfig::from_toml("[metrics]\nbins = 0\n").is_err());
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(SeedRange::parse("3..7").unwrap().seeds(), vec![3, 4, 5, 6]);
        assert_eq!(SeedRange::parse("9").unwrap().seeds(), vec![9]);
        assert!(SeedRange::parse("5..5").is_err());
        assert!(SeedRange::parse("a..b").is_err());
    }
}
