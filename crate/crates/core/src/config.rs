//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpm::{CpmConfig, CpmTrainConfig};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, TrainConfig};
use crate::pose::ActionParam;
use crate::schedulers::{BetaSchedule, Family};
use crate::sim::SimParams;
use crate::steering::{FlowCoefficient, GuidanceConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Calibrated steering defaults per family `(eta, window)`.
pub const DIFFUSION_GUIDANCE: (f64, f64) = (40.0, 10.0);
pub const FLOW_GUIDANCE: (f64, f64) = (10.0, 0.3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub family: Family,
    pub diffusion_steps: usize,
    pub beta_schedule: BetaSchedule,
    pub flow_steps: usize,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            family: p.family,
            diffusion_steps: p.diffusion_steps,
            beta_schedule: p.beta_schedule,
            flow_steps: p.flow_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub horizon: usize,
    pub action_param: ActionParam,
    pub hidden: usize,
    pub time_frequencies: usize,
    pub execute_steps: usize,
    pub train: TrainConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            horizon: p.horizon,
            action_param: p.action_param,
            hidden: p.hidden,
            time_frequencies: p.time_frequencies,
            execute_steps: p.execute_steps,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpmSection {
    pub model: CpmConfig,
    pub train: CpmTrainConfig,
}

/// Unset fields fall back to the family's calibrated defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub eta: Option<f64>,
    pub window: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub flow_coefficient: FlowCoefficient,
}

impl GuidanceSection {
    pub fn resolve(&self, family: Family) -> GuidanceConfig {
        let (eta, window) = match family {
            Family::Diffusion => DIFFUSION_GUIDANCE,
            Family::Flow => FLOW_GUIDANCE,
        };
        GuidanceConfig {
            eta: self.eta.unwrap_or(eta),
            window: self.window.unwrap_or(window),
            max_grad_norm: self.max_grad_norm,
            flow_coefficient: self.flow_coefficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub demos: usize,
    pub held_out: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { demos: 100, held_out: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub rollouts: usize,
    pub repeats: usize,
    /// Candidates per retrieval query.
    pub retrieval_batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            rollouts: 200,
            repeats: 3,
            retrieval_batch: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub root: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub seeds: SeedSection,
    pub task: SimParams,
    pub data: DataSection,
    pub scheduler: SchedulerSection,
    pub policy: PolicySection,
    pub cpm: CpmSection,
    pub guidance: GuidanceSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/default"),
            seeds: SeedSection::default(),
            task: SimParams::default(),
            data: DataSection::default(),
            scheduler: SchedulerSection::default(),
            policy: PolicySection::default(),
            cpm: CpmSection::default(),
            guidance: GuidanceSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// TOML with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        let mut resolved = self.clone();
        let g = self.guidance();
        resolved.guidance.eta = Some(g.eta);
        resolved.guidance.window = Some(g.window);
        toml::to_string_pretty(&resolved).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.task.validate()?;
        let policy = self.policy_config();
        policy.validate()?;
        self.policy.train.validate()?;
        self.cpm.model.validate()?;
        self.cpm.train.validate()?;
        self.guidance().validate(&policy.schedule()?)?;
        if self.data.demos == 0 || self.eval.rollouts == 0 || self.eval.repeats == 0 {
            return Err(Error::Config("data.demos, eval.rollouts and eval.repeats must be positive".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        self.scheduler.family
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            family: self.scheduler.family,
            horizon: self.policy.horizon,
            action_param: self.policy.action_param,
            hidden: self.policy.hidden,
            time_frequencies: self.policy.time_frequencies,
            diffusion_steps: self.scheduler.diffusion_steps,
            beta_schedule: self.scheduler.beta_schedule,
            flow_steps: self.scheduler.flow_steps,
            execute_steps: self.policy.execute_steps,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        self.guidance.resolve(self.scheduler.family)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml("[policy]\nhorizn = 8\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 7\n").is_err());
    }

    #[test]
    fn resolved_copy_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.scheduler.family = Family::Flow;
        cfg.cpm.model.modality = crate::cpm::Modality::TouchOnly;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.guidance(), cfg.guidance());
        assert_eq!(back.cpm, cfg.cpm);
        assert_eq!(back.policy_config(), cfg.policy_config());
    }
}
