//! Merged pipeline configuration: defaults, overridden by the config file,
//! overridden by flags. Unknown fields are rejected so typos fail fast.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skillspace::dataset::{DemoCount, SkillSpec};
use skillspace::planner_high::ClientConfig;
use skillspace::vqcnmp::{TrainingConfig, TrainingMode};

use crate::error::{config_err, CliError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub kitchen: KitchenSection,
    pub training: TrainingSection,
    pub sweep: SweepSection,
    pub planner: PlannerSection,
    /// Live-LLM connection settings; absent means mock-only operation.
    pub client: Option<ClientConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out: PathBuf::from("out"),
            kitchen: KitchenSection::default(),
            training: TrainingSection::default(),
            sweep: SweepSection::default(),
            planner: PlannerSection::default(),
            client: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KitchenSection {
    pub demos_per_skill: DemoCount,
    /// Meters.
    pub noise_std: f64,
    /// Custom skill layout; the built-in five-skill kitchen when absent.
    pub skills: Option<Vec<SkillSpec>>,
}

impl Default for KitchenSection {
    fn default() -> Self {
        KitchenSection { demos_per_skill: DemoCount::Uniform(100), noise_std: 0.002, skills: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub k: usize,
    pub beta: f64,
    pub iterations: usize,
    pub n_max: usize,
    pub m_max: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub d_z: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainingSection {
            k: t.k,
            beta: t.beta,
            iterations: t.iterations,
            n_max: t.n_max,
            m_max: t.m_max,
            lr: t.lr,
            clip_norm: t.clip_norm,
            d_z: t.d_z,
            hidden: t.hidden,
        }
    }
}

impl TrainingSection {
    pub fn to_training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            k: self.k,
            beta: self.beta,
            iterations: self.iterations,
            n_max: self.n_max,
            m_max: self.m_max,
            lr: self.lr,
            clip_norm: self.clip_norm,
            seed,
            mode: TrainingMode::Unsupervised,
            d_z: self.d_z,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub sizes: Vec<usize>,
    pub batch: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { sizes: vec![3, 5, 10, 20], batch: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    /// Meters.
    pub tolerance: f64,
    pub max_iters: usize,
    pub step_size: f64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        PlannerSection { tolerance: 0.02, max_iters: 2000, step_size: 0.05 }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read config {p:?}: {e}")))?;
                toml::from_str(&text)
                    .map_err(|e| config_err(format!("invalid config {p:?}: {e}")))
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.training.k < 1 {
            return Err(config_err("training.k must be >= 1"));
        }
        if !(self.training.beta > 0.0) {
            return Err(config_err("training.beta must be > 0"));
        }
        if !(self.planner.tolerance > 0.0) {
            return Err(config_err("planner.tolerance must be > 0"));
        }
        if self.sweep.sizes.is_empty() || self.sweep.batch < 1 {
            return Err(config_err("sweep needs at least one size and batch >= 1"));
        }
        match &self.kitchen.demos_per_skill {
            DemoCount::Uniform(n) if *n < 1 => {
                return Err(config_err("kitchen.demos_per_skill must be >= 1"));
            }
            DemoCount::PerSkill(v) if v.iter().any(|&n| n < 1) => {
                return Err(config_err("kitchen.demos_per_skill entries must be >= 1"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Write the merged configuration next to the outputs it produced.
    pub fn save_effective(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| config_err(format!("cannot serialize effective config: {e}")))?;
        std::fs::write(out_dir.join("effective_config.toml"), text)
            .map_err(|e| config_err(format!("cannot write effective config: {e}")))?;
        Ok(())
    }
}
