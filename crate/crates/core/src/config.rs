//! Run configuration shared by the library entry points and the CLI.

use serde::{Deserialize, Serialize};

use crate::codec::Geometry;
use crate::condition::TaskKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{StageConfig, StageName, StagePlan};

/// Held-out evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    /// Euler steps per generated clip.
    pub steps: usize,
    /// Stream seed of the held-out samples.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            steps: 20,
            seed: 9_000_001,
        }
    }
}

/// What `gen-data` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Samples per task kind.
    pub count: usize,
    pub tasks: Vec<TaskKind>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 64,
            tasks: vec![TaskKind::T2V, TaskKind::R2V, TaskKind::A2V, TaskKind::RA2V, TaskKind::RAP2V],
            seed: 7,
        }
    }
}

/// Desk-scale learning rate of the default plan.
pub const DESK_LR: f64 = 1e-3;

/// Default stage schedule.
pub fn default_plan() -> StagePlan {
    let s = |n, steps| StageConfig::new(n, steps).with_lr(DESK_LR);
    StagePlan {
        stages: vec![
            s(StageName::BASE, 1500),
            s(StageName::R2V, 1500),
            s(StageName::A2V, 2000),
            s(StageName::MERGE, 0),
            s(StageName::RA2V, 600),
            s(StageName::RAP2V, 600),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: Geometry,
    pub model: ModelConfig,
    pub plan: StagePlan,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: Geometry::default(),
            model: ModelConfig::default(),
            plan: default_plan(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        if self.geometry.token_dim() != self.model.token_dim {
            return Err(Error::Config(format!(
                "model token_dim {} does not match geometry ({})",
                self.model.token_dim,
                self.geometry.token_dim()
            )));
        }
        self.plan.validate()?;
        if self.eval.steps == 0 {
            return Err(Error::Config("eval.steps must be at least 1".into()));
        }
        Ok(())
    }
}
