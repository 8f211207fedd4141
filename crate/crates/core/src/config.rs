//! Run configuration: one JSON document covering every module. Missing keys
//! take defaults, unknown keys are rejected, and validation errors name the
//! offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, NoiseSchedule, ScheduleConfig, TrainConfig};
use crate::nn::{checkpoint, NetPreset};
use crate::pipeline::toy::{train_on_mixture, ToyConfig};
use crate::pipeline::{PipelineContext, StagePlan};
use crate::reward::{GroundTruthMixture, RewardSpec};
use crate::{io, rng, Error, Result};

/// Environment variable overriding the seed from file and flags.
pub const SEED_ENV: &str = "VIP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub mixture: GroundTruthMixture,
    pub schedule: ScheduleConfig,
    pub reward: RewardSpec,
    pub teacher_preset: NetPreset,
    pub teacher_train: TrainConfig,
    /// Pretrained teacher; trained from scratch when absent.
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_preset: NetPreset,
    pub student_train: TrainConfig,
    pub plan: StagePlan,
    pub sweep_grid: Vec<f64>,
    /// Self-contained teacher/base-student scenario.
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            mixture: GroundTruthMixture::default(),
            schedule: ScheduleConfig::default(),
            reward: RewardSpec::default(),
            teacher_preset: NetPreset::PipelineTeacher,
            teacher_train: TrainConfig {
                block_drop: 0.1,
                ..TrainConfig::default()
            },
            teacher_checkpoint: None,
            student_preset: NetPreset::BaseStudent,
            student_train: TrainConfig {
                steps: 1_500,
                ..TrainConfig::default()
            },
            plan: StagePlan::default(),
            sweep_grid: vec![1e2, 1e3, 1e4, 1e5, 1e6, 1e7],
            toy: ToyConfig::default(),
        }
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, msg } if path.starts_with(prefix) => Error::Config { path, msg },
        Error::Config { path, msg } => Error::config(format!("{prefix}.{path}"), msg),
        other => Error::config(prefix, other.to_string()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let field = if field == "." { path.display().to_string() } else { field };
            Error::config(field, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?, path)
    }

    /// Applies `VIP_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: `{v}`")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate().map_err(|e| prefixed("mixture", e))?;
        NoiseSchedule::linear(self.schedule).map_err(|e| prefixed("schedule", e))?;
        self.reward.validate(&self.mixture).map_err(|e| prefixed("reward", e))?;
        self.teacher_preset.arch().validate().map_err(|e| prefixed("teacher_preset", e))?;
        self.teacher_train.validate("teacher_train")?;
        self.student_train.validate("student_train")?;
        let n_blocks = self.teacher_preset.arch().n_blocks;
        self.plan.validate(&self.reward, n_blocks).map_err(|e| prefixed("plan", e))?;
        if self.sweep_grid.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("sweep_grid", "values must be finite and >= 0"));
        }
        self.toy.validate().map_err(|e| prefixed("toy", e))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule)
    }

    /// Trains the teacher preset on the mixture.
    pub fn train_teacher(&self) -> Result<(DiffusionModel, Vec<f64>)> {
        train_on_mixture(
            self.teacher_preset,
            &self.noise_schedule()?,
            &self.mixture,
            &self.teacher_train,
            rng::derive(self.seed, "teacher"),
        )
    }

    /// Trains the standalone student preset on the mixture.
    pub fn train_student(&self) -> Result<(DiffusionModel, Vec<f64>)> {
        train_on_mixture(
            self.student_preset,
            &self.noise_schedule()?,
            &self.mixture,
            &self.student_train,
            rng::derive(self.seed, "student"),
        )
    }

    /// Loads a checkpoint under this config's noise schedule.
    pub fn load_model(&self, path: &Path) -> Result<DiffusionModel> {
        DiffusionModel::new(checkpoint::load(path)?, self.noise_schedule()?)
    }

    /// The configured teacher checkpoint, or a freshly trained teacher.
    pub fn teacher(&self) -> Result<DiffusionModel> {
        match &self.teacher_checkpoint {
            Some(p) => self.load_model(p),
            None => Ok(self.train_teacher()?.0),
        }
    }

    pub fn context(&self, teacher: DiffusionModel, out_dir: &Path) -> PipelineContext {
        PipelineContext {
            teacher,
            mixture: self.mixture.clone(),
            reward: self.reward.clone(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    /// Effective configuration as JSON, echoed into manifests.
    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}
