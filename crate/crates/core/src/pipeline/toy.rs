//! Teacher/base-student toy experiment: a high-capacity teacher and a
//! low-capacity student learn the same mixture, then three copies of the
//! student are distilled with the SFT, DPO, and regularized DPO objectives on
//! one mode-targeted preference dataset. Arms differ only in the loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{build_mode_pairs, PreferencePair};
use crate::diffusion::{train_diffusion, DiffusionModel, NoiseSchedule, ScheduleConfig, TrainConfig};
use crate::distill::{train_distill, DistillConfig, LossKind, OmegaMode};
use crate::nn::{EpsilonNet, NetPreset, Tensor};
use crate::reward::{evaluate_samples, EvalReport, GroundTruthMixture, RewardSpec};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub mixture: GroundTruthMixture,
    pub schedule: ScheduleConfig,
    pub reward: RewardSpec,
    pub teacher_preset: NetPreset,
    pub student_preset: NetPreset,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    /// Samples drawn from each model when building the preference dataset.
    pub n_candidates: usize,
    pub max_pairs: usize,
    pub distill: DistillConfig,
    /// Optimizer steps per distilled arm.
    pub distill_steps: usize,
    pub n_eval_samples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            mixture: GroundTruthMixture::default(),
            schedule: ScheduleConfig::default(),
            reward: RewardSpec::default(),
            teacher_preset: NetPreset::Teacher,
            student_preset: NetPreset::BaseStudent,
            teacher_train: TrainConfig::default(),
            student_train: TrainConfig {
                steps: 1_500,
                ..TrainConfig::default()
            },
            n_candidates: 10_000,
            max_pairs: 1_000,
            distill: DistillConfig {
                beta: 50.0,
                omega: OmegaMode::Constant(1.0),
                w_sft: 1.0,
                learning_rate: 1e-4,
                epochs: 1,
                batch_size: 100,
                shared_t: true,
                seed: 0,
                optimizer: crate::nn::OptimizerKind::adam(),
            },
            distill_steps: 3_000,
            n_eval_samples: 2_000,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate().map_err(|e| Error::config("toy.mixture", e.to_string()))?;
        NoiseSchedule::linear(self.schedule).map_err(|e| Error::config("toy.schedule", e.to_string()))?;
        self.reward.validate(&self.mixture)?;
        self.teacher_train.validate("toy.teacher_train")?;
        self.student_train.validate("toy.student_train")?;
        self.distill.validate("toy.distill")?;
        if self.n_candidates == 0 {
            return Err(Error::config("toy.n_candidates", "must be positive"));
        }
        if self.max_pairs == 0 {
            return Err(Error::config("toy.max_pairs", "must be positive"));
        }
        if self.distill_steps == 0 {
            return Err(Error::config("toy.distill_steps", "must be positive"));
        }
        if self.n_eval_samples < 100 {
            return Err(Error::config("toy.n_eval_samples", "at least 100"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub mode_counts: Vec<usize>,
    pub ood_count: usize,
    pub report: EvalReport,
    pub loss_history: Vec<crate::distill::LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub n_pairs: usize,
    pub teacher: EvalReport,
    /// `base`, `sft`, `dpo`, `redpo`, in that order.
    pub arms: Vec<ArmReport>,
    pub teacher_initial_loss: f64,
    pub teacher_final_loss: f64,
}

impl ToyReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// Mean of the first and last `window` entries of a loss curve.
pub fn curve_ends(history: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(history.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&history[..w]), mean(&history[history.len() - w..]))
}

pub fn train_on_mixture(
    preset: NetPreset,
    schedule: &NoiseSchedule,
    mix: &GroundTruthMixture,
    train: &TrainConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    let net = EpsilonNet::from_preset(preset, rng::derive(seed, "init"))?;
    let mut model = DiffusionModel::new(net, schedule.clone())?;
    let history = train_diffusion(&mut model, train, rng::derive(seed, "train"), |n, r| mix.sample(n, r))?;
    Ok((model, history))
}

/// Generated samples behind a toy run, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySamples {
    pub arm: String,
    pub samples: Tensor,
}

/// Everything after pretraining: dataset construction, the three distilled
/// arms, and evaluation.
pub fn run_arms(
    teacher: &DiffusionModel,
    base: &DiffusionModel,
    cfg: &ToyConfig,
    seed: u64,
) -> Result<(Vec<ArmReport>, usize, Vec<ToySamples>, EvalReport)> {
    let mix = &cfg.mixture;
    let spec = &cfg.reward;
    let cand_seed = rng::derive(seed, "candidates");
    let teacher_samples = teacher.sample(cfg.n_candidates, cand_seed)?;
    let student_samples = base.sample(cfg.n_candidates, cand_seed)?;
    let pairs: Vec<PreferencePair> = build_mode_pairs(&teacher_samples, &student_samples, spec, mix, 0, cfg.max_pairs);
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet {
            stage: 0,
            hint: "teacher produced no target-mode samples; raise n_candidates".into(),
        });
    }
    let steps_per_epoch = pairs.len().div_ceil(cfg.distill.batch_size);
    let distill = DistillConfig {
        epochs: cfg.distill_steps.div_ceil(steps_per_epoch),
        seed: rng::derive(seed, "distill"),
        ..cfg.distill
    };

    let eval_seed = rng::derive(seed, "eval");
    let evaluate = |m: &DiffusionModel| -> Result<(EvalReport, Tensor)> {
        let s = m.sample(cfg.n_eval_samples, eval_seed)?;
        Ok((evaluate_samples(&s, spec, mix, eval_seed), s))
    };
    let (teacher_report, teacher_eval) = evaluate(teacher)?;
    let mut samples = vec![ToySamples {
        arm: "teacher".into(),
        samples: teacher_eval,
    }];

    let mut arms = Vec::new();
    let (r, s) = evaluate(base)?;
    arms.push(ArmReport {
        arm: "base".into(),
        mode_counts: r.mode_counts.clone(),
        ood_count: r.ood_count,
        report: r,
        loss_history: Vec::new(),
    });
    samples.push(ToySamples {
        arm: "base".into(),
        samples: s,
    });
    let trained = [LossKind::Sft, LossKind::Dpo, LossKind::Redpo]
        .par_iter()
        .map(|&kind| {
            let mut student = base.clone();
            let h = train_distill(&mut student, teacher, &pairs, &distill, kind)?;
            let (r, s) = evaluate(&student)?;
            log::info!("toy arm {kind}: modes {:?} ood {}", r.mode_counts, r.ood_count);
            Ok((kind, h, r, s))
        })
        .collect::<Result<Vec<_>>>()?;
    for (kind, h, r, s) in trained {
        arms.push(ArmReport {
            arm: kind.to_string(),
            mode_counts: r.mode_counts.clone(),
            ood_count: r.ood_count,
            report: r,
            loss_history: h.epochs,
        });
        samples.push(ToySamples {
            arm: kind.to_string(),
            samples: s,
        });
    }
    Ok((arms, pairs.len(), samples, teacher_report))
}

/// Trains teacher and base student from scratch and runs all arms.
pub fn run_toy_experiment(cfg: &ToyConfig, seed: u64) -> Result<(ToyReport, Vec<ToySamples>)> {
    cfg.validate()?;
    let schedule = NoiseSchedule::linear(cfg.schedule)?;
    let (teacher, th) = train_on_mixture(
        cfg.teacher_preset,
        &schedule,
        &cfg.mixture,
        &cfg.teacher_train,
        rng::derive(seed, "teacher"),
    )?;
    let (base, _) = train_on_mixture(
        cfg.student_preset,
        &schedule,
        &cfg.mixture,
        &cfg.student_train,
        rng::derive(seed, "student"),
    )?;
    let (arms, n_pairs, samples, teacher_report) = run_arms(&teacher, &base, cfg, seed)?;
    let (first, last) = curve_ends(&th, 200);
    Ok((
        ToyReport {
            seed,
            n_pairs,
            teacher: teacher_report,
            arms,
            teacher_initial_loss: first,
            teacher_final_loss: last,
        },
        samples,
    ))
}
