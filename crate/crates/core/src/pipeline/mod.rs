//! Stage orchestration: prune → evaluate → curate → distill, repeated against
//! a frozen teacher, plus the ablation modes and the w_sft sweep.

pub mod toy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{candidates, curate, default_tau, resolve_filter, save_pairs, CurationConfig, PairRules, Source};
use crate::diffusion::DiffusionModel;
use crate::distill::{train_distill, DistillConfig, LossBreakdown, LossKind};
use crate::nn::{checkpoint, Tensor};
use crate::pruning::{apply_prune, block_importance, select_blocks, ImportanceTable};
use crate::reward::{compare_reports, score_model, EvalReport, GroundTruthMixture, RewardSpec, QUALITY};
use crate::{io, rng, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Iterative online pruning with ReDPO.
    Vip,
    /// Every stage's blocks pruned at once, one ReDPO training.
    Offline,
    /// Iterative, SFT loss only.
    SftBaseline,
    /// Iterative, DPO loss only.
    DpoOnly,
}

impl RunMode {
    pub fn loss(self) -> LossKind {
        match self {
            RunMode::Vip | RunMode::Offline => LossKind::Redpo,
            RunMode::SftBaseline => LossKind::Sft,
            RunMode::DpoOnly => LossKind::Dpo,
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vip" => Ok(RunMode::Vip),
            "offline" => Ok(RunMode::Offline),
            "sft_baseline" => Ok(RunMode::SftBaseline),
            "dpo_only" => Ok(RunMode::DpoOnly),
            other => Err(Error::config("plan.mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub n_stages: usize,
    pub k_per_stage: usize,
    pub curation: CurationConfig,
    pub distill: DistillConfig,
    pub n_eval_samples: usize,
    /// Samples drawn from teacher and student per stage for curation.
    pub n_candidates: usize,
    pub mode: RunMode,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            n_stages: 2,
            k_per_stage: 1,
            curation: CurationConfig::default(),
            distill: DistillConfig::default(),
            n_eval_samples: 1000,
            n_candidates: 4000,
            mode: RunMode::Vip,
        }
    }
}

impl StagePlan {
    /// Checks the plan against a model with `n_blocks` blocks.
    pub fn validate(&self, spec: &RewardSpec, n_blocks: usize) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::config("plan.n_stages", "must be >= 1"));
        }
        if self.n_stages * self.k_per_stage >= n_blocks {
            return Err(Error::config(
                "plan.k_per_stage",
                format!(
                    "{} stages x {} blocks leaves no active block out of {n_blocks}",
                    self.n_stages, self.k_per_stage
                ),
            ));
        }
        if self.n_eval_samples < 100 {
            return Err(Error::config("plan.n_eval_samples", "at least 100"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("plan.n_candidates", "must be positive"));
        }
        self.curation.validate(spec)?;
        self.distill.validate("plan.distill")
    }
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub teacher: DiffusionModel,
    pub mixture: GroundTruthMixture,
    pub reward: RewardSpec,
    /// Directory receiving the manifest, checkpoints and datasets.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub pruned_block_ids: Vec<usize>,
    pub active_blocks: Vec<usize>,
    pub importance: Option<ImportanceTable>,
    pub targets: Vec<String>,
    /// Set when no property dropped and the target fell back to the
    /// smallest-gain property.
    pub target_fallback: bool,
    pub tau: BTreeMap<String, f64>,
    pub n_pairs: usize,
    /// Paths are relative to the manifest directory.
    pub dataset_path: PathBuf,
    pub dataset_hash: String,
    pub winner_samples_hash: String,
    pub loser_samples_hash: String,
    pub teacher_hash: String,
    pub input_checkpoint_path: PathBuf,
    pub input_checkpoint_hash: String,
    pub output_checkpoint_path: PathBuf,
    pub output_checkpoint_hash: String,
    pub params_before: usize,
    pub params_after: usize,
    pub report_before: EvalReport,
    pub report_pruned: EvalReport,
    pub report_after: EvalReport,
    pub loss_history: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    pub mode: RunMode,
    pub teacher_checkpoint_path: PathBuf,
    pub teacher_hash: String,
    pub stages: Vec<StageRecord>,
    /// Effective configuration of the run.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<String> {
        let s = io::to_json_pretty(self)?;
        io::write_file(path, s.as_bytes())?;
        Ok(io::sha256_hex(s.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&io::read_to_string(path)?)?)
    }

    pub fn final_checkpoint_hash(&self) -> Option<&str> {
        self.stages.last().map(|s| s.output_checkpoint_hash.as_str())
    }
}

/// Seed of stage `idx` under run seed `seed`.
pub fn stage_seed(seed: u64, idx: usize) -> u64 {
    rng::derive(seed, &format!("stage{idx}"))
}

/// Hash of a sample tensor's exact bit pattern.
pub fn samples_hash(samples: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for v in samples.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    io::sha256_hex(&bytes)
}

/// Target properties for a stage: the configured one, or under `"auto"` the
/// largest drop between `before` and `pruned`. When nothing dropped, the
/// property whose score improved least is used; the flag reports this.
pub fn resolve_targets(target: &str, before: &EvalReport, pruned: &EvalReport) -> Result<(Vec<String>, bool)> {
    if target != "auto" {
        return Ok((vec![target.to_string()], false));
    }
    let drops = compare_reports(before, pruned)?;
    if let Some(first) = drops.into_iter().next() {
        return Ok((vec![first], false));
    }
    let least = before
        .properties
        .iter()
        .map(|(p, &b)| (p, pruned.properties[p] - b))
        .min_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(y.0)))
        .map(|(p, _)| p.clone())
        .ok_or_else(|| Error::config("reward.properties", "no properties to target"))?;
    log::warn!("no property dropped after pruning; targeting `{least}`");
    Ok((vec![least], true))
}

fn rel(dir: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// One prune → curate → distill cycle on `student`, prune size `k` and
/// `epochs` distillation passes. `student` is replaced only on success.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    ctx: &PipelineContext,
    plan: &StagePlan,
    student: &mut DiffusionModel,
    input_checkpoint: &Path,
    stage: usize,
    seed: u64,
    k: usize,
    epochs: usize,
) -> Result<StageRecord> {
    let spec = &ctx.reward;
    let mix = &ctx.mixture;
    let n_eval = plan.n_eval_samples;
    let eval_seed = rng::derive(seed, "eval");
    let input_checkpoint_hash = io::hash_file(input_checkpoint)?;

    let mut model = student.clone();
    let params_before = model.net.param_count();
    let (importance, pruned_ids, report_before) = if k > 0 {
        let table = block_importance(&model, spec, mix, n_eval, eval_seed)?;
        let secondary = spec.properties.iter().any(|p| p == QUALITY).then_some(QUALITY);
        let ids = select_blocks(&table, k, secondary)?;
        let before = table.report_full.clone();
        (Some(table), ids, before)
    } else {
        (None, Vec::new(), score_model(&model, spec, mix, n_eval, eval_seed)?)
    };
    apply_prune(&mut model, &pruned_ids, stage)?;
    let report_pruned = score_model(&model, spec, mix, n_eval, eval_seed)?;
    let (targets, target_fallback) = resolve_targets(&plan.curation.target, &report_before, &report_pruned)?;

    // Teacher and student share the candidate seed, so equal condition ids
    // start from the same initial noise.
    let cand_seed = rng::derive(seed, "candidates");
    let winners = ctx.teacher.sample(plan.n_candidates, cand_seed)?;
    let losers = model.sample(plan.n_candidates, cand_seed)?;
    let teacher_cands = candidates(&winners, Source::Teacher, spec, mix);
    let student_cands = candidates(&losers, Source::Student, spec, mix);
    let tau = match &plan.curation.tau {
        Some(t) => t.clone(),
        None => default_tau(&teacher_cands),
    };
    let rules = PairRules {
        targets: targets.clone(),
        tau: tau.clone(),
        alpha: plan.curation.alpha,
        max_pairs: plan.curation.max_pairs,
    };
    let filter = plan
        .curation
        .candidate_filter
        .as_deref()
        .map(|id| resolve_filter(id, mix, spec))
        .transpose()?;
    let pairs = curate(&teacher_cands, &student_cands, &rules, stage, filter.as_deref());
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet {
            stage,
            hint: format!(
                "targets {targets:?}: lower curation.tau or raise curation.alpha (alpha={})",
                plan.curation.alpha
            ),
        });
    }

    let stage_dir = ctx.out_dir.join(format!("stage{stage}"));
    let dataset_path = stage_dir.join("pairs.jsonl");
    let dataset_hash = save_pairs(&pairs, &dataset_path)?;

    let distill = DistillConfig {
        epochs,
        seed: rng::derive(seed, "distill"),
        ..plan.distill
    };
    let kind = plan.mode.loss();
    let history = train_distill(&mut model, &ctx.teacher, &pairs, &distill, kind)?;
    let report_after = score_model(&model, spec, mix, n_eval, eval_seed)?;

    let output_checkpoint_path = stage_dir.join("student.json");
    let output_checkpoint_hash = checkpoint::save(&model.net, &output_checkpoint_path)?;
    log::info!(
        "stage {stage}: pruned {pruned_ids:?}, {} pairs, total {:.4} -> {:.4} -> {:.4}",
        pairs.len(),
        report_before.total,
        report_pruned.total,
        report_after.total
    );

    let record = StageRecord {
        stage,
        seed,
        loss: kind,
        pruned_block_ids: pruned_ids,
        active_blocks: model.net.active_blocks(),
        importance,
        targets,
        target_fallback,
        tau,
        n_pairs: pairs.len(),
        dataset_path: rel(&ctx.out_dir, &dataset_path),
        dataset_hash,
        winner_samples_hash: samples_hash(&winners),
        loser_samples_hash: samples_hash(&losers),
        teacher_hash: ctx.teacher.checkpoint_hash()?,
        input_checkpoint_path: rel(&ctx.out_dir, input_checkpoint),
        input_checkpoint_hash,
        output_checkpoint_path: rel(&ctx.out_dir, &output_checkpoint_path),
        output_checkpoint_hash,
        params_before,
        params_after: model.net.param_count(),
        report_before,
        report_pruned,
        report_after,
        loss_history: history.epochs,
    };
    *student = model;
    Ok(record)
}

/// Runs every stage of `plan`, starting from a copy of the teacher. The
/// teacher checkpoint is written to the output directory first and is the
/// reference and winner generator at every stage.
pub fn run_vip(ctx: &PipelineContext, plan: &StagePlan, seed: u64, config: serde_json::Value) -> Result<RunManifest> {
    plan.validate(&ctx.reward, ctx.teacher.net.block_active().len())?;
    let teacher_path = ctx.out_dir.join("teacher.json");
    let teacher_hash = checkpoint::save(&ctx.teacher.net, &teacher_path)?;
    let mut student = ctx.teacher.clone();
    let mut input = teacher_path.clone();
    let schedule: Vec<(usize, usize)> = match plan.mode {
        RunMode::Offline => vec![(plan.k_per_stage * plan.n_stages, plan.distill.epochs)],
        _ => vec![(plan.k_per_stage, plan.distill.epochs); plan.n_stages],
    };
    let mut stages = Vec::with_capacity(schedule.len());
    for (idx, (k, epochs)) in schedule.into_iter().enumerate() {
        let record = run_stage(ctx, plan, &mut student, &input, idx, stage_seed(seed, idx), k, epochs).map_err(|e| {
            Error::Stage {
                stage: idx,
                source: Box::new(e),
            }
        })?;
        if record.teacher_hash != teacher_hash {
            return Err(Error::Checkpoint(format!("teacher changed during stage {idx}")));
        }
        input = ctx.out_dir.join(&record.output_checkpoint_path);
        stages.push(record);
    }
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        seed,
        mode: plan.mode,
        teacher_checkpoint_path: rel(&ctx.out_dir, &teacher_path),
        teacher_hash,
        stages,
        config,
    };
    manifest.save(&ctx.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Re-runs a recorded stage from its input checkpoint and seed into
/// `ctx.out_dir`. The returned record's output hash should equal the original.
pub fn replay_stage(ctx: &PipelineContext, plan: &StagePlan, manifest_dir: &Path, record: &StageRecord) -> Result<StageRecord> {
    let input = manifest_dir.join(&record.input_checkpoint_path);
    let net = checkpoint::load(&input)?;
    let mut student = DiffusionModel::new(net, ctx.teacher.schedule.clone())?;
    let epochs = record.loss_history.len();
    run_stage(
        ctx,
        plan,
        &mut student,
        &input,
        record.stage,
        record.seed,
        record.pruned_block_ids.len(),
        epochs,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w_sft: f64,
    pub run_dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub dataset_hashes: Vec<String>,
    pub checkpoint_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `w_sft,stage,total,<properties...>,ood,checkpoint_hash`.
    pub fn to_csv(&self) -> String {
        let props: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.reports.first())
            .flat_map(|r| r.properties.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut s = String::from("w_sft,stage,total");
        for p in &props {
            s.push(',');
            s.push_str(p);
        }
        s.push_str(",ood,checkpoint_hash\n");
        for r in &self.rows {
            for (i, rep) in r.reports.iter().enumerate() {
                s.push_str(&format!("{},{},{}", io::fmt_f64(r.w_sft), i, io::fmt_f64(rep.total)));
                for p in &props {
                    s.push(',');
                    s.push_str(&io::fmt_f64(rep.property(p).unwrap_or(f64::NAN)));
                }
                s.push_str(&format!(",{},{}\n", rep.ood_count, r.checkpoint_hashes[i]));
            }
        }
        s
    }
}

/// Runs the pipeline once per `w_sft` value (ascending) with the loss fixed
/// to ReDPO. Each run writes into `<out_dir>/wsft_<index>`.
pub fn sweep_wsft(
    ctx: &PipelineContext,
    grid: &[f64],
    plan: &StagePlan,
    seed: u64,
    config: serde_json::Value,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::config("sweep.grid", "must not be empty"));
    }
    let mut values = grid.to_vec();
    values.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(values.len());
    for (i, &w) in values.iter().enumerate() {
        let mut p = plan.clone();
        p.mode = RunMode::Vip;
        p.distill.w_sft = w;
        let dir = ctx.out_dir.join(format!("wsft_{i}"));
        let sub = PipelineContext {
            out_dir: dir.clone(),
            ..ctx.clone()
        };
        let m = run_vip(&sub, &p, seed, config.clone())?;
        rows.push(SweepRow {
            w_sft: w,
            run_dir: rel(&ctx.out_dir, &dir),
            reports: m.stages.iter().map(|s| s.report_after.clone()).collect(),
            dataset_hashes: m.stages.iter().map(|s| s.dataset_hash.clone()).collect(),
            checkpoint_hashes: m.stages.iter().map(|s| s.output_checkpoint_hash.clone()).collect(),
        });
    }
    Ok(SweepTable { rows })
}
