//! Block importance and stagewise block selection.
//!
//! `Δ_i = V(M) − V(M without block i)` where `V` is the report total. Blocks
//! with the smallest `Δ` matter least and are pruned first.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionModel;
use crate::io::fmt_f64;
use crate::reward::{score_model, EvalReport, GroundTruthMixture, RewardSpec, QUALITY};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub block_id: usize,
    pub delta: f64,
    pub report_without: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub report_full: EvalReport,
    /// One entry per active block, in block order.
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceTable {
    /// CSV with header `block_id,delta,total_without,quality_without`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block_id,delta,total_without,quality_without\n");
        for e in &self.entries {
            let q = e.report_without.property(QUALITY).unwrap_or(f64::NAN);
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.block_id,
                fmt_f64(e.delta),
                fmt_f64(e.report_without.total),
                fmt_f64(q)
            ));
        }
        s
    }
}

/// Importance of every active block under an arbitrary evaluator. Each block
/// is masked on its own snapshot of the model; `model` is never touched.
pub fn block_importance_with<F>(model: &DiffusionModel, eval: F) -> Result<ImportanceTable>
where
    F: Fn(&DiffusionModel) -> Result<EvalReport> + Sync,
{
    let active = model.net.active_blocks();
    if active.len() < 2 {
        return Err(Error::TooManyBlocks {
            k: 1,
            active: active.len(),
        });
    }
    let report_full = eval(model)?;
    let entries = active
        .par_iter()
        .map(|&b| {
            let mut masked = model.clone();
            masked.net.set_block_active(b, false)?;
            let report_without = eval(&masked)?;
            Ok(ImportanceEntry {
                block_id: b,
                delta: report_full.total - report_without.total,
                report_without,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceTable { report_full, entries })
}

/// Importance measured with [`score_model`]; every evaluation shares `seed`
/// so differences reflect the block and not sampling noise.
pub fn block_importance(
    model: &DiffusionModel,
    spec: &RewardSpec,
    mix: &GroundTruthMixture,
    n: usize,
    seed: u64,
) -> Result<ImportanceTable> {
    block_importance_with(model, |m| score_model(m, spec, mix, n, seed))
}

/// The `k` least important blocks: ascending `Δ`, then descending secondary
/// property of the masked report (when given), then ascending block id.
/// At least one block always remains.
pub fn select_blocks(table: &ImportanceTable, k: usize, secondary: Option<&str>) -> Result<Vec<usize>> {
    let active = table.entries.len();
    if k + 1 > active {
        return Err(Error::TooManyBlocks { k, active });
    }
    let key = |e: &ImportanceEntry| {
        secondary
            .and_then(|p| e.report_without.property(p))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let mut order: Vec<&ImportanceEntry> = table.entries.iter().collect();
    order.sort_by(|a, b| {
        a.delta
            .total_cmp(&b.delta)
            .then_with(|| key(b).total_cmp(&key(a)))
            .then(a.block_id.cmp(&b.block_id))
    });
    Ok(order.into_iter().take(k).map(|e| e.block_id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStageResult {
    pub stage: usize,
    pub pruned_block_ids: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub report_before: Option<EvalReport>,
    pub report_after: Option<EvalReport>,
}

/// Masks `block_ids`. All ids are checked before anything changes.
pub fn apply_prune(model: &mut DiffusionModel, block_ids: &[usize], stage: usize) -> Result<PruneStageResult> {
    let n_blocks = model.net.block_active().len();
    let mut seen = vec![false; n_blocks];
    for &b in block_ids {
        if b >= n_blocks {
            return Err(Error::NoSuchBlock(b));
        }
        if !model.net.block_active()[b] || seen[b] {
            return Err(Error::BlockInactive(b));
        }
        seen[b] = true;
    }
    let active = model.net.n_active();
    if block_ids.len() >= active {
        return Err(Error::TooManyBlocks {
            k: block_ids.len(),
            active,
        });
    }
    let params_before = model.net.param_count();
    for &b in block_ids {
        model.net.set_block_active(b, false)?;
    }
    Ok(PruneStageResult {
        stage,
        pruned_block_ids: block_ids.to_vec(),
        params_before,
        params_after: model.net.param_count(),
        report_before: None,
        report_after: None,
    })
}
