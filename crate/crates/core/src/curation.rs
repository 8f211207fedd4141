//! Winner/loser preference pairs from teacher and student generations.
//!
//! A pair `(w, l)` with matching `condition_id` is kept when, for every
//! target property `p`:
//! - `S_w[p] > S_l[p] > τ_p`,
//! - the loser survived the `mean − α·std` lower bound over student scores,
//! - the target gap `S_w[p] − S_l[p]` exceeds the gap of every non-target
//!   property.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::reward::{score_sample, Assignment, GroundTruthMixture, PropertyScores, RewardSpec, TARGET_AFFINITY};
use crate::{io, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sample: [f64; 2],
    pub scores: PropertyScores,
    pub source: Source,
    pub condition_id: usize,
}

/// Scores every row of `samples`; row `i` gets `condition_id = i`.
pub fn candidates(samples: &Tensor, source: Source, spec: &RewardSpec, mix: &GroundTruthMixture) -> Vec<Candidate> {
    samples
        .points()
        .into_iter()
        .enumerate()
        .map(|(i, x)| Candidate {
            sample: x,
            scores: score_sample(spec, mix, x),
            source,
            condition_id: i,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub stage: usize,
    pub target: String,
    pub condition_id: usize,
    pub x_w: [f64; 2],
    pub x_l: [f64; 2],
    pub scores_w: PropertyScores,
    pub scores_l: PropertyScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    /// Per-property loser thresholds; `None` uses the 25th percentile of the
    /// teacher's scores for the current stage.
    #[serde(default)]
    pub tau: Option<BTreeMap<String, f64>>,
    pub alpha: f64,
    /// A property name, or `"auto"` to take the largest post-pruning drop.
    pub target: String,
    pub max_pairs: usize,
    #[serde(default)]
    pub candidate_filter: Option<String>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            tau: None,
            alpha: 0.3,
            target: "auto".into(),
            max_pairs: 2000,
            candidate_filter: None,
        }
    }
}

pub const TAU_QUANTILE: f64 = 0.25;
pub const TARGET_MODE_RELEVANT: &str = "target-mode-relevant";

impl CurationConfig {
    pub fn validate(&self, spec: &RewardSpec) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("curation.alpha", "must be >= 0"));
        }
        if self.max_pairs == 0 {
            return Err(Error::config("curation.max_pairs", "must be positive"));
        }
        if self.target != "auto" && !spec.properties.contains(&self.target) {
            return Err(Error::config("curation.target", format!("unknown property `{}`", self.target)));
        }
        if let Some(tau) = &self.tau {
            for (p, v) in tau {
                if !spec.properties.contains(p) {
                    return Err(Error::config(format!("curation.tau.{p}"), "unknown property"));
                }
                if !v.is_finite() {
                    return Err(Error::config(format!("curation.tau.{p}"), "must be finite"));
                }
            }
        }
        if let Some(f) = &self.candidate_filter {
            if f != TARGET_MODE_RELEVANT {
                return Err(Error::config("curation.candidate_filter", format!("unknown filter `{f}`")));
            }
        }
        Ok(())
    }
}

/// Resolved per-stage pairing rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRules {
    /// Target properties; the first is the primary target recorded on pairs.
    pub targets: Vec<String>,
    pub tau: BTreeMap<String, f64>,
    pub alpha: f64,
    pub max_pairs: usize,
}

/// Extra pair predicate applied after the score rules.
pub trait PairFilter {
    fn keep(&self, winner: &Candidate, loser: &Candidate) -> bool;
}

/// Keeps pairs where either member's nearest mode is the target mode.
pub struct TargetModeRelevant {
    pub mixture: GroundTruthMixture,
    pub target_mode: usize,
}

impl PairFilter for TargetModeRelevant {
    fn keep(&self, w: &Candidate, l: &Candidate) -> bool {
        self.mixture.nearest_mode(w.sample) == self.target_mode
            || self.mixture.nearest_mode(l.sample) == self.target_mode
    }
}

pub fn resolve_filter(id: &str, mix: &GroundTruthMixture, spec: &RewardSpec) -> Result<Box<dyn PairFilter>> {
    match id {
        TARGET_MODE_RELEVANT => Ok(Box::new(TargetModeRelevant {
            mixture: mix.clone(),
            target_mode: spec.target_mode,
        })),
        other => Err(Error::config("curation.candidate_filter", format!("unknown filter `{other}`"))),
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Lower bound `mean − α·std` over the candidates' scores for `property`.
pub fn loser_bound(cands: &[Candidate], property: &str, alpha: f64) -> f64 {
    let scores: Vec<f64> = cands.iter().map(|c| c.scores[property]).collect();
    let (mean, std) = mean_std(&scores);
    mean - alpha * std
}

/// Student candidates whose score on every target is at least `mean − α·std`.
pub fn filter_losers(cands: &[Candidate], targets: &[String], alpha: f64) -> Vec<Candidate> {
    if cands.is_empty() {
        return Vec::new();
    }
    let bounds: Vec<(String, f64)> = targets
        .iter()
        .map(|p| (p.clone(), loser_bound(cands, p, alpha)))
        .collect();
    cands
        .iter()
        .filter(|c| bounds.iter().all(|(p, b)| c.scores[p] >= *b))
        .cloned()
        .collect()
}

/// Score ordering, threshold, and gap-dominance checks for one pair.
pub fn pair_satisfies(w: &PropertyScores, l: &PropertyScores, rules: &PairRules) -> bool {
    for p in &rules.targets {
        let tau = rules.tau.get(p).copied().unwrap_or(f64::NEG_INFINITY);
        if !(w[p] > l[p] && l[p] > tau) {
            return false;
        }
        let gap = w[p] - l[p];
        for (q, wq) in w {
            if rules.targets.contains(q) {
                continue;
            }
            if !(gap > wq - l[q]) {
                return false;
            }
        }
    }
    true
}

/// Pairs teacher and (already filtered) student candidates by condition id.
/// Output is sorted by descending primary-target gap, then condition id, and
/// truncated to `max_pairs`.
pub fn build_pairs(
    teacher: &[Candidate],
    students: &[Candidate],
    rules: &PairRules,
    stage: usize,
    filter: Option<&dyn PairFilter>,
) -> Vec<PreferencePair> {
    let Some(primary) = rules.targets.first() else {
        return Vec::new();
    };
    let mut by_id: HashMap<usize, &Candidate> = HashMap::new();
    for c in teacher {
        by_id.entry(c.condition_id).or_insert(c);
    }
    let mut pairs: Vec<PreferencePair> = students
        .iter()
        .filter_map(|l| {
            let w = by_id.get(&l.condition_id)?;
            if !pair_satisfies(&w.scores, &l.scores, rules) {
                return None;
            }
            if let Some(f) = filter {
                if !f.keep(w, l) {
                    return None;
                }
            }
            Some(PreferencePair {
                stage,
                target: primary.clone(),
                condition_id: l.condition_id,
                x_w: w.sample,
                x_l: l.sample,
                scores_w: w.scores.clone(),
                scores_l: l.scores.clone(),
            })
        })
        .collect();
    let gap = |p: &PreferencePair| p.scores_w[primary] - p.scores_l[primary];
    pairs.sort_by(|a, b| gap(b).total_cmp(&gap(a)).then(a.condition_id.cmp(&b.condition_id)));
    pairs.truncate(rules.max_pairs);
    pairs
}

/// Loser filtering followed by pair construction.
pub fn curate(
    teacher: &[Candidate],
    students: &[Candidate],
    rules: &PairRules,
    stage: usize,
    filter: Option<&dyn PairFilter>,
) -> Vec<PreferencePair> {
    let survivors = filter_losers(students, &rules.targets, rules.alpha);
    build_pairs(teacher, &survivors, rules, stage, filter)
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Default thresholds: the 25th percentile of teacher scores per property.
pub fn default_tau(teacher: &[Candidate]) -> BTreeMap<String, f64> {
    let Some(first) = teacher.first() else {
        return BTreeMap::new();
    };
    first
        .scores
        .keys()
        .map(|p| {
            let v: Vec<f64> = teacher.iter().map(|c| c.scores[p]).collect();
            (p.clone(), quantile(&v, TAU_QUANTILE))
        })
        .collect()
}

/// Mode-targeted pairs for the toy experiment: winners are teacher samples
/// assigned to the target mode, losers are student samples assigned anywhere
/// else (including OOD). Winners and losers are zipped in sample order.
pub fn build_mode_pairs(
    teacher: &Tensor,
    student: &Tensor,
    spec: &RewardSpec,
    mix: &GroundTruthMixture,
    stage: usize,
    max_pairs: usize,
) -> Vec<PreferencePair> {
    let target = Assignment::Mode(spec.target_mode);
    let winners = teacher.points().into_iter().filter(|&x| mix.assign_mode(x, spec.r_ood) == target);
    let losers = student.points().into_iter().filter(|&x| mix.assign_mode(x, spec.r_ood) != target);
    winners
        .zip(losers)
        .take(max_pairs)
        .enumerate()
        .map(|(i, (w, l))| PreferencePair {
            stage,
            target: TARGET_AFFINITY.to_string(),
            condition_id: i,
            x_w: w,
            x_l: l,
            scores_w: score_sample(spec, mix, w),
            scores_l: score_sample(spec, mix, l),
        })
        .collect()
}

/// JSON-lines encoding, one pair per line.
pub fn encode_pairs(pairs: &[PreferencePair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&io::to_json_line(p)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the dataset and returns the SHA-256 of the file contents.
pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<String> {
    let s = encode_pairs(pairs)?;
    io::write_file(path, s.as_bytes())?;
    Ok(io::sha256_hex(s.as_bytes()))
}

pub fn parse_pairs(contents: &str, path: &Path) -> Result<Vec<PreferencePair>> {
    contents
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    parse_pairs(&io::read_to_string(path)?, path)
}
