//! Ground-truth mixture, analytic per-property rewards, and model-level
//! evaluation (mode tallies, OOD counts, mean property scores).

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::Generator;
use crate::nn::Tensor;
use crate::{rng, Error, Result};

pub const TARGET_AFFINITY: &str = "target_affinity";
pub const QUALITY: &str = "quality";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub mean: [f64; 2],
    pub sigma: f64,
    pub weight: f64,
}

/// Isotropic Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthMixture {
    pub modes: Vec<Mode>,
}

impl Default for GroundTruthMixture {
    /// Three modes on a circle of radius 2; mode 1 is underweighted.
    fn default() -> Self {
        let m = |mean, weight| Mode {
            mean,
            sigma: 0.15,
            weight,
        };
        Self {
            modes: vec![m([0.0, 2.0], 0.45), m([-1.732, -1.0], 0.10), m([1.732, -1.0], 0.45)],
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl GroundTruthMixture {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Mixture("no modes".into()));
        }
        // Zero weights are allowed so a single component can be isolated.
        if self.modes.iter().any(|m| !(m.weight >= 0.0) || !m.weight.is_finite()) {
            return Err(Error::Mixture("weights must be non-negative".into()));
        }
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Mixture(format!("weights sum to {total}, not 1")));
        }
        if self.modes.iter().any(|m| !(m.sigma >= 0.0) || !m.sigma.is_finite()) {
            return Err(Error::Mixture("sigma must be non-negative".into()));
        }
        if self.modes.iter().any(|m| !m.mean.iter().all(|v| v.is_finite())) {
            return Err(Error::Mixture("means must be finite".into()));
        }
        let max_sigma = self.modes.iter().map(|m| m.sigma).fold(0.0, f64::max);
        for (i, a) in self.modes.iter().enumerate() {
            for b in &self.modes[i + 1..] {
                if dist(a.mean, b.mean) <= 6.0 * max_sigma {
                    return Err(Error::Mixture(
                        "mode means must be separated by more than 6 sigma".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// I.i.d. draws: component by weight, then Gaussian around its mean.
    pub fn sample(&self, n: usize, rng: &mut rng::Rng) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut k = self.modes.len() - 1;
            for (i, m) in self.modes.iter().enumerate() {
                acc += m.weight;
                if u < acc && m.weight > 0.0 {
                    k = i;
                    break;
                }
            }
            while self.modes[k].weight == 0.0 && k > 0 {
                k -= 1;
            }
            let m = &self.modes[k];
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            data.push(m.mean[0] + m.sigma * z0);
            data.push(m.mean[1] + m.sigma * z1);
        }
        Tensor::new(vec![n, 2], data).expect("n x 2")
    }

    /// Log density of the mixture at `x`.
    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let terms: Vec<f64> = self
            .modes
            .iter()
            .filter(|m| m.weight > 0.0)
            .map(|m| {
                let var = m.sigma * m.sigma;
                let d2 = (x[0] - m.mean[0]).powi(2) + (x[1] - m.mean[1]).powi(2);
                m.weight.ln() - (2.0 * std::f64::consts::PI * var).ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Nearest mode by Euclidean distance; the lower index wins ties. OOD if
    /// the point lies farther than `r_ood` sigmas from that mode's mean.
    pub fn assign_mode(&self, x: [f64; 2], r_ood: f64) -> Assignment {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, m) in self.modes.iter().enumerate() {
            let d = dist(x, m.mean);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > r_ood * self.modes[best].sigma || best_d.is_nan() {
            Assignment::Ood
        } else {
            Assignment::Mode(best)
        }
    }

    /// Nearest mode index ignoring the OOD radius.
    pub fn nearest_mode(&self, x: [f64; 2]) -> usize {
        match self.assign_mode(x, f64::INFINITY) {
            Assignment::Mode(k) => k,
            Assignment::Ood => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Mode(usize),
    Ood,
}

/// Reward configuration: which properties to score and which mode the
/// target-affinity reward favors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub properties: Vec<String>,
    pub target_mode: usize,
    pub r_ood: f64,
    /// Positive scale applied to the target-affinity reward.
    #[serde(default = "one")]
    pub affinity_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            properties: vec![TARGET_AFFINITY.to_string(), QUALITY.to_string()],
            target_mode: 1,
            r_ood: 4.0,
            affinity_scale: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self, mix: &GroundTruthMixture) -> Result<()> {
        if self.properties.is_empty() {
            return Err(Error::config("reward.properties", "at least one property"));
        }
        for p in &self.properties {
            if p != TARGET_AFFINITY && p != QUALITY {
                return Err(Error::UnknownProperty(p.clone()));
            }
        }
        let mut sorted = self.properties.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.properties.len() {
            return Err(Error::config("reward.properties", "duplicate property"));
        }
        if self.target_mode >= mix.n_modes() {
            return Err(Error::config("reward.target_mode", "no such mode"));
        }
        if !(self.r_ood > 0.0) {
            return Err(Error::config("reward.r_ood", "must be positive"));
        }
        if !(self.affinity_scale > 0.0 && self.affinity_scale.is_finite()) {
            return Err(Error::config("reward.affinity_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Property name to score.
pub type PropertyScores = BTreeMap<String, f64>;

/// Scores one sample: `target_affinity = −scale·‖x − μ_target‖` and
/// `quality = log p_mix(x)`.
pub fn score_sample(spec: &RewardSpec, mix: &GroundTruthMixture, x: [f64; 2]) -> PropertyScores {
    spec.properties
        .iter()
        .map(|p| {
            let v = match p.as_str() {
                TARGET_AFFINITY => -spec.affinity_scale * dist(x, mix.modes[spec.target_mode].mean),
                QUALITY => mix.log_pdf(x),
                other => unreachable!("validated property {other}"),
            };
            // Points far outside the mixture underflow the density.
            (p.clone(), if v.is_finite() { v } else { f64::MIN })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub properties: BTreeMap<String, f64>,
    pub total: f64,
    pub mode_counts: Vec<usize>,
    pub ood_count: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn property(&self, name: &str) -> Option<f64> {
        self.properties.get(name).copied()
    }

    /// Largest mode count over smallest.
    pub fn imbalance(&self) -> f64 {
        let max = *self.mode_counts.iter().max().unwrap_or(&0) as f64;
        let min = *self.mode_counts.iter().min().unwrap_or(&0) as f64;
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Aggregates scores and mode assignments over a batch of samples.
pub fn evaluate_samples(
    samples: &Tensor,
    spec: &RewardSpec,
    mix: &GroundTruthMixture,
    seed: u64,
) -> EvalReport {
    let n = samples.rows();
    let mut sums: BTreeMap<String, f64> = spec.properties.iter().map(|p| (p.clone(), 0.0)).collect();
    let mut mode_counts = vec![0; mix.n_modes()];
    let mut ood_count = 0;
    for x in samples.points() {
        for (p, v) in score_sample(spec, mix, x) {
            *sums.get_mut(&p).expect("configured property") += v;
        }
        match mix.assign_mode(x, spec.r_ood) {
            Assignment::Mode(k) => mode_counts[k] += 1,
            Assignment::Ood => ood_count += 1,
        }
    }
    let properties: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(p, s)| (p, if n > 0 { s / n as f64 } else { 0.0 }))
        .collect();
    let total = properties.values().sum::<f64>() / properties.len() as f64;
    EvalReport {
        properties,
        total,
        mode_counts,
        ood_count,
        n_samples: n,
        seed,
    }
}

/// Samples `n` points from `model` and evaluates them.
pub fn score_model<G: Generator + ?Sized>(
    model: &G,
    spec: &RewardSpec,
    mix: &GroundTruthMixture,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n < 100 {
        return Err(Error::config("n_eval_samples", "at least 100 samples"));
    }
    let samples = model.generate(n, seed)?;
    Ok(evaluate_samples(&samples, spec, mix, seed))
}

/// Properties whose mean dropped from `full` to `pruned`, largest drop first
/// (name ascending on equal drops). Empty when nothing dropped.
pub fn compare_reports(full: &EvalReport, pruned: &EvalReport) -> Result<Vec<String>> {
    let a: Vec<&String> = full.properties.keys().collect();
    let b: Vec<&String> = pruned.properties.keys().collect();
    if a != b {
        return Err(Error::PropertyMismatch(format!("{a:?} vs {b:?}")));
    }
    let mut drops: Vec<(String, f64)> = full
        .properties
        .iter()
        .filter_map(|(p, &f)| {
            let d = f - pruned.properties[p];
            (d > 0.0).then(|| (p.clone(), d))
        })
        .collect();
    drops.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    Ok(drops.into_iter().map(|(p, _)| p).collect())
}
