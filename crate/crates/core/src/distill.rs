//! Distillation objectives over preference pairs and the epoch trainer.
//!
//! For a pair `(x_w, x_l)`, a timestep `t` and noises `ε_w, ε_l`:
//!
//! ```text
//! d_w  = ‖ε_w − ε_θ(x_t^w, t)‖² − ‖ε_w − ε_ref(x_t^w, t)‖²
//! d_l  = ‖ε_l − ε_θ(x_t^l, t)‖² − ‖ε_l − ε_ref(x_t^l, t)‖²
//! dpo  = −log σ(−β·T·ω·(d_w − d_l))
//! sft  = ‖ε_θ(x_t^w, t) − ε_ref(x_t^w, t)‖²
//! total = dpo + w_sft·sft
//! ```
//!
//! Each term is averaged over the batch. The reference network is only ever
//! evaluated without a tape, so no gradient can reach it.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::curation::PreferencePair;
use crate::diffusion::{normal_points, DiffusionModel};
use crate::nn::{Graph, Optimizer, OptimizerKind, ParamVars, Tensor, Var};
use crate::{rng, Error, Result};

/// Weighting `ω(λ_t)` inside the DPO logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sft,
    Dpo,
    Redpo,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(LossKind::Sft),
            "dpo" => Ok(LossKind::Dpo),
            "redpo" => Ok(LossKind::Redpo),
            other => Err(Error::config("loss", format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sft => "sft",
            LossKind::Dpo => "dpo",
            LossKind::Redpo => "redpo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub beta: f64,
    pub omega: OmegaMode,
    pub w_sft: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shared_t: bool,
    pub seed: u64,
    #[serde(default = "OptimizerKind::adam")]
    pub optimizer: OptimizerKind,
}

impl Default for DistillConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            beta: 50.0,
            omega: OmegaMode::Constant(1.0),
            w_sft: 1.0,
            learning_rate: 1e-4,
            epochs: 2,
            batch_size: 64,
            shared_t: true,
            seed: 0,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl DistillConfig {
    /// Video-scale settings (β = 5000, lr = 6e-6, w_sft = 1e4).
    pub fn video_scale() -> Self {
        Self {
            beta: 5000.0,
            w_sft: 1e4,
            learning_rate: 6e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("{path}.beta"), "must be positive"));
        }
        if !(self.w_sft >= 0.0 && self.w_sft.is_finite()) {
            return Err(Error::config(format!("{path}.w_sft"), "must be >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{path}.learning_rate"), "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{path}.epochs"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
        }
        let OmegaMode::Constant(c) = self.omega;
        if !c.is_finite() {
            return Err(Error::config(format!("{path}.omega"), "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub sft: f64,
    pub total: f64,
}

/// Noise draws for one batch of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t_w: Vec<usize>,
    pub t_l: Vec<usize>,
    pub eps_w: Tensor,
    pub eps_l: Tensor,
}

impl NoiseDraw {
    /// Per pair, in order: `t`, then `t_l` when not shared, then `ε_w`, `ε_l`.
    pub fn draw(n: usize, steps: usize, shared_t: bool, rng: &mut rng::Rng) -> Self {
        let mut t_w = Vec::with_capacity(n);
        let mut t_l = Vec::with_capacity(n);
        let mut ew = Vec::with_capacity(2 * n);
        let mut el = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let t = rng.gen_range(0..steps);
            t_w.push(t);
            t_l.push(if shared_t { t } else { rng.gen_range(0..steps) });
            let w = normal_points(1, rng);
            let l = normal_points(1, rng);
            ew.extend_from_slice(w.data());
            el.extend_from_slice(l.data());
        }
        Self {
            t_w,
            t_l,
            eps_w: Tensor::new(vec![n, 2], ew).expect("n x 2"),
            eps_l: Tensor::new(vec![n, 2], el).expect("n x 2"),
        }
    }
}

/// Winner and loser points of a batch of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x_w: Tensor,
    pub x_l: Tensor,
}

impl PairBatch {
    pub fn new(pairs: &[&PreferencePair]) -> Self {
        let w: Vec<[f64; 2]> = pairs.iter().map(|p| p.x_w).collect();
        let l: Vec<[f64; 2]> = pairs.iter().map(|p| p.x_l).collect();
        Self {
            x_w: Tensor::from_points(&w),
            x_l: Tensor::from_points(&l),
        }
    }

    pub fn from_pairs(pairs: &[PreferencePair]) -> Self {
        Self::new(&pairs.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.x_w.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Student/teacher predictions on one branch.
struct Branch {
    pred: Var,
    ref_pred: Tensor,
    /// `‖ε − ε_θ‖² − ‖ε − ε_ref‖²` per row, `[n,1]`.
    delta: Var,
}

fn row_sq_norm(t: &Tensor) -> Tensor {
    let data = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum()).collect();
    Tensor::new(vec![t.rows(), 1], data).expect("rows x 1")
}

fn branch(
    g: &mut Graph,
    student: &DiffusionModel,
    pv: &ParamVars,
    teacher: &DiffusionModel,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Branch> {
    let xt = student.schedule.q_sample(x0, t, eps)?;
    let pred = student.net.forward_with(g, pv, &xt, t)?;
    let ref_pred = teacher.net.forward(&xt, t)?;
    let ref_err = row_sq_norm(&eps.zip_map(&ref_pred, |e, r| e - r));
    let eps_v = g.constant(eps.clone());
    let diff = g.sub(eps_v, pred)?;
    let sq = g.square(diff);
    let err = g.row_sum(sq);
    let ref_err = g.constant(ref_err);
    let delta = g.sub(err, ref_err)?;
    Ok(Branch { pred, ref_pred, delta })
}

fn sft_term(g: &mut Graph, pred: Var, ref_pred: Tensor) -> Result<Var> {
    let r = g.constant(ref_pred);
    let d = g.sub(pred, r)?;
    let sq = g.square(d);
    let per = g.row_sum(sq);
    Ok(g.mean(per))
}

/// Recorded objective for one batch.
pub struct Objective {
    /// Scalar that is differentiated.
    pub loss: Var,
    /// Per-pair DPO losses `[n,1]`, absent in SFT mode.
    pub dpo_per_pair: Option<Var>,
    pub breakdown: LossBreakdown,
}

fn check_models(student: &DiffusionModel, teacher: &DiffusionModel) -> Result<()> {
    if student.schedule != teacher.schedule {
        return Err(Error::Schedule("student and teacher schedules differ".into()));
    }
    Ok(())
}

/// Records the objective of `kind` on `g` for a batch and fixed noise draws.
///
/// In `Sft` mode the breakdown reports `dpo = 0` and `total = sft`; in `Dpo`
/// mode the SFT value is reported but not optimized and `total = dpo`.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    g: &mut Graph,
    student: &DiffusionModel,
    pv: &ParamVars,
    teacher: &DiffusionModel,
    batch: &PairBatch,
    draw: &NoiseDraw,
    cfg: &DistillConfig,
    kind: LossKind,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("distillation loss"));
    }
    check_models(student, teacher)?;
    let w = branch(g, student, pv, teacher, &batch.x_w, &draw.t_w, &draw.eps_w)?;
    let sft = sft_term(g, w.pred, w.ref_pred)?;
    let sft_v = g.value(sft).item();
    if kind == LossKind::Sft {
        return Ok(Objective {
            loss: sft,
            dpo_per_pair: None,
            breakdown: LossBreakdown {
                dpo: 0.0,
                sft: sft_v,
                total: sft_v,
            },
        });
    }
    let l = branch(g, student, pv, teacher, &batch.x_l, &draw.t_l, &draw.eps_l)?;
    let diff = g.sub(w.delta, l.delta)?;
    let steps = student.schedule.steps() as f64;
    let OmegaMode::Constant(omega) = cfg.omega;
    let logits = g.scale(diff, -cfg.beta * steps * omega);
    let ls = g.log_sigmoid(logits);
    let per_pair = g.scale(ls, -1.0);
    let dpo = g.mean(per_pair);
    let dpo_v = g.value(dpo).item();
    let (loss, w_sft) = match kind {
        LossKind::Redpo if cfg.w_sft != 0.0 => {
            let weighted = g.scale(sft, cfg.w_sft);
            (g.add(dpo, weighted)?, cfg.w_sft)
        }
        LossKind::Redpo => (dpo, cfg.w_sft),
        _ => (dpo, 0.0),
    };
    Ok(Objective {
        loss,
        dpo_per_pair: Some(per_pair),
        breakdown: LossBreakdown {
            dpo: dpo_v,
            sft: sft_v,
            total: dpo_v + w_sft * sft_v,
        },
    })
}

/// Winner-branch SFT loss with caller-supplied `t` and `ε`.
#[allow(clippy::too_many_arguments)]
pub fn loss_sft(
    g: &mut Graph,
    student: &DiffusionModel,
    pv: &ParamVars,
    teacher: &DiffusionModel,
    x_w: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    check_models(student, teacher)?;
    if x_w.rows() == 0 {
        return Err(Error::EmptyBatch("loss_sft"));
    }
    let xt = student.schedule.q_sample(x_w, t, eps)?;
    let pred = student.net.forward_with(g, pv, &xt, t)?;
    let ref_pred = teacher.net.forward(&xt, t)?;
    sft_term(g, pred, ref_pred)
}

/// Diffusion-DPO loss with noise drawn from `rng`.
pub fn loss_diff_dpo(
    g: &mut Graph,
    student: &DiffusionModel,
    pv: &ParamVars,
    teacher: &DiffusionModel,
    batch: &PairBatch,
    cfg: &DistillConfig,
    rng: &mut rng::Rng,
) -> Result<Objective> {
    let draw = NoiseDraw::draw(batch.len(), student.schedule.steps(), cfg.shared_t, rng);
    objective(g, student, pv, teacher, batch, &draw, cfg, LossKind::Dpo)
}

/// Regularized loss `dpo + w_sft·sft`, consuming the same random stream as
/// [`loss_diff_dpo`].
pub fn loss_redpo(
    g: &mut Graph,
    student: &DiffusionModel,
    pv: &ParamVars,
    teacher: &DiffusionModel,
    batch: &PairBatch,
    cfg: &DistillConfig,
    rng: &mut rng::Rng,
) -> Result<Objective> {
    let draw = NoiseDraw::draw(batch.len(), student.schedule.steps(), cfg.shared_t, rng);
    objective(g, student, pv, teacher, batch, &draw, cfg, LossKind::Redpo)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DistillHistory {
    /// Mean breakdown over the batches of each epoch.
    pub epochs: Vec<LossBreakdown>,
    pub steps: usize,
}

/// Trains `student` against the frozen `teacher` on `dataset`:
/// `epochs` passes of shuffled mini-batches, one Adam step per batch.
pub fn train_distill(
    student: &mut DiffusionModel,
    teacher: &DiffusionModel,
    dataset: &[PreferencePair],
    cfg: &DistillConfig,
    kind: LossKind,
) -> Result<DistillHistory> {
    cfg.validate("distill")?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch("train_distill dataset"));
    }
    check_models(student, teacher)?;
    let mut r = rng::rng(rng::derive(cfg.seed, "distill"));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &student.net)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = DistillHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<&PreferencePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batch = PairBatch::new(&pairs);
            let draw = NoiseDraw::draw(batch.len(), student.schedule.steps(), cfg.shared_t, &mut r);
            let mut g = Graph::new();
            let pv = student.net.register(&mut g);
            let obj = objective(&mut g, student, &pv, teacher, &batch, &draw, cfg, kind)?;
            let grads = g
                .backward(obj.loss)
                .map_err(|_| Error::DivergedAt { epoch, batch: bi })?;
            let gr = student.net.gradients(&pv, &grads);
            opt.step(&mut student.net, &gr)?;
            sum.dpo += obj.breakdown.dpo;
            sum.sft += obj.breakdown.sft;
            sum.total += obj.breakdown.total;
            batches += 1;
            history.steps += 1;
        }
        let n = batches as f64;
        history.epochs.push(LossBreakdown {
            dpo: sum.dpo / n,
            sft: sum.sft / n,
            total: sum.total / n,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, ScheduleConfig};
    use crate::nn::{EpsilonNet, NetArch};

    fn model(seed: u64) -> DiffusionModel {
        let net = EpsilonNet::new(
            NetArch {
                input_dim: 2,
                time_embed_dim: 4,
                hidden_width: 6,
                n_blocks: 2,
            },
            seed,
        )
        .unwrap();
        DiffusionModel::new(net, NoiseSchedule::linear(ScheduleConfig::default()).unwrap()).unwrap()
    }

    fn pairs(n: usize) -> Vec<PreferencePair> {
        (0..n)
            .map(|i| PreferencePair {
                stage: 0,
                target: "t".into(),
                condition_id: i,
                x_w: [0.1 * i as f64, 1.0],
                x_l: [-1.0, 0.05 * i as f64],
                scores_w: Default::default(),
                scores_l: Default::default(),
            })
            .collect()
    }

    #[test]
    fn self_reference_gives_ln2() {
        let m = model(0);
        let batch = PairBatch::from_pairs(&pairs(8));
        let mut g = Graph::new();
        let pv = m.net.register(&mut g);
        let obj = loss_diff_dpo(&mut g, &m, &pv, &m, &batch, &DistillConfig::default(), &mut rng::rng(1)).unwrap();
        for &v in g.value(obj.dpo_per_pair.unwrap()).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let pv = m.net.register(&mut g);
        let obj = loss_redpo(&mut g, &m, &pv, &m, &batch, &DistillConfig::default(), &mut rng::rng(1)).unwrap();
        assert_eq!(obj.breakdown.sft, 0.0);
        assert!((obj.breakdown.total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_logit() {
        // −log σ(1) for logit −β·T·ω·(d_w − d_l) = 1.
        assert!((-crate::nn::graph::log_sigmoid(1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn sft_is_one_for_unit_offset() {
        let teacher = model(3);
        let mut student = teacher.clone();
        student.net.head.bias.data_mut()[0] += 1.0;
        let x = Tensor::from_points(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]);
        let eps = Tensor::from_points(&[[0.3, 0.1], [-1.0, 0.0], [0.0, 0.0]]);
        let mut g = Graph::new();
        let pv = student.net.register(&mut g);
        let l = loss_sft(&mut g, &student, &pv, &teacher, &x, &[0, 50, 99], &eps).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn redpo_without_sft_equals_dpo_bitwise() {
        let teacher = model(1);
        let mut student = teacher.clone();
        student.net.perturb(0.05, 9);
        let batch = PairBatch::from_pairs(&pairs(5));
        let cfg = DistillConfig {
            w_sft: 0.0,
            ..Default::default()
        };
        let run = |kind: LossKind| {
            let mut g = Graph::new();
            let pv = student.net.register(&mut g);
            let mut r = rng::rng(4);
            let obj = match kind {
                LossKind::Dpo => loss_diff_dpo(&mut g, &student, &pv, &teacher, &batch, &cfg, &mut r),
                _ => loss_redpo(&mut g, &student, &pv, &teacher, &batch, &cfg, &mut r),
            }
            .unwrap();
            let grads = g.backward(obj.loss).unwrap();
            (g.value(obj.loss).item().to_bits(), student.net.gradients(&pv, &grads))
        };
        assert_eq!(run(LossKind::Dpo), run(LossKind::Redpo));
    }

    #[test]
    fn empty_batch_errors() {
        let m = model(0);
        let mut g = Graph::new();
        let pv = m.net.register(&mut g);
        let batch = PairBatch::from_pairs(&[]);
        assert!(loss_diff_dpo(&mut g, &m, &pv, &m, &batch, &DistillConfig::default(), &mut rng::rng(0)).is_err());
    }

    #[test]
    fn one_step_per_epoch_with_full_batch() {
        let teacher = model(2);
        let mut student = model(3);
        let data = pairs(10);
        let cfg = DistillConfig {
            epochs: 1,
            batch_size: 10,
            ..Default::default()
        };
        let h = train_distill(&mut student, &teacher, &data, &cfg, LossKind::Redpo).unwrap();
        assert_eq!(h.steps, 1);
        assert_eq!(h.epochs.len(), 1);
    }

    #[test]
    fn config_validation_paths() {
        let bad = DistillConfig {
            beta: 0.0,
            ..Default::default()
        };
        match bad.validate("distill") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "distill.beta"),
            other => panic!("{other:?}"),
        }
        let bad = DistillConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate("distill").is_err());
    }
}
