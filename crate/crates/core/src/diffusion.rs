//! Discrete-time DDPM: forward noising, the epsilon-MSE training loss, and
//! ancestral sampling.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{checkpoint, EpsilonNet, Graph, Optimizer, ParamVars, Tensor, Var};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.2,
        }
    }
}

/// Linear-beta DDPM schedule over timesteps `0..steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_min,
            beta_max,
        } = config;
        if steps == 0 {
            return Err(Error::Schedule("steps must be positive".into()));
        }
        if !(0.0 < beta_min && beta_min < 1.0 && beta_max < 1.0) {
            return Err(Error::Schedule("betas must lie in (0, 1)".into()));
        }
        if steps > 1 && beta_max <= beta_min {
            return Err(Error::Schedule("beta_max must exceed beta_min".into()));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_max]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(config, beta)
    }

    /// Schedule with explicit per-step variances.
    pub fn from_betas(config: ScheduleConfig, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("empty schedule".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Schedule("betas must lie in (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Schedule("betas must be strictly increasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            config: ScheduleConfig {
                steps: beta.len(),
                ..config
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`, one timestep per row.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        x0.expect_matrix("q_sample x0", 2)?;
        eps.expect_matrix("q_sample eps", 2)?;
        if eps.rows() != x0.rows() || t.len() != x0.rows() {
            return Err(Error::ShapeMismatch {
                op: "q_sample",
                dim: 0,
                expected: x0.rows(),
                got: if eps.rows() != x0.rows() { eps.rows() } else { t.len() },
            });
        }
        let mut out = Vec::with_capacity(x0.len());
        for (r, &tt) in t.iter().enumerate() {
            self.check_t(tt)?;
            let ab = self.alpha_bar[tt];
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (x, e) in x0.row(r).iter().zip(eps.row(r)) {
                out.push(s * x + n * e);
            }
        }
        Tensor::new(vec![x0.rows(), 2], out)
    }

    /// Posterior variance `β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t`; zero at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
        }
    }
}

/// Draws `n` standard-normal 2-vectors.
pub fn normal_points(n: usize, rng: &mut rng::Rng) -> Tensor {
    let data = (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, 2], data).expect("n x 2")
}

/// Source of 2D samples, keyed by a seed.
pub trait Generator {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor>;
}

/// Epsilon network paired with its noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub net: EpsilonNet,
    pub schedule: NoiseSchedule,
}

const SAMPLE_CHUNK: usize = 512;

impl DiffusionModel {
    pub fn new(net: EpsilonNet, schedule: NoiseSchedule) -> Result<Self> {
        if net.arch().input_dim != 2 {
            return Err(Error::Architecture("diffusion data is 2D".into()));
        }
        Ok(Self { net, schedule })
    }

    pub fn checkpoint_hash(&self) -> Result<String> {
        checkpoint::checkpoint_hash(&self.net)
    }

    /// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`. Chain `i` draws
    /// all of its noise from its own stream `(seed, i)`, so results do not
    /// depend on how chains are batched.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut out = Vec::with_capacity(2 * n);
        let mut start = 0;
        while start < n {
            let end = (start + SAMPLE_CHUNK).min(n);
            let chunk = self.sample_chains(start, end, seed)?;
            out.extend_from_slice(chunk.data());
            start = end;
        }
        Tensor::new(vec![n, 2], out)
    }

    fn sample_chains(&self, start: usize, end: usize, seed: u64) -> Result<Tensor> {
        let m = end - start;
        let mut rngs: Vec<rng::Rng> = (start..end).map(|i| rng::chain_rng(seed, i as u64)).collect();
        let mut x: Vec<f64> = Vec::with_capacity(2 * m);
        for r in rngs.iter_mut() {
            x.push(r.sample(StandardNormal));
            x.push(r.sample(StandardNormal));
        }
        let mut x = Tensor::new(vec![m, 2], x)?;
        let s = &self.schedule;
        for t in (0..s.steps()).rev() {
            let eps_hat = self.net.forward(&x, &vec![t; m])?;
            let coef = s.beta[t] / (1.0 - s.alpha_bar[t]).sqrt();
            let inv_sqrt_alpha = 1.0 / s.alpha[t].sqrt();
            let sigma = s.posterior_variance(t).sqrt();
            let xd = x.data_mut();
            for (i, r) in rngs.iter_mut().enumerate() {
                for d in 0..2 {
                    let k = 2 * i + d;
                    let mean = inv_sqrt_alpha * (xd[k] - coef * eps_hat.data()[k]);
                    xd[k] = if t > 0 {
                        let z: f64 = r.sample(StandardNormal);
                        mean + sigma * z
                    } else {
                        mean
                    };
                }
            }
        }
        Ok(x)
    }

    /// Records `mean_i ‖ε_i − ε_θ(x_t, t_i)‖²` with `t ~ U{0..T−1}` and
    /// `ε ~ N(0, I)` drawn from `rng`, using the given parameter leaves.
    pub fn train_loss(&self, g: &mut Graph, pv: &ParamVars, x0: &Tensor, rng: &mut rng::Rng) -> Result<Var> {
        if x0.rows() == 0 {
            return Err(Error::EmptyBatch("diffusion_train_loss"));
        }
        let n = x0.rows();
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.schedule.steps())).collect();
        let eps = normal_points(n, rng);
        let xt = self.schedule.q_sample(x0, &t, &eps)?;
        let pred = self.net.forward_with(g, pv, &xt, &t)?;
        let target = g.constant(eps);
        let diff = g.sub(target, pred)?;
        let sq = g.square(diff);
        let per = g.row_sum(sq);
        Ok(g.mean(per))
    }
}

impl Generator for DiffusionModel {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        self.sample(n, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-step probability of skipping each active block (stochastic
    /// depth), which makes the trained net tolerant to block removal.
    pub block_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            learning_rate: 1e-3,
            block_drop: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config(format!("{path}.steps"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{path}.learning_rate"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.block_drop) {
            return Err(Error::config(format!("{path}.block_drop"), "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam on the epsilon-MSE with a fresh data batch from `data` at every step.
/// With `block_drop > 0` each active block is skipped independently per step
/// (at least one block always runs); skipped blocks receive no update.
/// Returns the per-step loss history.
pub fn train_diffusion<F>(model: &mut DiffusionModel, cfg: &TrainConfig, seed: u64, mut data: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut rng::Rng) -> Tensor,
{
    let mut data_rng = rng::rng(rng::derive(seed, "data"));
    let mut noise_rng = rng::rng(rng::derive(seed, "noise"));
    let mut drop_rng = rng::rng(rng::derive(seed, "block_drop"));
    let active = model.net.active_blocks();
    let mut opt = Optimizer::adam(cfg.learning_rate, &model.net)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x0 = data(cfg.batch_size, &mut data_rng);
        let dropped: Vec<usize> = if cfg.block_drop > 0.0 {
            let d: Vec<usize> = active.iter().copied().filter(|_| drop_rng.gen_bool(cfg.block_drop)).collect();
            if d.len() == active.len() {
                Vec::new()
            } else {
                d
            }
        } else {
            Vec::new()
        };
        for &b in &dropped {
            model.net.set_block_active(b, false)?;
        }
        let mut g = Graph::new();
        let pv = model.net.register(&mut g);
        let loss = model.train_loss(&mut g, &pv, &x0, &mut noise_rng)?;
        let grads = g.backward(loss).map_err(|_| Error::DivergedAt { epoch: 0, batch: step })?;
        history.push(g.value(loss).item());
        let gr = model.net.gradients(&pv, &grads);
        opt.step(&mut model.net, &gr)?;
        for &b in &dropped {
            model.net.set_block_active(b, true)?;
        }
    }
    Ok(history)
}
