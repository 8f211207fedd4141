//! Time-conditioned residual MLP that predicts the noise added to a 2D point.
//!
//! Layout: `[x, sinusoidal(t)] -> dense -> SiLU -> blocks -> dense head`, where
//! each residual block computes `h + W2·SiLU(W1·h + b1) + b2`. Every block is
//! width-preserving, so any subset of blocks can be masked out (identity
//! bypass) without changing tensor shapes.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{linear_forward, silu, Grads, Graph, Var};
use super::tensor::Tensor;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub input_dim: usize,
    pub time_embed_dim: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetPreset {
    /// Four residual blocks of width 64; the toy-experiment teacher.
    Teacher,
    /// Two residual blocks of width 32; the low-capacity base student.
    BaseStudent,
    /// Six residual blocks of width 64; the teacher pruned by the staged pipeline.
    PipelineTeacher,
}

impl NetPreset {
    pub fn arch(self) -> NetArch {
        let (hidden_width, n_blocks) = match self {
            NetPreset::Teacher => (64, 4),
            NetPreset::BaseStudent => (32, 2),
            NetPreset::PipelineTeacher => (64, 6),
        };
        NetArch {
            input_dim: 2,
            time_embed_dim: 16,
            hidden_width,
            n_blocks,
        }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != 2 {
            return Err(Error::Architecture(format!(
                "input_dim must be 2, got {}",
                self.input_dim
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Architecture(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        if self.hidden_width == 0 {
            return Err(Error::Architecture("hidden_width must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Architecture("at least one block is required".into()));
        }
        Ok(())
    }

    fn features(&self) -> usize {
        self.input_dim + self.time_embed_dim
    }
}

/// Fully connected layer, `y = x·W + b` with `W:[in,out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn he(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub dense1: Dense,
    pub dense2: Dense,
}

impl ResidualBlock {
    fn residual(&self, h: &Tensor) -> Result<Tensor> {
        let a = self.dense1.forward(h)?.map(silu);
        self.dense2.forward(&a)
    }

    pub fn param_count(&self) -> usize {
        self.dense1.param_count() + self.dense2.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonNet {
    arch: NetArch,
    pub input: Dense,
    pub blocks: Vec<ResidualBlock>,
    pub head: Dense,
    block_active: Vec<bool>,
    rng_seed: u64,
}

/// Graph handles for each parameter, in canonical order; `None` for
/// parameters of masked blocks.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Option<Var>>);

/// One gradient tensor per parameter, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Sinusoidal timestep features, `[sin(t·f_0..), cos(t·f_0..)]` with
/// geometrically spaced frequencies from 1 down to 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

impl EpsilonNet {
    pub fn new(arch: NetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::rng(seed);
        let w = arch.hidden_width;
        let input = Dense::he(arch.features(), w, &mut r);
        let blocks = (0..arch.n_blocks)
            .map(|_| ResidualBlock {
                dense1: Dense::he(w, w, &mut r),
                dense2: Dense::he(w, w, &mut r),
            })
            .collect();
        let head = Dense::he(w, arch.input_dim, &mut r);
        Ok(Self {
            arch,
            input,
            blocks,
            head,
            block_active: vec![true; arch.n_blocks],
            rng_seed: seed,
        })
    }

    pub fn from_preset(preset: NetPreset, seed: u64) -> Result<Self> {
        Self::new(preset.arch(), seed)
    }

    pub fn arch(&self) -> NetArch {
        self.arch
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn block_active(&self) -> &[bool] {
        &self.block_active
    }

    pub fn active_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| self.block_active[i])
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.block_active.iter().filter(|&&a| a).count()
    }

    /// Masks or unmasks a block. Refuses to mask the last active block.
    pub fn set_block_active(&mut self, block: usize, active: bool) -> Result<()> {
        if block >= self.blocks.len() {
            return Err(Error::NoSuchBlock(block));
        }
        if !active && self.block_active[block] && self.n_active() == 1 {
            return Err(Error::TooManyBlocks { k: 1, active: 1 });
        }
        self.block_active[block] = active;
        Ok(())
    }

    /// Parameters of the input layer, head, and active blocks.
    pub fn param_count(&self) -> usize {
        self.input.param_count()
            + self.head.param_count()
            + self
                .blocks
                .iter()
                .zip(&self.block_active)
                .filter(|(_, &a)| a)
                .map(|(b, _)| b.param_count())
                .sum::<usize>()
    }

    /// Number of parameter tensors (active or not).
    pub fn n_param_tensors(&self) -> usize {
        4 + 4 * self.blocks.len()
    }

    /// Block that owns parameter tensor `idx`, if any.
    pub fn param_owner(&self, idx: usize) -> Option<usize> {
        let n = self.blocks.len();
        (2..2 + 4 * n).contains(&idx).then(|| (idx - 2) / 4)
    }

    pub fn param_is_active(&self, idx: usize) -> bool {
        self.param_owner(idx).is_none_or(|b| self.block_active[b])
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.dense1.weight"), &b.dense1.weight));
            out.push((format!("blocks.{i}.dense1.bias"), &b.dense1.bias));
            out.push((format!("blocks.{i}.dense2.weight"), &b.dense2.weight));
            out.push((format!("blocks.{i}.dense2.bias"), &b.dense2.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        for b in &mut self.blocks {
            out.push(&mut b.dense1.weight);
            out.push(&mut b.dense1.bias);
            out.push(&mut b.dense2.weight);
            out.push(&mut b.dense2.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// SHA-256 over architecture, block mask, and raw parameter bits.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [
            self.arch.input_dim,
            self.arch.time_embed_dim,
            self.arch.hidden_width,
            self.arch.n_blocks,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for &a in &self.block_active {
            h.update([a as u8]);
        }
        for t in self.params() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `[x, embed(t)]` rows.
    pub fn embed(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        x.expect_matrix("forward input", self.arch.input_dim)?;
        if t.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "forward timesteps",
                dim: 0,
                expected: x.rows(),
                got: t.len(),
            });
        }
        let f = self.arch.features();
        let mut data = Vec::with_capacity(x.rows() * f);
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for (r, &tt) in t.iter().enumerate() {
            data.extend_from_slice(x.row(r));
            match &cached {
                Some((ct, e)) if *ct == tt => data.extend_from_slice(e),
                _ => {
                    let e = time_embedding(tt, self.arch.time_embed_dim);
                    data.extend_from_slice(&e);
                    cached = Some((tt, e));
                }
            }
        }
        Tensor::new(vec![x.rows(), f], data)
    }

    /// Predicted noise for a batch, without recording a tape.
    pub fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let inp = self.embed(x, t)?;
        let mut h = self.input.forward(&inp)?.map(silu);
        for (b, &active) in self.blocks.iter().zip(&self.block_active) {
            if active {
                let f = b.residual(&h)?;
                h = h.zip_map(&f, |a, c| a + c);
            }
        }
        self.head.forward(&h)
    }

    /// Same computation as [`forward`](Self::forward), recorded on `g` with
    /// every active parameter registered as a trainable leaf.
    pub fn forward_graph(&self, g: &mut Graph, x: &Tensor, t: &[usize]) -> Result<(Var, ParamVars)> {
        let pv = self.register(g);
        let out = self.forward_with(g, &pv, x, t)?;
        Ok((out, pv))
    }

    /// Records a forward pass that reuses already-registered parameter leaves,
    /// so several passes share one set of gradients.
    pub fn forward_with(&self, g: &mut Graph, pv: &ParamVars, x: &Tensor, t: &[usize]) -> Result<Var> {
        let p = |i: usize| pv.0[i].expect("active parameter registered");
        let inp = g.constant(self.embed(x, t)?);
        let pre = g.linear(inp, p(0), p(1))?;
        let mut h = g.silu(pre);
        for (bi, &active) in self.block_active.iter().enumerate() {
            if !active {
                continue;
            }
            let base = 2 + 4 * bi;
            let a = g.linear(h, p(base), p(base + 1))?;
            let s = g.silu(a);
            let f = g.linear(s, p(base + 2), p(base + 3))?;
            h = g.add(h, f)?;
        }
        let last = 2 + 4 * self.blocks.len();
        g.linear(h, p(last), p(last + 1))
    }

    /// Collects per-parameter gradients; masked parameters get zeros.
    pub fn gradients(&self, pv: &ParamVars, grads: &Grads) -> Gradients {
        Gradients(
            self.params()
                .into_iter()
                .zip(&pv.0)
                .map(|(p, v)| {
                    v.and_then(|v| grads.get(v).cloned())
                        .unwrap_or_else(|| Tensor::zeros(p.shape()))
                })
                .collect(),
        )
    }

    /// Registers parameters on `g` without running a forward pass.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars(
            self.params()
                .into_iter()
                .enumerate()
                .map(|(i, p)| self.param_is_active(i).then(|| g.param(p.clone())))
                .collect(),
        )
    }

    /// Overwrites the raw parts; used by checkpoint loading.
    pub(crate) fn from_parts(
        arch: NetArch,
        mut tensors: Vec<Tensor>,
        block_active: Vec<bool>,
        rng_seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let mut net = Self::new(arch, 0)?;
        if tensors.len() != net.n_param_tensors() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                net.n_param_tensors(),
                tensors.len()
            )));
        }
        if block_active.len() != arch.n_blocks || !block_active.iter().any(|&a| a) {
            return Err(Error::Checkpoint("invalid block_active mask".into()));
        }
        for (i, slot) in net.params_mut().into_iter().enumerate() {
            let t = std::mem::replace(&mut tensors[i], Tensor::zeros(&[0]));
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("checkpoint parameters"));
            }
            *slot = t;
        }
        net.block_active = block_active;
        net.rng_seed = rng_seed;
        Ok(net)
    }

    /// Zeroes the output head so the net predicts zero everywhere.
    pub fn zero_head(&mut self) {
        let w = self.arch.hidden_width;
        self.head = Dense::zeros(w, self.arch.input_dim);
    }

    /// Adds Gaussian noise of the given scale to every parameter.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut r = rng::rng(seed);
        for p in self.params_mut() {
            for v in p.data_mut() {
                let z: f64 = r.sample(StandardNormal);
                *v += scale * z;
            }
        }
    }
}
