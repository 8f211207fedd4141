use serde::{Deserialize, Serialize};

use super::net::{EpsilonNet, Gradients};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or bias-corrected Adam. Parameters of masked blocks are skipped.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, net: &EpsilonNet) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        let zeros: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            kind,
            learning_rate,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn sgd(learning_rate: f64, net: &EpsilonNet) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, net)
    }

    pub fn adam(learning_rate: f64, net: &EpsilonNet) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate, net)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&mut self, net: &mut EpsilonNet, grads: &Gradients) -> Result<()> {
        if grads.0.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                dim: 0,
                expected: self.m.len(),
                got: grads.0.len(),
            });
        }
        for (i, (g, m)) in grads.0.iter().zip(&self.m).enumerate() {
            if g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    dim: i,
                    expected: m.len(),
                    got: g.len(),
                });
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        let active: Vec<bool> = (0..self.m.len()).map(|i| net.param_is_active(i)).collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), &on) in net.params_mut().into_iter().zip(&grads.0).zip(&active) {
                    if !on {
                        continue;
                    }
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let params = net.params_mut();
                for (i, (p, g)) in params.into_iter().zip(&grads.0).enumerate() {
                    if !active[i] {
                        continue;
                    }
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, pv) in p.data_mut().iter_mut().enumerate() {
                        let gv = g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *pv -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::net::NetArch;

    fn one_param_net(p: f64) -> EpsilonNet {
        let mut net = EpsilonNet::new(
            NetArch {
                input_dim: 2,
                time_embed_dim: 2,
                hidden_width: 1,
                n_blocks: 1,
            },
            0,
        )
        .unwrap();
        for t in net.params_mut() {
            t.data_mut().fill(p);
        }
        net
    }

    fn grads_like(net: &EpsilonNet, g: f64) -> Gradients {
        Gradients(net.params().iter().map(|p| Tensor::filled(p.shape(), g)).collect())
    }

    #[test]
    fn sgd_step() {
        let mut net = one_param_net(1.0);
        let mut opt = Optimizer::sgd(0.1, &net).unwrap();
        let g = grads_like(&net, 2.0);
        opt.step(&mut net, &g).unwrap();
        for p in net.params() {
            assert!(p.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut net = one_param_net(1.0);
        let lr = 1e-3;
        let mut opt = Optimizer::adam(lr, &net).unwrap();
        let g = grads_like(&net, 1.0);
        opt.step(&mut net, &g).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = lr / (1 + eps).
        let expect = 1.0 - lr / (1.0 + 1e-8);
        for p in net.params() {
            assert!(p.data().iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut net = one_param_net(0.3);
            let before = net.clone();
            let mut opt = Optimizer::new(kind, 0.5, &net).unwrap();
            let g = grads_like(&net, 0.0);
        opt.step(&mut net, &g).unwrap();
            assert_eq!(net, before);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_rates() {
        let mut net = one_param_net(0.0);
        assert!(Optimizer::sgd(0.0, &net).is_err());
        let mut opt = Optimizer::sgd(0.1, &net).unwrap();
        assert!(opt.step(&mut net, &Gradients(vec![])).is_err());
    }
}
