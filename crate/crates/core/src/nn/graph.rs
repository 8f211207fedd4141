//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `x·W + b`; `W:[in,out]`, `b:[out]`.
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Square(Var),
    /// `[m,n] -> [m,1]`
    RowSum(Var),
    /// Mean of all entries, `-> [1,1]`.
    Mean(Var),
    /// Sum of all entries, `-> [1,1]`.
    Sum(Var),
    LogSigmoid(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log σ(x)` without overflow for large |x|.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Dense layer forward shared by the tape and the tape-free evaluator.
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (x.rows(), x.cols());
    let (wk, n) = (w.rows(), w.cols());
    if k != wk {
        return Err(Error::ShapeMismatch {
            op: "linear",
            dim: 1,
            expected: wk,
            got: k,
        });
    }
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "linear bias",
            dim: 0,
            expected: n,
            got: b.len(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(b.data());
    }
    gemm(x.data(), (k, 1), w.data(), (n, 1), &mut out, m, k, n, 1.0);
    Tensor::new(vec![m, n], out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = linear_forward(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear(x, w, b), ng))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(Error::ShapeMismatch {
                op,
                dim: 0,
                expected: sa.len(),
                got: sb.len(),
            });
        }
        for (d, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::ShapeMismatch {
                    op,
                    dim: d,
                    expected: *x,
                    got: *y,
                });
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.needs(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::new(vec![v.rows(), 1], data).expect("rows x 1");
        let ng = self.needs(a);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::LogSigmoid(a), ng)
    }

    /// Reverse sweep from a scalar `loss`. Fails without producing any
    /// gradient when the loss is not a finite scalar.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 || !lv.item().is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are consumed; only leaf gradients are kept.
            let Some(g) = grads[i].take() else { continue };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Linear(x, w, b) => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    if self.needs(x) {
                        // dX = dY · Wᵀ
                        let mut dx = vec![0.0; m * k];
                        gemm(g.data(), (n, 1), wv.data(), (1, n), &mut dx, m, n, k, 0.0);
                        accumulate(&mut grads, x, Tensor::new(vec![m, k], dx)?);
                    }
                    if self.needs(w) {
                        // dW = Xᵀ · dY
                        let mut dw = vec![0.0; k * n];
                        gemm(xv.data(), (1, k), g.data(), (n, 1), &mut dw, k, m, n, 0.0);
                        accumulate(&mut grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; n];
                        for r in 0..m {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        let shape = self.value(b).shape().to_vec();
                        accumulate(&mut grads, b, Tensor::new(shape, db)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.map(|v| -v));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.map(|v| c * v)),
                Op::Silu(a) => {
                    let d = g.zip_map(self.value(a), |gv, x| gv * silu_grad(x));
                    accumulate(&mut grads, a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(a), |gv, x| 2.0 * x * gv);
                    accumulate(&mut grads, a, d);
                }
                Op::RowSum(a) => {
                    let av = self.value(a);
                    let cols = av.cols();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv, cols))
                        .collect();
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), data)?);
                }
                Op::Mean(a) => {
                    let av = self.value(a);
                    let d = Tensor::filled(av.shape(), g.item() / av.len() as f64);
                    accumulate(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let d = Tensor::filled(self.value(a).shape(), g.item());
                    accumulate(&mut grads, a, d);
                }
                Op::LogSigmoid(a) => {
                    // d/dx log σ(x) = σ(−x)
                    let d = g.zip_map(self.value(a), |gv, x| gv * sigmoid(-x));
                    accumulate(&mut grads, a, d);
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` influences it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = g.square(p);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(1.0));
        let s = g.sub(p, c).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 1.0);
    }

    #[test]
    fn nan_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(f64::NAN));
        let loss = g.sum(p);
        assert!(matches!(g.backward(loss), Err(Error::NonFiniteLoss)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_eq!(log_sigmoid(800.0), 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn linear_matches_manual() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.param(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.param(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 1.5]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
