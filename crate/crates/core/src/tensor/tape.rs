//! Append-only gradient tape.
//!
//! Values live on the tape; a [`Var`] is a handle to one recorded node.
//! Leaves created with [`Tape::param`] receive gradients, leaves created with
//! [`Tape::constant`] do not. A tape built with [`Tape::no_grad`] records
//! values only, which is what inference uses.

use super::kernels::{self, NormStats};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, padding: usize },
    Upsample2x(Var),
    AvgPool2x(Var),
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    AddChannelBias(Var, Var),
    ConcatChannels(Var, Var),
    Sum(Var),
    MeanSquared(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter leaf, in the order
/// the parameters were registered.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Var>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.params.iter().position(|p| *p == v).map(|i| &self.grads[i])
    }

    /// Gradients in parameter registration order.
    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            record: true,
        }
    }

    /// A tape that never tracks gradients.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = kernels::scale(self.value(a), s);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), self.value(kernel), padding)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                padding,
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Upsample2x(x), rg))
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avgpool2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::AvgPool2x(x), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = kernels::silu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Silu(x), rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, stats) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = kernels::add_channel_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(y, Op::AddChannelBias(x, bias), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::ConcatChannels(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `mean((a - b)^2)` as a scalar.
    pub fn mean_squared(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_shape(vb, "mean_squared")?;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let m = s / va.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::MeanSquared(a, b), rg))
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, kernels::scale(&g, -1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, kernels::mul(&g, self.value(*b))?);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, kernels::mul(&g, self.value(*a))?);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, kernels::scale(&g, *s)),
                Op::MatMul(a, b) => {
                    let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), &g);
                    if self.rg(*a) {
                        acc(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    padding,
                } => {
                    let (dx, dk) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        *padding,
                        &g,
                        self.rg(*input),
                    )?;
                    if let Some(dx) = dx {
                        acc(&mut grads, *input, dx);
                    }
                    if self.rg(*kernel) {
                        acc(&mut grads, *kernel, dk);
                    }
                }
                Op::Upsample2x(x) => {
                    let dx = kernels::upsample2x_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, dx);
                }
                Op::AvgPool2x(x) => {
                    let dx = kernels::avgpool2x_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, dx);
                }
                Op::Silu(x) => acc(&mut grads, *x, kernels::silu_backward(self.value(*x), &g)),
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) =
                        kernels::group_norm_backward(self.value(*x), self.value(*gamma), stats, &g);
                    if self.rg(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if self.rg(*gamma) {
                        acc(&mut grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, db);
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if self.rg(*b) {
                        let db = kernels::add_channel_bias_backward(
                            self.value(*x).shape(),
                            self.value(*b).shape(),
                            &g,
                        );
                        acc(&mut grads, *b, db);
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let (da, db) = kernels::concat_channels_backward(
                        self.value(*a).shape(),
                        self.value(*b).shape(),
                        &g,
                    );
                    if self.rg(*a) {
                        acc(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::full(&shape, gv)?);
                }
                Op::MeanSquared(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.data()[0] / va.len() as f64;
                    let d: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| k * (x - y))
                        .collect();
                    let d = Tensor::from_parts(va.shape().to_vec(), d);
                    if self.rg(*a) {
                        acc(&mut grads, *a, d.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, kernels::scale(&d, -1.0));
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let g = match grads.get_mut(p.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(*p).shape())?,
            };
            out.push(g);
        }
        Ok(Gradients {
            params: self.params,
            grads: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let x0 = Tensor::randn(&[5], 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(x0.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[2, 3], 1).unwrap());
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[3], 1).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[3], 1).unwrap());
        let y = tape.param(Tensor::randn(&[2], 2).unwrap());
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::randn(&[3], 1).unwrap());
        let x = tape.param(Tensor::randn(&[3], 2).unwrap());
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.into_vec().len(), 1);
    }
}
