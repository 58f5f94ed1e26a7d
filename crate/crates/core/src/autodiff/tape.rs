//! Static tape of primitive ops with explicit backward rules.
//!
//! Each op appends a node holding its forward value plus whatever the backward
//! rule needs. `backward` walks the nodes in exact reverse order, summing
//! gradient contributions into every parent.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BatchNormParams, LayerNormCache};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of primitive op, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Affine,
    LayerNorm,
    BatchNorm,
    Softmax,
    Relu,
    Sigmoid,
    Add,
    Scale,
    MatmulNt,
    Matmul,
    Gather,
    Concat,
    ConvexMix,
    Sum,
    WeightedSum,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Leaf,
        OpKind::Affine,
        OpKind::LayerNorm,
        OpKind::BatchNorm,
        OpKind::Softmax,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Add,
        OpKind::Scale,
        OpKind::MatmulNt,
        OpKind::Matmul,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::ConvexMix,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Affine => "affine",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::MatmulNt => "matmul_nt",
            OpKind::Matmul => "matmul",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::ConvexMix => "convex_mix",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: BatchNormCache },
    BatchNormEval { x: Var, gamma: Var, beta: Var, stats: BatchNormParams },
    Softmax { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    MatmulNt { a: Var, b: Var },
    Matmul { a: Var, b: Var },
    Gather { x: Var, index: Arc<[usize]> },
    Concat { parts: Vec<Var> },
    ConvexMix { a: Var, b: Var, g: Var },
    Sum { x: Var },
    WeightedSum { x: Var, w: Tensor },
    Mse { x: Var, target: Tensor },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine { .. } => OpKind::Affine,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::MatmulNt { .. } => OpKind::MatmulNt,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat { .. } => OpKind::Concat,
            Op::ConvexMix { .. } => OpKind::ConvexMix,
            Op::Sum { .. } => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Mse { .. } => OpKind::Mse,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Scales one op kind's backward contributions; harness self-test only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub kind: OpKind,
    pub scale: f64,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, cache }))
    }

    /// Train-mode batch norm; returns the batch mean and variance for the
    /// caller to fold into running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (y, cache) = ops::batch_norm_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        Ok((self.push(y, Op::BatchNormTrain { x, gamma, beta, cache }), mean, var))
    }

    /// Eval-mode batch norm against the running statistics held in `stats`.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchNormParams) -> Result<Var> {
        let mut p = stats.clone();
        p.gamma = self.value(gamma).clone();
        p.beta = self.value(beta).clone();
        let y = ops::batch_norm_eval(self.value(x), &p)?;
        Ok(self.push(y, Op::BatchNormEval { x, gamma, beta, stats: p }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).rank() - 1;
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale { x, s })
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::bmm_nt(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatmulNt { a, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::bmm(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul { a, b }))
    }

    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let y = ops::gather(self.value(x), &index, shape)?;
        Ok(self.push(y, Op::Gather { x, index }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn convex_mix(&mut self, a: Var, b: Var, g: Var) -> Result<Var> {
        let y = ops::convex_mix(self.value(a), self.value(b), self.value(g))?;
        Ok(self.push(y, Op::ConvexMix { a, b, g }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// `Σ w_i x_i` with a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&w, "weighted_sum")?;
        let s = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&target, "mse")?;
        let v = self.value(x);
        let s = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / v.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse { x, target }))
    }

    /// Reverse pass from a scalar output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::contract("backward", "empty tape or output not on this tape"));
        }
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward_with_seed(output, seed)
    }

    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward", "empty tape"));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::contract("backward", "output not on this tape"));
        }
        self.value(output).expect_same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let factor = match self.fault {
                Some(f) if f.kind == node.op.kind() => f.scale,
                _ => 1.0,
            };
            let mut contribs: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (gx, gw, gb) = ops::affine_backward(self.value(*x), self.value(*w), &gy);
                    contribs.extend([(*x, gx), (*w, gw), (*b, gb)]);
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::layer_norm_backward(cache, self.value(*gamma), &gy);
                    contribs.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::BatchNormTrain { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::batch_norm_train_backward(cache, self.value(*gamma), &gy);
                    contribs.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::BatchNormEval { x, gamma, beta, stats } => {
                    let (gx, gg, gb) = ops::batch_norm_eval_backward(self.value(*x), stats, &gy);
                    contribs.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::Softmax { x } => contribs.push((*x, ops::softmax_backward(&node.value, &gy))),
                Op::Relu { x } => contribs.push((*x, ops::relu_backward(self.value(*x), &gy))),
                Op::Sigmoid { x } => contribs.push((*x, ops::sigmoid_backward(&node.value, &gy))),
                Op::Add { a, b } => {
                    contribs.push((*a, gy.clone()));
                    contribs.push((*b, gy));
                }
                Op::Scale { x, s } => contribs.push((*x, gy.scale(*s))),
                Op::MatmulNt { a, b } => {
                    let (ga, gb) = ops::bmm_nt_backward(self.value(*a), self.value(*b), &gy);
                    contribs.extend([(*a, ga), (*b, gb)]);
                }
                Op::Matmul { a, b } => {
                    let (ga, gb) = ops::bmm_backward(self.value(*a), self.value(*b), &gy);
                    contribs.extend([(*a, ga), (*b, gb)]);
                }
                Op::Gather { x, index } => {
                    contribs.push((*x, ops::gather_backward(self.value(*x).shape(), index, &gy)));
                }
                Op::Concat { parts } => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                    let pieces = ops::concat_channels_backward(&widths, &gy);
                    contribs.extend(parts.iter().copied().zip(pieces));
                }
                Op::ConvexMix { a, b, g } => {
                    let (ga, gb, gg) =
                        ops::convex_mix_backward(self.value(*a), self.value(*b), self.value(*g), &gy);
                    contribs.extend([(*a, ga), (*b, gb), (*g, gg)]);
                }
                Op::Sum { x } => {
                    contribs.push((*x, Tensor::full(self.value(*x).shape(), gy.data()[0])));
                }
                Op::WeightedSum { x, w } => contribs.push((*x, w.scale(gy.data()[0]))),
                Op::Mse { x, target } => {
                    let v = self.value(*x);
                    let k = 2.0 * gy.data()[0] / v.len() as f64;
                    let g = v.zip_map(target, "mse", |a, t| k * (a - t))?;
                    contribs.push((*x, g));
                }
            }
            for (parent, mut g) in contribs {
                if factor != 1.0 {
                    g = g.scale(factor);
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tape_backward_fails() {
        let tape = Tape::new();
        assert!(tape.backward(Var(0)).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn relu_sum_gradient_is_active_indicator() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 0.0, 3.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn fault_scales_only_its_kind() {
        let mut tape = Tape::with_fault(Some(Fault {
            kind: OpKind::Scale,
            scale: 2.0,
        }));
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let y = tape.scale(x, 3.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn op_kind_names_roundtrip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
