//! Pixel-wise gate over the two cross-attention streams, the convex fusion it
//! drives, and the static baselines it is compared against.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Stream;
use crate::tensor::{BevMap, Modality, Tensor};

/// Two 1×1 convolutions `2C → C_mid → 1` with ReLU between and sigmoid after.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> GateNetParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> GateNetParams<U> {
        GateNetParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }
}

impl GateNetParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[2 * channels, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// Random first layer, zero output layer: the gate starts at exactly 0.5
    /// while every weight still receives gradient.
    pub fn init(channels: usize, hidden: usize, stream: &mut Stream) -> Self {
        let mut p = Self::zeros(channels, hidden);
        let a = (6.0 / (3 * channels + hidden) as f64).sqrt();
        p.w1 = Tensor::new(vec![2 * channels, hidden], stream.uniform_vec(2 * channels * hidden, -a, a))
            .expect("gate weight");
        p
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.w1.rank() != 2 || self.w1.shape()[0] != 2 * channels || self.w1.shape()[1] == 0 {
            return Err(Error::contract(
                "compute_gate",
                format!("w1 shape {:?} for {channels} channels", self.w1.shape()),
            ));
        }
        if self.w2.shape() != [self.w1.shape()[1], 1] || self.b2.shape() != [1] {
            return Err(Error::contract("compute_gate", "second layer must map to one channel"));
        }
        Ok(())
    }
}

/// `[H, W, 1]` gate with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMap {
    tensor: Tensor,
}

impl GateMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        tensor.expect_rank(3, "gate_map")?;
        if tensor.last_dim() != 1 {
            return Err(Error::contract("gate_map", format!("shape {:?} is not [H, W, 1]", tensor.shape())));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract("gate_map", format!("entry {v} outside [0, 1]")));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.tensor.data()[y * self.width() + x]
    }
}

fn check_pair(a: &BevMap, b: &BevMap, op: &'static str) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::contract(
            op,
            format!("shape {:?} vs {:?}", a.tensor().shape(), b.tensor().shape()),
        ));
    }
    Ok(())
}

/// Gate logits → sigmoid on the tape; inputs are `[H, W, C]` maps.
pub fn gate_graph(tape: &mut Tape, a_c2l: Var, a_l2c: Var, p: &GateNetParams<Var>) -> Result<Var> {
    let x = tape.concat(&[a_c2l, a_l2c])?;
    let h = tape.affine(x, p.w1, p.b1)?;
    let h = tape.relu(h);
    let logits = tape.affine(h, p.w2, p.b2)?;
    Ok(tape.sigmoid(logits))
}

/// `G = σ(net(concat(A_cam←lidar, A_lidar←cam)))`.
pub fn compute_gate(a_c2l: &BevMap, a_l2c: &BevMap, p: &GateNetParams) -> Result<GateMap> {
    check_pair(a_c2l, a_l2c, "compute_gate")?;
    p.validate(a_c2l.channels())?;
    let mut tape = Tape::new();
    let a = tape.leaf(a_c2l.tensor().clone());
    let b = tape.leaf(a_l2c.tensor().clone());
    let pv = p.map("", &mut |_, t| tape.leaf(t.clone()));
    let g = gate_graph(&mut tape, a, b, &pv)?;
    GateMap::new(tape.value(g).clone())
}

/// `G ⊙ A_cam←lidar + (1 − G) ⊙ A_lidar←cam`, gate broadcast over channels.
pub fn fuse_gated(a_c2l: &BevMap, a_l2c: &BevMap, g: &GateMap) -> Result<BevMap> {
    check_pair(a_c2l, a_l2c, "fuse_gated")?;
    if g.height() != a_c2l.height() || g.width() != a_c2l.width() {
        return Err(Error::contract(
            "fuse_gated",
            format!("gate {:?} vs map {:?}", g.tensor().shape(), a_c2l.tensor().shape()),
        ));
    }
    let fused = ops::convex_mix(a_c2l.tensor(), a_l2c.tensor(), g.tensor())?;
    BevMap::new(fused, Modality::Fused)
}

/// Constant gate, the fixed-weight ablation baseline.
pub fn fixed_gate(g: f64, height: usize, width: usize) -> Result<GateMap> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::contract("fixed_gate", format!("gate value {g} outside [0, 1]")));
    }
    if height == 0 || width == 0 {
        return Err(Error::contract("fixed_gate", "empty map"));
    }
    GateMap::new(Tensor::full(&[height, width, 1], g))
}

/// Static fusion weights `[2C, C]` and bias `[C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFuserParams<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl<T> ConvFuserParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ConvFuserParams<U> {
        ConvFuserParams {
            w: f(&format!("{prefix}.w"), &self.w),
            b: f(&format!("{prefix}.b"), &self.b),
        }
    }
}

impl ConvFuserParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            w: Tensor::zeros(&[2 * channels, channels]),
            b: Tensor::zeros(&[channels]),
        }
    }

    /// Starts as the plain sum `F_cam + F_lidar`.
    pub fn sum_init(channels: usize) -> Self {
        let eye = Tensor::eye(channels);
        let mut w = eye.data().to_vec();
        w.extend_from_slice(eye.data());
        Self {
            w: Tensor::new(vec![2 * channels, channels], w).expect("stacked identity"),
            b: Tensor::zeros(&[channels]),
        }
    }
}

pub fn conv_fuser_graph(tape: &mut Tape, cam: Var, lidar: Var, p: &ConvFuserParams<Var>) -> Result<Var> {
    let x = tape.concat(&[cam, lidar])?;
    tape.affine(x, p.w, p.b)
}

/// `conv1x1(concat(F_cam, F_lidar))`.
pub fn conv_fuser_baseline(f_cam: &BevMap, f_lidar: &BevMap, w: &Tensor, b: &Tensor) -> Result<BevMap> {
    check_pair(f_cam, f_lidar, "conv_fuser")?;
    let x = ops::concat_channels(&[f_cam.tensor(), f_lidar.tensor()])?;
    BevMap::new(ops::conv1x1(&x, w, b)?, Modality::Fused)
}
