//! Multi-level aggregation, the residual output, and the end-to-end pipeline.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{self, MhaParams, SaeBlockParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gated_fusion::{self, GateMap, GateNetParams};
use crate::ops::{self, BatchNormParams, BnMode};
use crate::rng::{self, Stream};
use crate::tensor::{BevMap, Modality, Tensor};
use crate::windowing::{self, WindowGeometry, WindowSet};

/// 1×1 convolution `3C → C`, batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiFuseParams<T = Tensor> {
    pub conv_w: T,
    pub conv_b: T,
    pub bn: BatchNormParams<T>,
}

impl<T> PhiFuseParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> PhiFuseParams<U> {
        PhiFuseParams {
            conv_w: f(&format!("{prefix}.conv_w"), &self.conv_w),
            conv_b: f(&format!("{prefix}.conv_b"), &self.conv_b),
            bn: self.bn.map(&format!("{prefix}.bn"), f),
        }
    }
}

impl PhiFuseParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            conv_w: Tensor::zeros(&[3 * channels, channels]),
            conv_b: Tensor::zeros(&[channels]),
            bn: BatchNormParams::neutral(channels),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.conv_w.shape() != [3 * channels, channels] || self.conv_b.shape() != [channels] {
            return Err(Error::contract(
                "aggregate",
                format!("conv_w {:?} must be [{}, {channels}]", self.conv_w.shape(), 3 * channels),
            ));
        }
        Ok(())
    }
}

fn same_geometry(parts: &[&WindowSet]) -> Result<WindowGeometry> {
    let g = parts[0].geometry();
    if parts.iter().any(|p| p.geometry() != g) {
        return Err(Error::contract("aggregate", "window sets disagree on geometry"));
    }
    Ok(g)
}

/// `Φ_fuse(concat(cam_enh, lidar_enh, fused))` on merged maps.
pub fn aggregate(
    cam_enh: &WindowSet,
    lidar_enh: &WindowSet,
    fused: &WindowSet,
    p: &mut PhiFuseParams,
    mode: BnMode,
) -> Result<BevMap> {
    let g = same_geometry(&[cam_enh, lidar_enh, fused])?;
    p.validate(g.channels)?;
    let maps = [cam_enh, lidar_enh, fused]
        .iter()
        .map(|w| windowing::merge(w, Modality::Fused))
        .collect::<Result<Vec<_>>>()?;
    let agg = ops::concat_channels(&[maps[0].tensor(), maps[1].tensor(), maps[2].tensor()])?;
    let conv = ops::conv1x1(&agg, &p.conv_w, &p.conv_b)?;
    let normed = ops::batch_norm(&conv, &mut p.bn, mode)?;
    BevMap::new(ops::relu(&normed), Modality::Fused)
}

/// `Y = ReLU(F_out + F_cam + F_lidar)` with the pre-enhancement maps.
pub fn residual_out(f_out: &BevMap, f_cam: &BevMap, f_lidar: &BevMap) -> Result<BevMap> {
    let sum = f_out.tensor().add(f_cam.tensor())?.add(f_lidar.tensor())?;
    BevMap::new(ops::relu(&sum), Modality::Fused)
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub channels: usize,
    pub window: usize,
    pub num_heads: usize,
    pub sae_depth: usize,
    pub ffn_ratio: usize,
    /// Hidden width of the gate network; `0` means `max(C / 2, 1)`.
    pub gate_hidden: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            window: 4,
            num_heads: 2,
            sae_depth: 1,
            ffn_ratio: 4,
            gate_hidden: 0,
        }
    }
}

impl PipelineConfig {
    pub fn gate_width(&self) -> usize {
        if self.gate_hidden == 0 {
            (self.channels / 2).max(1)
        } else {
            self.gate_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 || self.ffn_ratio == 0 {
            return Err(Error::contract("pipeline_config", "channels, window and ffn_ratio must be positive"));
        }
        if self.num_heads == 0 || !self.channels.is_multiple_of(self.num_heads) {
            return Err(Error::contract(
                "pipeline_config",
                format!("{} channels not divisible into {} heads", self.channels, self.num_heads),
            ));
        }
        Ok(())
    }

    /// Checks a `[H, W, C]` input against this configuration.
    pub fn check_input(&self, shape: &[usize]) -> Result<WindowGeometry> {
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::contract(
                "forward_pipeline",
                format!("input shape {shape:?} does not match {} channels", self.channels),
            ));
        }
        WindowGeometry::new(shape[0], shape[1], self.window, self.channels)
    }
}

/// Every learned tensor of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams<T = Tensor> {
    pub sae_cam: Vec<SaeBlockParams<T>>,
    pub sae_lidar: Vec<SaeBlockParams<T>>,
    pub cross_c2l: MhaParams<T>,
    pub cross_l2c: MhaParams<T>,
    pub gate: GateNetParams<T>,
    pub phi: PhiFuseParams<T>,
}

impl<T> PipelineParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> PipelineParams<U> {
        PipelineParams {
            sae_cam: self
                .sae_cam
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("sae_cam.{i}"), f))
                .collect(),
            sae_lidar: self
                .sae_lidar
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("sae_lidar.{i}"), f))
                .collect(),
            cross_c2l: self.cross_c2l.map("cross_c2l", f),
            cross_l2c: self.cross_l2c.map("cross_l2c", f),
            gate: self.gate.map("gate", f),
            phi: self.phi.map("phi", f),
        }
    }
}

pub const BN_RUNNING_MEAN: &str = "phi.bn.running_mean";
pub const BN_RUNNING_VAR: &str = "phi.bn.running_var";

const PHI_INIT_SCALE: f64 = 0.1;
const PHI_INIT_SHIFT: f64 = 0.1;

impl PipelineParams {
    /// Learned branches zero, layer norms identity, batch norm neutral.
    pub fn zeros(cfg: &PipelineConfig) -> Self {
        let c = cfg.channels;
        let block = SaeBlockParams::zeros(c, cfg.num_heads, cfg.ffn_ratio);
        Self {
            sae_cam: vec![block.clone(); cfg.sae_depth],
            sae_lidar: vec![block; cfg.sae_depth],
            cross_c2l: MhaParams::zeros(c, cfg.num_heads),
            cross_l2c: MhaParams::zeros(c, cfg.num_heads),
            gate: GateNetParams::zeros(c, cfg.gate_width()),
            phi: PhiFuseParams::zeros(c),
        }
    }

    /// Seeded initialization; the gate starts at 0.5.
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Self {
        let c = cfg.channels;
        let mut s = Stream::new(rng::sub_seed(seed, rng::tag_of("pipeline_init")));
        let sae_cam = (0..cfg.sae_depth)
            .map(|_| SaeBlockParams::init(c, cfg.num_heads, cfg.ffn_ratio, &mut s))
            .collect();
        let sae_lidar = (0..cfg.sae_depth)
            .map(|_| SaeBlockParams::init(c, cfg.num_heads, cfg.ffn_ratio, &mut s))
            .collect();
        let cross_c2l = MhaParams::init(c, cfg.num_heads, &mut s);
        let cross_l2c = MhaParams::init(c, cfg.num_heads, &mut s);
        let gate = GateNetParams::init(c, cfg.gate_width(), &mut s);
        let mut phi = PhiFuseParams::zeros(c);
        // Small weights and a positive shift keep every output unit active at
        // the start; a random-sign init leaves many ReLUs dead for good.
        let a = PHI_INIT_SCALE * (6.0 / (4 * c) as f64).sqrt();
        phi.conv_w = Tensor::new(vec![3 * c, c], s.uniform_vec(3 * c * c, -a, a)).expect("phi weight");
        phi.bn.beta = Tensor::full(&[c], PHI_INIT_SHIFT);
        Self {
            sae_cam,
            sae_lidar,
            cross_c2l,
            cross_l2c,
            gate,
            phi,
        }
    }

    /// Trainable tensors by name, lexicographic order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t.clone())));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Trainable tensors plus the batch-norm running statistics.
    pub fn named_tensors_with_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = self.named_tensors();
        out.push((BN_RUNNING_MEAN.into(), self.phi.bn.running_mean.clone()));
        out.push((BN_RUNNING_VAR.into(), self.phi.bn.running_var.clone()));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Rebuilds parameters for `cfg` from a name lookup, validating shapes.
    /// Buffers are optional and keep their neutral values when absent.
    pub fn from_lookup(cfg: &PipelineConfig, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let template = Self::zeros(cfg);
        let mut missing = None;
        let mut p = template.map(&mut |name, t| match lookup(name) {
            Some(v) if v.shape() == t.shape() => v,
            Some(v) => {
                missing.get_or_insert_with(|| format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
                t.clone()
            }
            None => {
                missing.get_or_insert_with(|| format!("{name}: missing"));
                t.clone()
            }
        });
        if let Some(m) = missing {
            return Err(Error::contract("pipeline_params", m));
        }
        for (name, slot) in [
            (BN_RUNNING_MEAN, &mut p.phi.bn.running_mean),
            (BN_RUNNING_VAR, &mut p.phi.bn.running_var),
        ] {
            if let Some(v) = lookup(name) {
                if v.shape() != slot.shape() {
                    return Err(Error::contract("pipeline_params", format!("{name}: shape {:?}", v.shape())));
                }
                *slot = v;
            }
        }
        Ok(p)
    }

    pub fn bind(&self, tape: &mut Tape) -> PipelineParams<Var> {
        self.map(&mut |_, t| tape.leaf(t.clone()))
    }
}

/// How the two cross-attention streams are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionMode {
    /// Gate produced by the gate network.
    Adaptive,
    /// Constant gate value.
    Fixed(f64),
}

/// Tape handles for the pipeline's named intermediates.
#[derive(Debug, Clone)]
pub struct PipelineVars {
    pub y: Var,
    pub gate: Var,
    pub cam_enh: Var,
    pub lidar_enh: Var,
    pub a_c2l: Var,
    pub a_l2c: Var,
    pub fused: Var,
    pub f_out: Var,
    /// Batch mean and variance when run in train mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Records the full pipeline on `tape`. `cam` and `lidar` are `[H, W, C]`.
pub fn pipeline_graph(
    tape: &mut Tape,
    cam: Var,
    lidar: Var,
    cfg: &PipelineConfig,
    p: &PipelineParams<Var>,
    mode: BnMode,
    fusion: FusionMode,
) -> Result<PipelineVars> {
    cfg.validate()?;
    let geom = cfg.check_input(tape.value(cam).shape())?;
    tape.value(cam).expect_same_shape(tape.value(lidar), "forward_pipeline")?;
    let part: Arc<[usize]> = geom.partition_index().into();
    let merge: Arc<[usize]> = geom.merge_index().into();
    let tok_shape = geom.token_shape();
    let map_shape = geom.map_shape();

    let enhance = |tape: &mut Tape, x: Var, blocks: &[SaeBlockParams<Var>]| -> Result<Var> {
        let mut w = tape.gather(x, part.clone(), &tok_shape)?;
        for b in blocks {
            w = attention::sae_block_graph(tape, w, b)?;
        }
        Ok(w)
    };
    let cam_enh = enhance(tape, cam, &p.sae_cam)?;
    let lidar_enh = enhance(tape, lidar, &p.sae_lidar)?;

    let a_c2l_w = attention::mha_graph(tape, cam_enh, lidar_enh, &p.cross_c2l)?;
    let a_l2c_w = attention::mha_graph(tape, lidar_enh, cam_enh, &p.cross_l2c)?;
    let a_c2l = tape.gather(a_c2l_w, merge.clone(), &map_shape)?;
    let a_l2c = tape.gather(a_l2c_w, merge.clone(), &map_shape)?;

    let gate = match fusion {
        FusionMode::Adaptive => gated_fusion::gate_graph(tape, a_c2l, a_l2c, &p.gate)?,
        FusionMode::Fixed(g) => {
            let m = gated_fusion::fixed_gate(g, geom.height, geom.width)?;
            tape.leaf(m.into_tensor())
        }
    };
    let fused_map = tape.convex_mix(a_c2l, a_l2c, gate)?;
    let fused = tape.gather(fused_map, part, &tok_shape)?;

    let cam_m = tape.gather(cam_enh, merge.clone(), &map_shape)?;
    let lidar_m = tape.gather(lidar_enh, merge.clone(), &map_shape)?;
    let fused_m = tape.gather(fused, merge, &map_shape)?;
    let agg = tape.concat(&[cam_m, lidar_m, fused_m])?;
    let conv = tape.affine(agg, p.phi.conv_w, p.phi.conv_b)?;
    let (normed, batch_stats) = match mode {
        BnMode::Train => {
            let (v, m, s) = tape.batch_norm_train(conv, p.phi.bn.gamma, p.phi.bn.beta, p.phi.bn.eps)?;
            (v, Some((m, s)))
        }
        BnMode::Eval => {
            let stats = BatchNormParams {
                gamma: Tensor::zeros(&[cfg.channels]),
                beta: Tensor::zeros(&[cfg.channels]),
                running_mean: p.phi.bn.running_mean.clone(),
                running_var: p.phi.bn.running_var.clone(),
                eps: p.phi.bn.eps,
                momentum: p.phi.bn.momentum,
            };
            (tape.batch_norm_eval(conv, p.phi.bn.gamma, p.phi.bn.beta, &stats)?, None)
        }
    };
    let f_out = tape.relu(normed);
    let s = tape.add(f_out, cam)?;
    let s = tape.add(s, lidar)?;
    let y = tape.relu(s);
    Ok(PipelineVars {
        y,
        gate,
        cam_enh,
        lidar_enh,
        a_c2l: a_c2l_w,
        a_l2c: a_l2c_w,
        fused: fused_map,
        f_out,
        batch_stats,
    })
}

/// Values produced along the way, for inspection.
#[derive(Debug, Clone)]
pub struct Intermediates {
    pub cam_enh: WindowSet,
    pub lidar_enh: WindowSet,
    pub a_c2l: WindowSet,
    pub a_l2c: WindowSet,
    pub fused: BevMap,
    pub f_out: BevMap,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub y: BevMap,
    pub gate: GateMap,
    pub intermediates: Intermediates,
    /// Train-mode batch statistics; fold them into the running stats with
    /// [`ops::update_running_stats`] when training.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn forward_pipeline(
    f_cam: &BevMap,
    f_lidar: &BevMap,
    cfg: &PipelineConfig,
    params: &PipelineParams,
    mode: BnMode,
) -> Result<PipelineOutput> {
    forward_pipeline_with(f_cam, f_lidar, cfg, params, mode, FusionMode::Adaptive)
}

pub fn forward_pipeline_with(
    f_cam: &BevMap,
    f_lidar: &BevMap,
    cfg: &PipelineConfig,
    params: &PipelineParams,
    mode: BnMode,
    fusion: FusionMode,
) -> Result<PipelineOutput> {
    let mut tape = Tape::new();
    let cam = tape.leaf(f_cam.tensor().clone());
    let lidar = tape.leaf(f_lidar.tensor().clone());
    let pv = params.bind(&mut tape);
    let v = pipeline_graph(&mut tape, cam, lidar, cfg, &pv, mode, fusion)?;
    let geom = cfg.check_input(f_cam.tensor().shape())?;
    let ws = |var: Var| WindowSet::new(tape.value(var).clone(), geom);
    let map = |var: Var| BevMap::new(tape.value(var).clone(), Modality::Fused);
    Ok(PipelineOutput {
        y: map(v.y)?,
        gate: GateMap::new(tape.value(v.gate).clone())?,
        intermediates: Intermediates {
            cam_enh: ws(v.cam_enh)?,
            lidar_enh: ws(v.lidar_enh)?,
            a_c2l: ws(v.a_c2l)?,
            a_l2c: ws(v.a_l2c)?,
            fused: map(v.fused)?,
            f_out: map(v.f_out)?,
        },
        batch_stats: v.batch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(shape: [usize; 3], seed: u64, lo: f64, modality: Modality) -> BevMap {
        let mut s = Stream::new(seed);
        BevMap::new(Tensor::from_fn(&shape, |_| s.uniform_in(lo, 1.0)), modality).unwrap()
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            channels: 8,
            window: 4,
            num_heads: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn zero_phi_gives_zero_out() {
        let ws = windowing::partition(&random_map([4, 4, 2], 1, -1.0, Modality::Camera), 2).unwrap();
        let mut p = PhiFuseParams::zeros(2);
        let out = aggregate(&ws, &ws, &ws, &mut p, BnMode::Eval).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_output_nonnegative() {
        let mut s = Stream::new(3);
        let ws = windowing::partition(&random_map([4, 4, 2], 2, -1.0, Modality::Camera), 2).unwrap();
        let mut p = PhiFuseParams::zeros(2);
        p.conv_w = Tensor::from_fn(&[6, 2], |_| s.uniform_in(-1.0, 1.0));
        for mode in [BnMode::Train, BnMode::Eval] {
            let out = aggregate(&ws, &ws, &ws, &mut p, mode).unwrap();
            assert!(out.tensor().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn aggregate_geometry_mismatch() {
        let f = random_map([4, 4, 2], 2, -1.0, Modality::Camera);
        let a = windowing::partition(&f, 2).unwrap();
        let b = windowing::partition(&f, 4).unwrap();
        assert!(aggregate(&a, &a, &b, &mut PhiFuseParams::zeros(2), BnMode::Eval).is_err());
        assert!(aggregate(&a, &a, &a, &mut PhiFuseParams::zeros(3), BnMode::Eval).is_err());
    }

    #[test]
    fn residual_examples() {
        let cam = random_map([3, 3, 2], 4, 0.0, Modality::Camera);
        let lidar = random_map([3, 3, 2], 5, 0.0, Modality::Lidar);
        let zero = BevMap::zeros(3, 3, 2, Modality::Fused);
        let y = residual_out(&zero, &cam, &lidar).unwrap();
        assert!(y.tensor().bit_eq(&cam.tensor().add(lidar.tensor()).unwrap()));
        assert_eq!(y.modality(), Modality::Fused);
        let neg = random_map([3, 3, 2], 6, -1.0, Modality::Camera);
        let y = residual_out(&zero, &neg, &lidar).unwrap();
        assert!(y.tensor().bit_eq(&ops::relu(&neg.tensor().add(lidar.tensor()).unwrap())));
        assert!(residual_out(&BevMap::zeros(3, 2, 2, Modality::Fused), &cam, &lidar).is_err());
    }

    #[test]
    fn shape_contract() {
        let cfg = PipelineConfig::default();
        let cam = random_map([16, 16, 16], 7, -1.0, Modality::Camera);
        let lidar = random_map([16, 16, 16], 8, -1.0, Modality::Lidar);
        let out = forward_pipeline(&cam, &lidar, &cfg, &PipelineParams::init(&cfg, 1), BnMode::Eval).unwrap();
        assert_eq!(out.y.tensor().shape(), &[16, 16, 16]);
        assert_eq!(out.gate.tensor().shape(), &[16, 16, 1]);
        assert!(out.y.tensor().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn input_validation() {
        let cfg = small_cfg();
        let p = PipelineParams::zeros(&cfg);
        let a = random_map([8, 8, 8], 1, -1.0, Modality::Camera);
        let bad_c = random_map([8, 8, 4], 1, -1.0, Modality::Camera);
        let bad_hw = random_map([6, 8, 8], 1, -1.0, Modality::Camera);
        assert!(forward_pipeline(&a, &bad_c, &cfg, &p, BnMode::Eval).is_err());
        assert!(matches!(
            forward_pipeline(&bad_hw, &bad_hw, &cfg, &p, BnMode::Eval),
            Err(Error::WindowSize { .. })
        ));
    }

    #[test]
    fn named_tensors_roundtrip_through_lookup() {
        let cfg = small_cfg();
        let p = PipelineParams::init(&cfg, 3);
        let named = p.named_tensors_with_buffers();
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(names, sorted);
        let back = PipelineParams::from_lookup(&cfg, |n| named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone()))
            .unwrap();
        assert_eq!(back, p);
        let err = PipelineParams::from_lookup(&cfg, |n| {
            if n == "gate.w2" {
                None
            } else {
                named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone())
            }
        });
        assert!(err.is_err());
    }
}
